"""Acceptance gate: the end-to-end guarantees the package ships with, each
one exercised at full strength. One test per guarantee:

  1. agreement and conflict ordering survive 10,000 randomized fault runs
  2. a fully conflicting hot-key workload always terminates (1,000 runs)
  3. committed cross-shard batches stay within two ring rotations
  4. cross-shard message count is exactly n per hop, linear in ring length
  5. every recovery path finishes its workload (view change, retransmit,
     checkpoint catch-up, remote view change), with post-recovery throughput
     at least 90% of the pre-fault rate
  6. throughput and latency trends point the expected directions
  7. ledgers verify, hold every acked batch everywhere, and match a
     brute-force Merkle oracle
  8. same seed, same bytes: trace and CSV reproduce exactly

These are slow by unit-test standards (the randomized sweep alone is a few
minutes); everything is seeded, so failures reproduce exactly.
"""

import dataclasses
import hashlib
import io
import random
import time

from ringshard import codec, core, ledger, scenario, verify, workload
from ringshard.cli import _resolve_scenario

from conftest import run_scenario


def _run(sc: scenario.Scenario):
    return scenario.run_one(sc)


# --- 1. randomized safety sweep --------------------------------------------------

_FAULT_KINDS = ("crash", "silent", "keep_dark", "equivocate", "eat_cross")


def _random_scenario(i: int, rng: random.Random) -> scenario.Scenario:
    """One randomized configuration: shard count cycles through 1/3/4, up to
    one byzantine replica per shard, lossy links up to 20%."""
    z = (1, 3, 4)[i % 3]
    n_faults = min(rng.choice((0, 1, 1, 2)), z)
    fault_shards = rng.sample(range(1, z + 1), n_faults)
    specs = []
    for j, shard in enumerate(fault_shards):
        if i % 5 == 0 and j == 0:
            kind = "equivocate"
        elif i % 5 == 1 and j == 0:
            kind = "keep_dark"
        else:
            kind = rng.choice(_FAULT_KINDS)
        index = 0 if kind == "equivocate" else rng.choice((0, 0, 1, 3))
        dark = ()
        if kind == "keep_dark":
            dark = tuple(sorted(rng.sample((1, 2, 3), rng.choice((1, 2)))))
        specs.append(scenario.FaultSpec(
            kind=kind, shard=shard, index=index,
            at_ms=rng.choice((0, 50, 200)),
            dark=dark, drops=rng.choice((1, 2, 5)),
        ))
    return scenario.Scenario(
        name=f"fuzz{i}", shards=z, replicas=4, faults=1,
        txns=rng.choice((8, 12, 16)), batch_size=rng.choice((2, 4)),
        clients=2,
        cross_pct=0.0 if z == 1 else rng.choice((0.0, 30.0, 100.0)),
        involved=rng.choice((2, 3)) if z > 1 else 2,
        hot_keys=rng.choice((0, 2)),
        drop_pct=rng.choice((0.0, 0.0, 5.0, 10.0, 20.0)),
        checkpoint_period=rng.choice((10, 100)),
        seed=10_000 + i, trace="counts", deadline_s=30,
        fault_specs=tuple(specs),
    )


def test_agreement_and_conflict_order_hold_across_randomized_fault_runs():
    """Honest replicas of a shard never execute different batches at the same
    sequence number, and conflicting batches never invert their order at a
    shard where they contend -- across 10,000 seeded randomized runs mixing
    shard counts, loss rates, and byzantine behaviors."""
    runs = 10_000
    started = time.monotonic()
    kind_seen = {kind: 0 for kind in _FAULT_KINDS}
    completed = 0
    for i in range(runs):
        rng = random.Random(777 * (i + 1))
        sc = _random_scenario(i, rng)
        for spec in sc.fault_specs:
            kind_seen[spec.kind] += 1
        res, sim, spec, registry, metrics = _run(sc)
        problems = (verify.check_agreement(res)
                    + verify.check_consistence(res, registry))
        assert not problems, (i, sc.name, problems[:3])
        completed += res.all_acked()
    elapsed = time.monotonic() - started
    assert elapsed < 1800, f"sweep took {elapsed:.0f}s"
    # the behavior mix actually covered every fault kind, many times
    assert all(count > 100 for count in kind_seen.values()), kind_seen
    # the sweep is not vacuous: the vast majority of runs finish
    assert completed >= runs * 0.9, completed


# --- 2. termination under total conflict -----------------------------------------

def test_fully_conflicting_hot_key_workload_terminates():
    """Every batch touches one hot key per involved shard and starts at the
    same first-in-ring shard, so all batches mutually conflict. Locking
    serializes them; nothing ever deadlocks and all acks arrive before the
    virtual deadline, over 1,000 seeded runs."""
    deadline_s = 60
    for i in range(1000):
        sc = scenario.Scenario(
            name=f"hot{i}", shards=4, replicas=4, faults=1,
            txns=16, batch_size=4, clients=2, cross_pct=100.0,
            involved=2 + (i % 3), first_shard=1, hot_keys=1,
            seed=20_000 + i, trace="counts", deadline_s=deadline_s,
        )
        res, sim, spec, registry, metrics = _run(sc)
        assert res.all_acked(), (i, metrics.txns_acked, metrics.txns_submitted)
        assert res.end_us < deadline_s * 1_000_000, (i, res.end_us)
        problems = verify.run_all(res, registry)
        assert not problems, (i, problems[:3])


# --- 3. two-rotation bound --------------------------------------------------------

def test_committed_batches_stay_within_two_rotations():
    """Full-trace runs: each replica commits a batch through at most one
    consensus pass and executes it exactly once, and no ring hop carries more
    than one send per replica per rotation."""
    for k in (2, 3, 4):
        sc = scenario.Scenario(
            name=f"rot{k}", shards=4, replicas=4, faults=1,
            txns=40, batch_size=10, clients=2, cross_pct=100.0, involved=k,
            seed=30 + k, trace="full", track_cross=True, deadline_s=120,
        )
        res, sim, spec, registry, metrics = _run(sc)
        assert res.all_acked(), k
        problems = verify.check_rotation_bound(res, registry)
        assert not problems, (k, problems[:3])
    # mixed single- and cross-shard traffic obeys the same bound
    res, sim, spec, registry, metrics = run_scenario(
        shards=3, txns=60, clients=2, cross_pct=40.0, seed=31,
        trace="full", track_cross=True)
    assert res.all_acked()
    assert verify.check_rotation_bound(res, registry) == []


# --- 4. linear communication ------------------------------------------------------

def test_cross_shard_message_count_is_linear_in_involved_shards():
    """Fault-free runs: every ring hop of every rotation carries exactly n
    cross-shard messages per batch, so a batch over k shards costs 2*k*n
    sends -- linear in k with slope 2n."""
    n = 4
    totals = {}
    for k in (2, 3, 4):
        sc = scenario.Scenario(
            name=f"lin{k}", shards=4, replicas=n, faults=1,
            txns=40, batch_size=10, clients=2, cross_pct=100.0, involved=k,
            seed=3, trace="counts", track_cross=True, deadline_s=120,
        )
        res, sim, spec, registry, metrics = _run(sc)
        assert res.all_acked(), k
        problems = verify.check_linear_comm(res, registry)
        assert not problems, (k, problems[:3])
        acked = {a[0] for c in res.clients.values() for a in c.acks}
        per_batch = {
            sum(v for (d, _, _, _), v in res.cross_counts.items() if d == dg)
            for dg in acked
        }
        assert per_batch == {2 * k * n}, (k, per_batch)
        totals[k] = 2 * k * n
    assert totals[3] - totals[2] == totals[4] - totals[3] == 2 * n


# --- 5. recovery paths ------------------------------------------------------------

def _timeline_tps(res, bucket_ms):
    return [b["throughput_tps"] for b in workload.ack_timeline(res, bucket_ms)]


def test_recovery_paths_complete_all_transactions():
    """Four scripted failures, each of which must finish its whole workload:
    (a) silent primary: view change; post-recovery throughput >= 90% of the
        pre-fault rate
    (b) all Forwards of one hop lost once: transmit timer retransmits
    (c) primary keeps one replica dark: stable checkpoints catch it up
    (d) fewer than f+1 Forwards arrive: the next shard's complaint replaces
        the origin shard's primary"""
    # (a) silent primary, throughput dip then recovery
    sc = scenario.parse_scenario(_resolve_scenario("primary_failure"))
    sc = dataclasses.replace(sc, txns=4000, deadline_s=300)
    res, sim, spec, registry, metrics = _run(sc)
    assert res.all_acked(), "silent primary: incomplete"
    assert res.counters.get("note_newview", 0) > 0
    assert verify.run_all(res, registry) == []
    tps = _timeline_tps(res, sc.bucket_ms)
    fault_idx = sc.fault_specs[0].at_ms // sc.bucket_ms
    pre = tps[2:fault_idx]
    i = fault_idx
    while i < len(tps) and tps[i] > 0:
        i += 1
    while i < len(tps) and tps[i] == 0:
        i += 1
    last = max(j for j, v in enumerate(tps) if v > 0)
    post = tps[i + 1:last - 1]
    assert pre and post, (len(pre), len(post))
    ratio = (sum(post) / len(post)) / (sum(pre) / len(pre))
    assert ratio >= 0.9, f"post-recovery throughput at {ratio:.2%} of pre-fault"

    # (b) one hop's Forwards all dropped once; retransmission completes
    part = scenario.PartitionSpec(start_ms=0, end_ms=700, src_shards=(1,),
                                  dst_shards=(2,), kinds=("forward",))
    res, sim, spec, registry, metrics = run_scenario(
        shards=2, txns=30, clients=1, seed=12, cross_pct=100.0,
        first_shard=1, deadline_s=300, partitions=(part,))
    assert res.all_acked(), "forward loss: incomplete"
    assert res.counters.get("retransmissions", 0) > 0
    assert verify.run_all(res, registry) == []

    # (c) dark replica catches up from stable checkpoints
    res, sim, spec, registry, metrics = run_scenario(
        shards=1, txns=150, clients=2, seed=13, checkpoint_period=10,
        deadline_s=300,
        fault_specs=(scenario.FaultSpec("keep_dark", 1, 0, dark=(3,)),))
    assert res.all_acked(), "dark replica: incomplete"
    dark = res.replicas[core.ReplicaId(1, 3)]
    assert res.counters.get("note_adopt", 0) > 0
    assert res.counters.get("note_checkpoint_stable", 0) > 0
    assert dark.last_stable >= 10
    assert dark.ledger.verify_chain()
    assert verify.run_all(res, registry) == []

    # (d) starved of Forwards, the next shard replaces the origin primary
    part = scenario.PartitionSpec(start_ms=0, end_ms=3000, src_shards=(1,),
                                  dst_shards=(2,), dst_indices=(1, 2, 3),
                                  kinds=("forward",))
    res, sim, spec, registry, metrics = run_scenario(
        shards=2, txns=30, clients=1, seed=14, cross_pct=100.0,
        first_shard=1, deadline_s=300, partitions=(part,))
    assert res.all_acked(), "remote view change: incomplete"
    assert res.counters.get("note_remote_viewchange", 0) >= 1
    assert res.counters.get("note_newview", 0) >= 1
    origin_views = {rep.view for rid, rep in res.replicas.items()
                    if rid.shard == 1}
    assert max(origin_views) >= 1
    assert verify.run_all(res, registry) == []


# --- 6. trend directions ----------------------------------------------------------

def _mean_metric(field: str, seeds, **kw):
    vals = []
    for seed in seeds:
        sc = scenario.Scenario(name="trend", seed=seed, trace="counts",
                               deadline_s=300, **kw)
        res, sim, spec, registry, metrics = _run(sc)
        assert res.all_acked(), (field, kw, seed)
        vals.append(getattr(metrics, field))
    return sum(vals) / len(vals)


def test_throughput_and_latency_trends_match_expected_directions():
    """Direction-only checks, averaged over three seeds: more cross-shard
    traffic never raises throughput; more involved shards raise latency;
    larger batches raise throughput with diminishing gains."""
    seeds = (1, 2, 3)
    base = dict(shards=4, replicas=4, faults=1, clients=4)

    tput = [_mean_metric("throughput_tps", seeds, txns=400, batch_size=10,
                         cross_pct=c, involved=2, **base)
            for c in (0.0, 30.0, 100.0)]
    assert tput[0] >= tput[1] >= tput[2], tput

    lat = [_mean_metric("latency_avg_ms", seeds, txns=200, batch_size=10,
                        cross_pct=100.0, involved=k, **base)
           for k in (2, 3, 4)]
    assert lat[0] < lat[1] < lat[2], lat

    bt = [_mean_metric("throughput_tps", seeds, shards=1, replicas=4,
                       faults=1, clients=4, txns=3000, batch_size=b,
                       cross_pct=0.0)
          for b in (10, 100, 1000)]
    assert bt[0] < bt[1] <= bt[2] * 2, bt  # rises, then stays in range
    assert bt[2] / bt[1] < bt[1] / bt[0], bt  # gains diminish: saturation


# --- 7. ledger integrity ----------------------------------------------------------

def _brute_merkle(leaves):
    h = lambda b: hashlib.blake2b(b, digest_size=core.DIGEST_SIZE).digest()
    level = [h(b"\x00" + leaf) for leaf in leaves]
    while len(level) > 1:
        if len(level) % 2 == 1:
            level.append(level[-1])
        level = [h(b"\x01" + level[i] + level[i + 1])
                 for i in range(0, len(level), 2)]
    return level[0]


def test_ledgers_verify_and_agree_on_merkle_roots(keystore):
    """After a conflict-heavy mixed run every honest chain verifies, every
    acked batch sits in every involved shard's ledger in consistent order,
    and block Merkle roots equal an independently built tree for batch sizes
    1 through 9."""
    res, sim, spec, registry, metrics = run_scenario(
        shards=3, txns=120, clients=4, cross_pct=60.0, hot_keys=2,
        seed=41, deadline_s=300)
    assert res.all_acked()
    problems = (verify.check_chains(res)
                + verify.check_ledger_presence(res, registry)
                + verify.check_consistence(res, registry))
    assert not problems, problems[:3]
    for rid, rep in res.replicas.items():
        if rid not in res.faulty:
            assert rep.ledger.verify_chain(), rid
            for block in rep.ledger.blocks[1:]:
                batch = registry[block.batch_digest]
                leaves = [codec.encode_txn(t) for t in batch.txns]
                assert block.root == _brute_merkle(leaves), rid

    from conftest import make_batch
    for size in range(1, 10):
        batch = make_batch(keystore,
                           [[(1, f"k{j}", str(j))] for j in range(size)])
        leaves = [codec.encode_txn(t) for t in batch.txns]
        assert ledger.batch_merkle_root(batch) == _brute_merkle(leaves), size


# --- 8. determinism ---------------------------------------------------------------

def test_rerun_with_same_seed_is_byte_identical():
    """A faulty, lossy, full-trace scenario re-run with its seed reproduces
    the trace and the metrics CSV byte for byte."""
    def once():
        sc = scenario.Scenario(
            name="repeat", shards=3, replicas=4, faults=1,
            txns=60, batch_size=5, clients=3, cross_pct=50.0,
            drop_pct=10.0, seed=99, trace="full", deadline_s=300,
            fault_specs=(scenario.FaultSpec("silent", 1, 0, at_ms=100),),
        )
        res, sim, spec, registry, metrics = _run(sc)
        buf = io.StringIO()
        import csv as _csv
        writer = _csv.DictWriter(buf, fieldnames=workload.CSV_COLUMNS)
        writer.writeheader()
        writer.writerow({c: metrics.row().get(c, "")
                         for c in workload.CSV_COLUMNS})
        return res.trace_bytes(), buf.getvalue().encode()

    trace1, csv1 = once()
    trace2, csv2 = once()
    assert trace1 == trace2
    assert csv1 == csv2
