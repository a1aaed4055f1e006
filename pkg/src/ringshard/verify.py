"""Run checkers: the safety and structure invariants a finished simulation
must satisfy. Each checker returns a list of human-readable problems; an
empty list means the invariant held. `run_all` bundles the safety-critical
ones for use behind the CLI's --assert flag.

Agreement: within a shard, any two honest replicas that both executed
sequence number k executed the same batch there. Checked over full histories,
so replicas that lag (dark, crashed) are fine as long as they never diverge.

Consistence: two batches whose writes collide must appear in the same
relative order in every honest ledger of each shard where they contend for
keys. Non-conflicting fragments commute, so block order elsewhere may differ
across shards; that is allowed and expected.

Structure: hash chains verify; a multi-shard batch acknowledged to a client
is present in the ledger of every shard it involved; locks drain to empty
once everything finished; fault-free runs use exactly replicas-per-shard
cross-shard messages per ring hop and touch each shard's consensus once.
"""

from __future__ import annotations

import json
from collections import defaultdict

from . import core
from .simnet import RunResult


def _honest(res: RunResult):
    return {rid: rep for rid, rep in res.replicas.items()
            if rid not in res.faulty}


def check_agreement(res: RunResult) -> list[str]:
    problems = []
    for shard in range(1, res.config.shards + 1):
        by_k: dict[int, dict[str, list[str]]] = defaultdict(dict)
        for rid, rep in _honest(res).items():
            if rid.shard != shard:
                continue
            for k, digest in rep.exec_history.items():
                by_k[k].setdefault(digest.hex(), []).append(str(rid))
        for k, variants in sorted(by_k.items()):
            if len(variants) > 1:
                problems.append(
                    f"shard {shard} k={k}: diverging executions {variants}"
                )
    return problems


def check_violation_notes(res: RunResult) -> list[str]:
    return [f"replica violation at {t}us {node}: {fields}"
            for t, node, fields in res.violations]


def check_chains(res: RunResult) -> list[str]:
    problems = []
    for rid, rep in res.replicas.items():
        if not rep.ledger.verify_chain():
            problems.append(f"{rid}: broken hash chain")
    for shard in range(1, res.config.shards + 1):
        chains = {}
        for rid, rep in _honest(res).items():
            if rid.shard == shard:
                chains[rid] = rep.ledger.blocks
        if not chains:
            continue
        longest = max(chains.values(), key=len)
        for rid, blocks in chains.items():
            for pos, block in enumerate(blocks):
                if block.block_hash() != longest[pos].block_hash():
                    problems.append(
                        f"{rid}: ledger diverges at position {pos}"
                    )
                    break
    return problems


def _acked_digests(res: RunResult) -> set[bytes]:
    return {a[0] for c in res.clients.values() for a in c.acks}


def check_ledger_presence(res: RunResult, batches: dict) -> list[str]:
    """Every acknowledged batch sits in the ledger of every involved shard
    (on at least one honest replica per shard; laggards may not have it)."""
    problems = []
    for digest in sorted(_acked_digests(res)):
        batch = batches.get(digest)
        if batch is None:
            problems.append(f"acked digest {digest.hex()} not in registry")
            continue
        for shard in batch.involved:
            present = any(
                rep.ledger.position_of(digest) is not None
                for rid, rep in _honest(res).items() if rid.shard == shard
            )
            if not present:
                problems.append(
                    f"acked {digest.hex()[:12]} missing from shard {shard}"
                )
    return problems


def _conflict(a: core.Batch, b: core.Batch) -> bool:
    return bool(_contended_shards(a, b))


def _contended_shards(a: core.Batch, b: core.Batch) -> list[int]:
    return [shard for shard in set(a.involved) & set(b.involved)
            if a.lock_keys(shard) & b.lock_keys(shard)]


def check_consistence(res: RunResult, batches: dict) -> list[str]:
    """Conflicting batches appear in the same relative order in every honest
    ledger of every shard where they contend for keys.

    At a common shard where the two batches touch disjoint keys their
    fragments commute and block order follows proposal arrival, which the
    protocol leaves free; order is only promised where a lock enforces it.
    Across contended shards the promise is causal: the loser of the first
    contended shard cannot even reach a later one until the winner's first
    rotation has finished there."""
    problems = []
    orders: dict[tuple, dict[bytes, int]] = {}
    for rid, rep in _honest(res).items():
        orders[(rid.shard, rid.index)] = {
            block.batch_digest: pos
            for pos, block in enumerate(rep.ledger.blocks)
            if pos > 0
        }
    digests = sorted({d for o in orders.values() for d in o},
                     key=lambda d: d.hex())
    for i, d1 in enumerate(digests):
        b1 = batches.get(d1)
        if b1 is None:
            continue
        for d2 in digests[i + 1:]:
            b2 = batches.get(d2)
            if b2 is None:
                continue
            contended = _contended_shards(b1, b2)
            if not contended:
                continue
            sign = None
            for where, order in sorted(orders.items()):
                if where[0] not in contended:
                    continue
                if d1 in order and d2 in order:
                    here = 1 if order[d1] < order[d2] else -1
                    if sign is None:
                        sign = here
                    elif sign != here:
                        problems.append(
                            f"conflicting {d1.hex()[:12]} / {d2.hex()[:12]}"
                            f" ordered differently at {where}"
                        )
                        break
    return problems


def check_locks_drained(res: RunResult) -> list[str]:
    if not res.all_acked():
        return []
    return [f"{rid}: locks still held {sorted(rep.locks)[:4]}"
            for rid, rep in _honest(res).items() if rep.locks]


def check_linear_comm(res: RunResult, batches: dict) -> list[str]:
    """Fault-free runs: each ring hop of each rotation carries exactly one
    message per replica, so a batch over i shards costs 2*i*n cross-shard
    sends. Requires the simulator's track_cross flag."""
    problems = []
    n = res.config.replicas
    for digest in sorted(_acked_digests(res)):
        batch = batches.get(digest)
        if batch is None or len(batch.involved) < 2:
            continue
        order = core.ring_order(res.config, batch.involved)
        hops = [(order[i], order[(i + 1) % len(order)])
                for i in range(len(order))]
        total = 0
        for kind in ("forward", "execute"):
            for src, dst in hops:
                got = res.cross_counts.get((digest, kind, src, dst), 0)
                total += got
                if got != n:
                    problems.append(
                        f"{digest.hex()[:12]} {kind} hop {src}->{dst}:"
                        f" {got} sends, expected {n}"
                    )
        stray = sum(v for (d, _, _, _), v in res.cross_counts.items()
                    if d == digest) - total
        if stray:
            problems.append(
                f"{digest.hex()[:12]}: {stray} cross-shard sends off-ring"
            )
    return problems


def check_rotation_bound(res: RunResult, batches: dict) -> list[str]:
    """Fault-free runs: per shard, one consensus pass and one execution per
    batch; a multi-shard batch crosses each hop at most twice (two
    rotations). Needs a full trace."""
    problems = []
    commits: dict[tuple, int] = defaultdict(int)
    execs: dict[tuple, int] = defaultdict(int)
    for line in res.trace_lines:
        ev = json.loads(line)
        if ev["ev"] == "note_committed":
            commits[(ev["node"], ev["d"])] += 1
        elif ev["ev"] == "note_executed":
            execs[(ev["node"], ev["d"])] += 1
    for (node, digest), count in sorted(commits.items()):
        if count > 1:
            problems.append(f"{node} committed {digest[:12]} {count} times")
    for (node, digest), count in sorted(execs.items()):
        if count != 1:
            problems.append(f"{node} executed {digest[:12]} {count} times")
    for digest in sorted(_acked_digests(res)):
        batch = batches.get(digest)
        if batch is None or len(batch.involved) < 2:
            continue
        per_hop = [v for (d, _, _, _), v in res.cross_counts.items()
                   if d == digest]
        if any(v > res.config.replicas for v in per_hop):
            problems.append(
                f"{digest.hex()[:12]}: a hop exceeded one send per replica"
            )
    return problems


def check_store_agreement(res: RunResult) -> list[str]:
    """Replicas of one shard that executed the same sequence prefix hold the
    same store."""
    problems = []
    for shard in range(1, res.config.shards + 1):
        groups: dict[tuple, dict] = {}
        for rid, rep in _honest(res).items():
            if rid.shard != shard:
                continue
            fp = tuple(sorted(rep.exec_history.items()))
            prev = groups.setdefault(fp, {"rid": rid, "store": rep.store})
            if prev["store"] != rep.store:
                problems.append(
                    f"{rid} store differs from {prev['rid']}"
                    f" despite equal history"
                )
    return problems


def run_all(res: RunResult, batches: dict | None = None) -> list[str]:
    """Safety bundle: agreement, chains, consistence, drained locks, raised
    violations. Pass the batch registry to enable the ledger checks."""
    problems = []
    problems += check_violation_notes(res)
    problems += check_agreement(res)
    problems += check_chains(res)
    problems += check_store_agreement(res)
    problems += check_locks_drained(res)
    if batches is not None:
        problems += check_ledger_presence(res, batches)
        problems += check_consistence(res, batches)
    return problems


def batch_registry(batches_by_client: dict) -> dict:
    return {b.digest: b for bl in batches_by_client.values() for b in bl}
