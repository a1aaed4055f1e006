"""Workload generation and run metrics.

Generates signed write-only batches over a partitioned keyspace with zipfian
key popularity, shaped by the knobs the scenario files expose: total
transactions, batch size, client count, the fraction of batches that span
multiple shards, how many consecutive shards those span, and how many writes
carry a value dependency on the preceding shard's write.

Batches are uniform in their involved-shard set (a protocol requirement), so
the cross-shard fraction is applied per batch: a batch is either entirely
single-shard or entirely multi-shard.

Also home to RunMetrics, the flat record one simulation run reduces to, and
the versioned delimited-output schema the reporting tools consume.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import core, crypto
from .simnet import RunResult, Sim


@dataclass(frozen=True)
class WorkloadSpec:
    txns: int = 400
    batch_size: int = 10
    clients: int = 4
    cross_fraction: float = 0.0
    involved_count: int = 2
    records_per_shard: int = 4_096
    zipf_s: float = 0.9
    deps_per_txn: int = 0
    start_stagger_us: int = 500
    hot_keys: int = 0  # >0: confine writes to this many keys per shard

    def __post_init__(self):
        if self.txns < 1 or self.batch_size < 1 or self.clients < 1:
            raise ValueError("txns, batch_size, clients must be positive")
        if not 0.0 <= self.cross_fraction <= 1.0:
            raise ValueError("cross_fraction outside [0, 1]")
        if self.involved_count < 2:
            raise ValueError("involved_count must be at least 2")
        if self.records_per_shard < 1:
            raise ValueError("records_per_shard must be positive")


class _Zipf:
    """Zipfian sampler over ranks 0..n-1 with exponent s."""

    def __init__(self, n: int, s: float, rng: np.random.Generator):
        weights = 1.0 / np.power(np.arange(1, n + 1, dtype=np.float64), s)
        self._cum = np.cumsum(weights / weights.sum())
        self._rng = rng

    def draw(self) -> int:
        return int(np.searchsorted(self._cum, self._rng.random(),
                                   side="right"))


def generate(config: core.SystemConfig, ks: crypto.KeyStore,
             spec: WorkloadSpec, seed: int,
             first_shard: int | None = None) -> dict[int, list[core.Batch]]:
    """Signed batches per client id. With `first_shard` set, every
    multi-shard batch starts its ring walk at that shard (conflict-heavy
    workloads want a shared head-of-line)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    z = config.shards
    involved_count = min(spec.involved_count, z)
    pool = spec.hot_keys if spec.hot_keys > 0 else spec.records_per_shard
    zipf = _Zipf(pool, spec.zipf_s, rng)

    def key_for(shard: int) -> str:
        return f"r{shard}_{zipf.draw()}"

    counters = {cid: 0 for cid in range(spec.clients)}
    out: dict[int, list[core.Batch]] = {cid: [] for cid in range(spec.clients)}
    n_batches = math.ceil(spec.txns / spec.batch_size)
    produced = 0
    for bi in range(n_batches):
        cid = bi % spec.clients
        size = min(spec.batch_size, spec.txns - produced)
        produced += size
        cross = z > 1 and rng.random() < spec.cross_fraction
        if cross:
            start = (first_shard if first_shard is not None
                     else int(rng.integers(1, z + 1)))
            involved = tuple(sorted((start - 1 + i) % z + 1
                                    for i in range(involved_count)))
        else:
            involved = (int(rng.integers(1, z + 1)),)
        order = core.ring_order(config, involved)
        txns = []
        for _ in range(size):
            writes = []
            for pos, shard in enumerate(order):
                dep_pos = pos > 0 and pos <= spec.deps_per_txn
                writes.append(core.WriteOp(
                    shard=shard,
                    key=key_for(shard),
                    value=f"v{bi}_{counters[cid]}",
                    dep_shard=order[pos - 1] if dep_pos else 0,
                    dep_key=writes[pos - 1].key if dep_pos else "",
                ))
            txn = core.Transaction(
                client=cid,
                counter=counters[cid],
                involved=involved,
                writes=tuple(writes),
            )
            counters[cid] += 1
            txns.append(crypto.sign_txn(ks, txn))
        out[cid].append(core.Batch(tuple(txns)))
    return out


def submit_all(sim: Sim, batches: dict[int, list[core.Batch]],
               stagger_us: int = 500) -> None:
    # Clients with no batches still get their start event, which marks them
    # done immediately; otherwise completion would hang on them.
    for cid in sorted(batches):
        sim.submit(cid, batches[cid], start_us=cid * stagger_us)


# --- metrics -------------------------------------------------------------------

SCHEMA_VERSION = 1

CSV_COLUMNS = (
    "schema_version", "scenario", "seed", "shards", "replicas_per_shard",
    "faults", "clients", "batch_size", "cross_pct", "involved_shards",
    "deps_per_txn", "drop_pct", "txns_submitted", "txns_acked",
    "batches_acked", "duration_s", "throughput_tps", "latency_avg_ms",
    "latency_p50_ms", "latency_p99_ms", "messages_total", "messages_per_txn",
    "retransmissions", "view_changes", "checkpoints_stable", "completed",
)


@dataclass
class RunMetrics:
    scenario: str
    seed: int
    shards: int
    replicas_per_shard: int
    faults: int
    clients: int
    batch_size: int
    cross_pct: float
    involved_shards: int
    deps_per_txn: int
    drop_pct: float
    txns_submitted: int
    txns_acked: int
    batches_acked: int
    duration_s: float
    throughput_tps: float
    latency_avg_ms: float
    latency_p50_ms: float
    latency_p99_ms: float
    messages_total: int
    messages_per_txn: float
    retransmissions: int
    view_changes: int
    checkpoints_stable: int
    completed: bool

    def row(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION}
        d.update(self.__dict__)
        for key in ("duration_s", "throughput_tps", "latency_avg_ms",
                    "latency_p50_ms", "latency_p99_ms", "messages_per_txn"):
            d[key] = round(d[key], 4)
        d["cross_pct"] = round(d["cross_pct"], 2)
        d["drop_pct"] = round(d["drop_pct"], 2)
        d["completed"] = int(self.completed)
        return d


def _percentile(sorted_us: list[int], p: float) -> float:
    if not sorted_us:
        return 0.0
    i = min(len(sorted_us) - 1, max(0, math.ceil(p * len(sorted_us)) - 1))
    return sorted_us[i] / 1000.0


def collect(res: RunResult, sim: Sim, spec: WorkloadSpec, scenario: str,
            drop_p: float = 0.0) -> RunMetrics:
    acks = [a for c in res.clients.values() for a in c.acks]
    txns_acked = sum(a[3] for a in acks)
    if acks:
        t0 = min(a[1] for a in acks)
        t1 = max(a[2] for a in acks)
        duration_s = max((t1 - t0), 1) / 1e6
    else:
        duration_s = max(res.end_us, 1) / 1e6
    lat = sorted(sim.latencies_us)
    total_msgs = sum(v for k, v in res.counters.items()
                     if k.startswith("send_"))
    return RunMetrics(
        scenario=scenario,
        seed=res.seed,
        shards=res.config.shards,
        replicas_per_shard=res.config.replicas,
        faults=res.config.faults,
        clients=spec.clients,
        batch_size=spec.batch_size,
        cross_pct=spec.cross_fraction * 100.0,
        involved_shards=spec.involved_count,
        deps_per_txn=spec.deps_per_txn,
        drop_pct=drop_p * 100.0,
        txns_submitted=spec.txns,
        txns_acked=txns_acked,
        batches_acked=len(acks),
        duration_s=duration_s,
        throughput_tps=txns_acked / duration_s if duration_s > 0 else 0.0,
        latency_avg_ms=(sum(lat) / len(lat) / 1000.0) if lat else 0.0,
        latency_p50_ms=_percentile(lat, 0.50),
        latency_p99_ms=_percentile(lat, 0.99),
        messages_total=total_msgs,
        messages_per_txn=total_msgs / txns_acked if txns_acked else 0.0,
        retransmissions=res.counters.get("retransmissions", 0),
        view_changes=res.counters.get("note_newview", 0),
        checkpoints_stable=res.counters.get("note_checkpoint_stable", 0),
        completed=res.all_acked(),
    )


def write_csv(path: str, rows: list[dict], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if not append:
            writer.writeheader()
        for row in rows:
            writer.writerow({col: row.get(col, "") for col in CSV_COLUMNS})


def read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def ack_timeline(res: RunResult, bucket_ms: int = 500) -> list[dict]:
    """Throughput over time: acked transactions bucketed by ack time. The
    primary-failure scenario renders this to show the dip and recovery."""
    acks = sorted(
        (a[2], a[3]) for c in res.clients.values() for a in c.acks
    )
    if not acks:
        return []
    bucket_us = bucket_ms * 1000
    end = acks[-1][0]
    rows = []
    for start in range(0, end + bucket_us, bucket_us):
        txns = sum(n for t, n in acks if start <= t < start + bucket_us)
        rows.append({
            "t_s": round(start / 1e6, 3),
            "txns": txns,
            "throughput_tps": round(txns / (bucket_us / 1e6), 2),
        })
    return rows
