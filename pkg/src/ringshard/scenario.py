"""Scenario files: declarative run descriptions for the CLI.

Format: one `key = value` pair per line, `#` comments, blank lines ignored.
`include = other.scn` pulls in another file (relative to the including one)
before applying the current file's settings, so shared baselines stay in one
place. `fault = ...` and `partition = ...` lines accumulate instead of
overriding. `sweep <key> = v1,v2,...` turns one scenario into the cartesian
product over the swept keys, in declaration order.

    name = smoke
    shards = 3
    txns = 200
    cross_pct = 10
    fault = silent shard=1 index=0 at_ms=2000
    partition = start_ms=0 end_ms=350 src_shard=1 dst_shard=2 kinds=forward
    sweep batch_size = 10,50,100

Values: integers, decimals, strings, `lo,hi` pairs for latency ranges, and
`a..b` integer spans inside sweeps. Errors carry file and line number.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

from . import core, simnet, workload
from .replica import CostModel


class ParseError(Exception):
    def __init__(self, path: str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


@dataclass(frozen=True)
class FaultSpec:
    kind: str
    shard: int
    index: int
    at_ms: int = 0
    until_ms: int | None = None
    dark: tuple[int, ...] = ()
    drops: int = 2

    def behavior(self) -> simnet.Behavior:
        if self.kind == "crash":
            return simnet.Crash(at_us=self.at_ms * 1000)
        if self.kind == "silent":
            until = None if self.until_ms is None else self.until_ms * 1000
            return simnet.Silent(at_us=self.at_ms * 1000, until_us=until)
        if self.kind == "keep_dark":
            return simnet.KeepDark(self.dark)
        if self.kind == "equivocate":
            return simnet.Equivocate()
        if self.kind == "eat_cross":
            return simnet.EatCrossShard(max_drops=self.drops)
        raise ValueError(f"unknown fault kind {self.kind!r}")


@dataclass(frozen=True)
class PartitionSpec:
    start_ms: int
    end_ms: int
    src_shards: tuple[int, ...] = ()
    dst_shards: tuple[int, ...] = ()
    src_indices: tuple[int, ...] = ()
    dst_indices: tuple[int, ...] = ()
    kinds: tuple[str, ...] = ()

    def window(self) -> simnet.PartitionWindow:
        opt = lambda t: frozenset(t) if t else None
        return simnet.PartitionWindow(
            start_us=self.start_ms * 1000,
            end_us=self.end_ms * 1000,
            src_shards=opt(self.src_shards),
            dst_shards=opt(self.dst_shards),
            src_indices=opt(self.src_indices),
            dst_indices=opt(self.dst_indices),
            kinds=opt(self.kinds),
        )


@dataclass(frozen=True)
class Scenario:
    name: str = "unnamed"
    shards: int = 3
    replicas: int = 4
    faults: int = 1
    checkpoint_period: int = 100
    ring: str = "ascending"

    txns: int = 200
    batch_size: int = 10
    clients: int = 4
    cross_pct: float = 0.0
    involved: int = 2
    deps: int = 0
    records: int = 4096
    zipf: float = 0.9
    hot_keys: int = 0
    first_shard: int = 0  # 0 means random per batch

    seed: int = 1
    scheme: str = "hash"
    trace: str = "counts"
    track_cross: bool = False
    deadline_s: int = 120
    timeline: bool = False
    bucket_ms: int = 500

    intra_ms: tuple[float, float] = (1.0, 5.0)
    cross_ms: tuple[float, float] = (30.0, 80.0)
    drop_pct: float = 0.0

    local_ms: float = 50.0
    remote_ms: float = 150.0
    transmit_ms: float = 400.0
    client_ms: float = 2000.0
    viewchange_ms: float = 100.0

    per_message_us: int = 30
    per_txn_validate_us: int = 10
    per_txn_execute_us: int = 25

    fault_specs: tuple[FaultSpec, ...] = ()
    partitions: tuple[PartitionSpec, ...] = ()
    sweeps: tuple[tuple[str, tuple], ...] = ()


_INT_KEYS = {
    "shards", "replicas", "faults", "checkpoint_period", "txns",
    "batch_size", "clients", "involved", "deps", "records", "hot_keys",
    "first_shard", "seed", "deadline_s", "bucket_ms", "per_message_us",
    "per_txn_validate_us", "per_txn_execute_us",
}
_FLOAT_KEYS = {
    "cross_pct", "zipf", "drop_pct", "local_ms", "remote_ms", "transmit_ms",
    "client_ms", "viewchange_ms",
}
_PAIR_KEYS = {"intra_ms", "cross_ms"}
_STR_KEYS = {"name", "scheme", "trace", "ring"}
_BOOL_KEYS = {"timeline", "track_cross"}


def _parse_value(path, line_no, key, raw):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _PAIR_KEYS:
            lo, hi = raw.split(",")
            return (float(lo), float(hi))
        if key in _BOOL_KEYS:
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if key in _STR_KEYS:
            return raw
    except ParseError:
        raise
    except ValueError as exc:
        raise ParseError(path, line_no, f"bad value for {key}: {exc}")
    raise ParseError(path, line_no, f"unknown key {key!r}")


def _parse_kvlist(path, line_no, raw) -> dict[str, str]:
    out = {}
    for part in raw.split():
        if "=" not in part:
            raise ParseError(path, line_no, f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k] = v
    return out


def _int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(x) for x in raw.split(",") if x != "")


def _parse_fault(path, line_no, raw) -> FaultSpec:
    parts = raw.split(None, 1)
    if not parts:
        raise ParseError(path, line_no, "empty fault line")
    kind = parts[0]
    kv = _parse_kvlist(path, line_no, parts[1] if len(parts) > 1 else "")
    try:
        until = kv.pop("until_ms", None)
        spec = FaultSpec(
            kind=kind,
            shard=int(kv.pop("shard")),
            index=int(kv.pop("index")),
            at_ms=int(kv.pop("at_ms", 0)),
            until_ms=int(until) if until is not None else None,
            dark=_int_tuple(kv.pop("dark", "")),
            drops=int(kv.pop("drops", 2)),
        )
    except KeyError as exc:
        raise ParseError(path, line_no, f"fault missing {exc.args[0]}")
    except ValueError as exc:
        raise ParseError(path, line_no, f"bad fault value: {exc}")
    if kv:
        raise ParseError(path, line_no, f"unknown fault keys {sorted(kv)}")
    if spec.kind not in ("crash", "silent", "keep_dark", "equivocate",
                         "eat_cross"):
        raise ParseError(path, line_no, f"unknown fault kind {kind!r}")
    return spec


def _parse_partition(path, line_no, raw) -> PartitionSpec:
    kv = _parse_kvlist(path, line_no, raw)
    try:
        spec = PartitionSpec(
            start_ms=int(kv.pop("start_ms")),
            end_ms=int(kv.pop("end_ms")),
            src_shards=_int_tuple(kv.pop("src_shard", "")),
            dst_shards=_int_tuple(kv.pop("dst_shard", "")),
            src_indices=_int_tuple(kv.pop("src_index", "")),
            dst_indices=_int_tuple(kv.pop("dst_index", "")),
            kinds=tuple(k for k in kv.pop("kinds", "").split(",") if k),
        )
    except KeyError as exc:
        raise ParseError(path, line_no, f"partition missing {exc.args[0]}")
    except ValueError as exc:
        raise ParseError(path, line_no, f"bad partition value: {exc}")
    if kv:
        raise ParseError(path, line_no, f"unknown partition keys {sorted(kv)}")
    return spec


def _sweep_values(path, line_no, key, raw) -> tuple:
    vals = []
    for piece in raw.split(","):
        piece = piece.strip()
        if ".." in piece:
            lo, hi = piece.split("..", 1)
            try:
                vals.extend(range(int(lo), int(hi) + 1))
            except ValueError:
                raise ParseError(path, line_no, f"bad span {piece!r}")
        elif piece:
            vals.append(_parse_value(path, line_no, key, piece))
    if not vals:
        raise ParseError(path, line_no, f"empty sweep for {key}")
    return tuple(vals)


def parse_scenario(path: str, _depth: int = 0) -> Scenario:
    if _depth > 4:
        raise ParseError(path, 0, "include nesting too deep")
    sc = Scenario()
    overrides: dict = {}
    faults: list[FaultSpec] = []
    partitions: list[PartitionSpec] = []
    sweeps: list[tuple[str, tuple]] = []
    with open(path) as fh:
        for line_no, raw_line in enumerate(fh, 1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(path, line_no, f"expected key = value")
            key, _, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key == "include":
                base = os.path.dirname(os.path.abspath(path))
                inc = parse_scenario(os.path.join(base, raw), _depth + 1)
                merged = {**inc.__dict__}
                merged.pop("fault_specs")
                merged.pop("partitions")
                merged.pop("sweeps")
                overrides = {**merged, **overrides}
                faults = list(inc.fault_specs) + faults
                partitions = list(inc.partitions) + partitions
                sweeps = list(inc.sweeps) + sweeps
            elif key == "fault":
                faults.append(_parse_fault(path, line_no, raw))
            elif key == "partition":
                partitions.append(_parse_partition(path, line_no, raw))
            elif key.startswith("sweep "):
                skey = key[len("sweep "):].strip()
                if skey not in (_INT_KEYS | _FLOAT_KEYS | _STR_KEYS):
                    raise ParseError(path, line_no, f"cannot sweep {skey!r}")
                sweeps.append((skey, _sweep_values(path, line_no, skey, raw)))
            else:
                overrides[key] = _parse_value(path, line_no, key, raw)
    try:
        sc = replace(sc, **overrides, fault_specs=tuple(faults),
                     partitions=tuple(partitions), sweeps=tuple(sweeps))
    except TypeError as exc:
        raise ParseError(path, 0, str(exc))
    return sc


def expand(sc: Scenario) -> list[Scenario]:
    """Cartesian product over sweep axes; no sweeps means the scenario
    itself. Combo names append the varied settings."""
    combos: list[Scenario] = [replace(sc, sweeps=())]
    for key, values in sc.sweeps:
        next_combos = []
        for combo in combos:
            for value in values:
                name = f"{combo.name}[{key}={value}]"
                next_combos.append(replace(combo, **{key: value}, name=name))
        combos = next_combos
    return combos


def build(sc: Scenario):
    """Instantiate simulator and workload for one (non-swept) scenario."""
    policy = None
    if sc.ring == "descending":
        policy = core.RingPolicy("descending",
                                 tuple(range(sc.shards, 0, -1)))
    elif sc.ring != "ascending":
        raise ValueError(f"unknown ring policy {sc.ring!r}")
    faults = sc.faults if sc.faults > 0 else (sc.replicas - 1) // 3
    config = core.SystemConfig(
        shards=sc.shards, replicas=sc.replicas, faults=faults,
        ring_policy=policy, checkpoint_period=sc.checkpoint_period,
    )
    timers = core.TimerConfig(
        local_us=int(sc.local_ms * 1000),
        remote_us=int(sc.remote_ms * 1000),
        transmit_us=int(sc.transmit_ms * 1000),
        client_us=int(sc.client_ms * 1000),
        viewchange_us=int(sc.viewchange_ms * 1000),
    )
    net = simnet.NetworkProfile(
        intra_min_us=int(sc.intra_ms[0] * 1000),
        intra_max_us=int(sc.intra_ms[1] * 1000),
        cross_min_us=int(sc.cross_ms[0] * 1000),
        cross_max_us=int(sc.cross_ms[1] * 1000),
        drop_p=sc.drop_pct / 100.0,
        partitions=tuple(p.window() for p in sc.partitions),
    )
    cost = CostModel(
        per_message_us=sc.per_message_us,
        per_txn_validate_us=sc.per_txn_validate_us,
        per_txn_execute_us=sc.per_txn_execute_us,
    )
    behaviors = {
        core.ReplicaId(f.shard, f.index): f.behavior()
        for f in sc.fault_specs
    }
    sim = simnet.Sim(
        config, clients=sc.clients, seed=sc.seed, net=net, timers=timers,
        cost=cost, behaviors=behaviors, scheme=sc.scheme,
        trace_level=sc.trace, track_cross=sc.track_cross,
    )
    spec = workload.WorkloadSpec(
        txns=sc.txns,
        batch_size=sc.batch_size,
        clients=sc.clients,
        cross_fraction=sc.cross_pct / 100.0,
        involved_count=min(max(sc.involved, 2), max(sc.shards, 2)),
        records_per_shard=sc.records,
        zipf_s=sc.zipf,
        deps_per_txn=sc.deps,
        hot_keys=sc.hot_keys,
    )
    batches = workload.generate(
        config, sim.ks, spec, seed=sc.seed,
        first_shard=sc.first_shard if sc.first_shard > 0 else None,
    )
    return sim, spec, batches


def run_one(sc: Scenario):
    """Run a single scenario to completion; returns (result, sim, spec,
    batch registry, metrics)."""
    sim, spec, batches = build(sc)
    workload.submit_all(sim, batches, stagger_us=spec.start_stagger_us)
    res = sim.run(deadline_us=sc.deadline_s * 1_000_000)
    registry = {b.digest: b for bl in batches.values() for b in bl}
    metrics = workload.collect(res, sim, spec, sc.name,
                               drop_p=sc.drop_pct / 100.0)
    return res, sim, spec, registry, metrics
