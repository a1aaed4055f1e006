"""Deterministic discrete-event network simulator with fault injection.

One `Sim` owns virtual time, transport, timers, clients, and every replica.
All randomness flows from a single seeded generator consumed in event order,
so a run is a pure function of (configuration, workload, seed): same inputs,
same trace, byte for byte.

Replicas are serial servers. Each consumes virtual processing time per event
(see replica.CostModel); events arriving while a replica is busy wait for it.
That is what makes throughput saturate instead of scaling without bound.

Fault injection happens at the transport boundary. A Behavior wraps one
replica and may drop, replace, or duplicate its outbound messages (crash,
silence windows, keeping chosen peers dark, equivocating proposals, eating
cross-shard sends). The network itself can drop uniformly at random and can
carry partition windows that block matching traffic for a time span. Faulty
replica counts are capped at f per shard so runs stay within the model the
protocol tolerates.
"""

from __future__ import annotations

import heapq
import json
import random
from collections import Counter
from dataclasses import dataclass, field

from . import codec, core, crypto
from .core import ReplicaId
from .replica import CostModel, ProtocolViolation, Replica


@dataclass(frozen=True)
class PartitionWindow:
    """Blocks messages sent during [start_us, end_us) that match the given
    endpoint filters. A None filter matches everything."""

    start_us: int
    end_us: int
    src_shards: frozenset[int] | None = None
    dst_shards: frozenset[int] | None = None
    src_indices: frozenset[int] | None = None
    dst_indices: frozenset[int] | None = None
    kinds: frozenset[str] | None = None

    def blocks(self, now_us: int, src, dst, kind: str) -> bool:
        if not self.start_us <= now_us < self.end_us:
            return False
        if self.kinds is not None and kind not in self.kinds:
            return False
        if isinstance(src, ReplicaId):
            if self.src_shards is not None and src.shard not in self.src_shards:
                return False
            if self.src_indices is not None and src.index not in self.src_indices:
                return False
        elif self.src_shards is not None or self.src_indices is not None:
            return False
        if isinstance(dst, ReplicaId):
            if self.dst_shards is not None and dst.shard not in self.dst_shards:
                return False
            if self.dst_indices is not None and dst.index not in self.dst_indices:
                return False
        elif self.dst_shards is not None or self.dst_indices is not None:
            return False
        return True


@dataclass(frozen=True)
class NetworkProfile:
    """Link latency ranges (uniform), loss rate, and partition schedule.
    Client links use the cross-shard range."""

    intra_min_us: int = 1_000
    intra_max_us: int = 5_000
    cross_min_us: int = 30_000
    cross_max_us: int = 80_000
    drop_p: float = 0.0
    partitions: tuple[PartitionWindow, ...] = ()

    def latency_us(self, rng: random.Random, src, dst) -> int:
        intra = (isinstance(src, ReplicaId) and isinstance(dst, ReplicaId)
                 and src.shard == dst.shard)
        lo, hi = ((self.intra_min_us, self.intra_max_us) if intra
                  else (self.cross_min_us, self.cross_max_us))
        return rng.randint(lo, hi)


class Behavior:
    """Honest transport behavior; subclasses inject faults. `outbound` maps
    one send to the sends that actually reach the wire."""

    name = "honest"

    def halted(self, now_us: int) -> bool:
        return False

    def outbound(self, sim: "Sim", src: ReplicaId, msg, dst, retx: bool,
                 now_us: int):
        return [(msg, dst)]


class Crash(Behavior):
    """Halts completely at a point in time: no sends, no processing."""

    name = "crash"

    def __init__(self, at_us: int = 0):
        self.at_us = at_us

    def halted(self, now_us: int) -> bool:
        return now_us >= self.at_us

    def outbound(self, sim, src, msg, dst, retx, now_us):
        return [] if now_us >= self.at_us else [(msg, dst)]


class Silent(Behavior):
    """Stops sending during a window but keeps receiving and processing; the
    classic unresponsive-primary fault."""

    name = "silent"

    def __init__(self, at_us: int, until_us: int | None = None):
        self.at_us = at_us
        self.until_us = until_us

    def outbound(self, sim, src, msg, dst, retx, now_us):
        if now_us >= self.at_us and (self.until_us is None
                                     or now_us < self.until_us):
            return []
        return [(msg, dst)]


class KeepDark(Behavior):
    """Never sends to chosen same-shard peers. Run on a primary this keeps up
    to f replicas permanently behind, forcing checkpoint catch-up."""

    name = "keep_dark"

    def __init__(self, dark_indices):
        self.dark = frozenset(dark_indices)

    def outbound(self, sim, src, msg, dst, retx, now_us):
        if (isinstance(dst, ReplicaId) and dst.shard == src.shard
                and dst.index in self.dark):
            return []
        return [(msg, dst)]


class Equivocate(Behavior):
    """Sends conflicting proposals for the same slot: once two distinct
    batches have been proposed, later proposals go out with the previous
    batch substituted for odd-indexed peers."""

    name = "equivocate"

    def __init__(self):
        self.prev_batch = None

    def outbound(self, sim, src, msg, dst, retx, now_us):
        if msg.kind != "preprepare" or msg.batch is None:
            return [(msg, dst)]
        alt = self.prev_batch
        if alt is None or alt.digest == msg.digest:
            self.prev_batch = msg.batch
            return [(msg, dst)]
        if isinstance(dst, ReplicaId) and dst.index % 2 == 1:
            forged = core.Preprepare(msg.sender, msg.view, msg.k, alt,
                                     alt.digest)
            forged = crypto.authenticate(sim.ks, forged, src, dst)
            return [(forged, dst)]
        return [(msg, dst)]


class EatCrossShard(Behavior):
    """Swallows the first `max_drops` outbound cross-shard transfers, forcing
    the transmit-timer retransmission path."""

    name = "eat_cross_shard"

    def __init__(self, max_drops: int = 2):
        self.max_drops = max_drops
        self.dropped = 0

    def outbound(self, sim, src, msg, dst, retx, now_us):
        if (msg.kind in ("forward", "execute")
                and isinstance(dst, ReplicaId) and dst.shard != src.shard
                and self.dropped < self.max_drops):
            self.dropped += 1
            return []
        return [(msg, dst)]


BEHAVIORS = {
    c.name: c for c in (Behavior, Crash, Silent, KeepDark, Equivocate,
                        EatCrossShard)
}


@dataclass
class ClientState:
    cid: int
    queue: list = field(default_factory=list)
    next_i: int = 0
    sent_at_us: int = -1
    first_sent_us: int = -1
    responses: dict = field(default_factory=dict)  # digest -> {index: Response}
    acks: list = field(default_factory=list)  # (digest, sent_us, acked_us, txns)
    believed: dict = field(default_factory=dict)  # shard -> primary index
    retries: int = 0
    done: bool = False

    def current(self):
        if self.next_i < len(self.queue):
            return self.queue[self.next_i]
        return None


@dataclass
class RunResult:
    config: core.SystemConfig
    seed: int
    replicas: dict
    clients: dict
    counters: Counter
    violations: list
    trace_lines: list
    end_us: int
    quiescent: bool
    faulty: frozenset = frozenset()
    cross_counts: Counter = field(default_factory=Counter)

    def all_acked(self) -> bool:
        return all(c.done for c in self.clients.values())

    def trace_bytes(self) -> bytes:
        return b"".join(line.encode() + b"\n" for line in self.trace_lines)


class Sim:
    def __init__(self, config: core.SystemConfig, *, clients: int, seed: int,
                 net: NetworkProfile | None = None,
                 timers: core.TimerConfig | None = None,
                 cost: CostModel | None = None,
                 behaviors: dict | None = None,
                 scheme: str = "hash",
                 trace_level: str = "counts",
                 track_cross: bool = False):
        if trace_level not in ("counts", "full"):
            raise ValueError(f"unknown trace level {trace_level!r}")
        self.config = config
        self.seed = seed
        self.rng = random.Random(seed)
        self.net = net or NetworkProfile()
        self.timers = timers or core.TimerConfig()
        self.cost = cost or CostModel()
        self.ks = crypto.KeyStore(config, clients=clients, scheme=scheme)
        self.trace_level = trace_level
        self.track_cross = track_cross

        self.behaviors: dict[ReplicaId, Behavior] = dict(behaviors or {})
        per_shard = Counter()
        for rid, b in self.behaviors.items():
            if b.name != "honest":
                per_shard[rid.shard] += 1
        for shard, count in per_shard.items():
            if count > config.faults:
                raise ValueError(
                    f"shard {shard}: {count} faulty replicas exceeds f={config.faults}"
                )

        self.replicas: dict[ReplicaId, Replica] = {}
        for s in range(1, config.shards + 1):
            for rid in config.all_replicas(s):
                self.replicas[rid] = Replica(config, rid, self.ks,
                                             self.timers, self.cost)
        self.clients: dict[int, ClientState] = {
            cid: ClientState(cid) for cid in range(clients)
        }

        self.now_us = 0
        self._heap: list = []
        self._seq = 0
        self._done_count = 0
        self._busy: dict[ReplicaId, int] = {rid: 0 for rid in self.replicas}
        self._timer_gen: dict = {}
        self.counters: Counter = Counter()
        self.violations: list = []
        self.trace_lines: list[str] = []
        self.cross_counts: Counter = Counter()
        self.latencies_us: list[int] = []

    # --- event plumbing -----------------------------------------------------

    def _push(self, at_us: int, item: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (at_us, self._seq, item))

    def _trace(self, ev: str, node: str, **fields) -> None:
        self.counters[ev] += 1
        if self.trace_level != "full":
            return
        line = {"ts": self.now_us, "ev": ev, "node": node}
        line.update(fields)
        self.trace_lines.append(json.dumps(line, separators=(",", ":")))

    def _node_name(self, ident) -> str:
        return str(ident) if isinstance(ident, ReplicaId) else f"c{ident}"

    # --- transport ------------------------------------------------------------

    def _dispatch_send(self, src, msg, dst, retx: bool) -> None:
        kind = msg.kind
        self._trace("send", self._node_name(src), kind=kind,
                    dst=self._node_name(dst), retx=int(retx),
                    size=codec.message_size(msg))
        self.counters[f"send_{kind}"] += 1
        if retx:
            self.counters["retransmissions"] += 1
        if (self.track_cross and not retx and isinstance(src, ReplicaId)
                and isinstance(dst, ReplicaId) and src.shard != dst.shard
                and kind in ("forward", "execute")):
            self.cross_counts[(msg.digest, kind, src.shard, dst.shard)] += 1
        for window in self.net.partitions:
            if window.blocks(self.now_us, src, dst, kind):
                self._trace("partitioned", self._node_name(src), kind=kind,
                            dst=self._node_name(dst))
                return
        if self.net.drop_p > 0 and self.rng.random() < self.net.drop_p:
            self._trace("dropped", self._node_name(src), kind=kind,
                        dst=self._node_name(dst))
            return
        delay = self.net.latency_us(self.rng, src, dst)
        if isinstance(dst, ReplicaId):
            self._push(self.now_us + delay, ("msg", dst, msg, src, retx))
        else:
            self._push(self.now_us + delay, ("cmsg", dst, msg, src))

    def _emit(self, src: ReplicaId, out) -> None:
        behavior = self.behaviors.get(src)
        for msg, dst, retx in out.sends:
            if behavior is None:
                self._dispatch_send(src, msg, dst, retx)
            else:
                for msg2, dst2 in behavior.outbound(self, src, msg, dst, retx,
                                                    self.now_us):
                    self._dispatch_send(src, msg2, dst2, retx)
        # Cancels first: a step that cancels a timer and re-arms it (the
        # execute rotation does this with the transmit timer) means the timer
        # must end up armed, whatever order the handler emitted them in.
        for kind, key in out.timer_cancels:
            self._timer_gen[(src, kind, key)] = (
                self._timer_gen.get((src, kind, key), 0) + 1
            )
        for kind, key, duration in out.timer_starts:
            gen = self._timer_gen.get((src, kind, key), 0) + 1
            self._timer_gen[(src, kind, key)] = gen
            self._push(self.now_us + duration, ("timer", src, kind, key, gen))
        for event, fields in out.notes:
            if event == "violation":
                self.violations.append((self.now_us, str(src), dict(fields)))
            hexed = {
                k: (v.hex() if isinstance(v, bytes) else v)
                for k, v in fields.items()
            }
            self._trace(f"note_{event}", str(src), **hexed)

    def _run_replica(self, rid: ReplicaId, at_us: int, item: tuple) -> None:
        behavior = self.behaviors.get(rid)
        if behavior is not None and behavior.halted(self.now_us):
            return
        busy = self._busy[rid]
        if busy > self.now_us:
            self._push(busy, item)
            return
        rep = self.replicas[rid]
        try:
            if item[0] == "msg":
                out = rep.on_message(item[2], item[3], self.now_us, item[4])
            else:
                out = rep.on_timer(item[2], item[3], self.now_us)
        except ProtocolViolation as exc:
            self.violations.append((self.now_us, str(rid),
                                    {"what": "exception", "detail": str(exc)}))
            self.behaviors[rid] = Crash(at_us=self.now_us)
            return
        self._busy[rid] = self.now_us + out.busy_us
        self._emit(rid, out)

    # --- client side ------------------------------------------------------------

    def submit(self, cid: int, batches, start_us: int = 0) -> None:
        """Queue signed batches for one client; it issues them one at a time,
        each after the previous acknowledgement (closed loop)."""
        client = self.clients[cid]
        client.queue.extend(batches)
        self._push(start_us, ("cstart", cid))

    def _mark_done(self, client: ClientState) -> None:
        if not client.done:
            client.done = True
            self._done_count += 1

    def _client_send(self, client: ClientState, broadcast: bool) -> None:
        batch = client.current()
        if batch is None:
            self._mark_done(client)
            return
        first = core.first_in_ring(self.config, batch.involved)
        req = crypto.authenticate(
            self.ks, core.ClientRequest(client.cid, batch), client.cid
        )
        client.sent_at_us = self.now_us
        if client.first_sent_us < 0:
            client.first_sent_us = self.now_us
        if broadcast:
            targets = self.config.all_replicas(first)
        else:
            index = client.believed.get(first, 0)
            targets = [ReplicaId(first, index)]
        for dst in targets:
            self._dispatch_send(client.cid, req, dst, retx=False)
        gen = self._timer_gen.get(("c", client.cid), 0) + 1
        self._timer_gen[("c", client.cid)] = gen
        self._push(self.now_us + self.timers.client_us,
                   ("ctimer", client.cid, gen, batch.digest))

    def _client_recv(self, client: ClientState, msg, src) -> None:
        if msg.kind != "response":
            return
        if not crypto.verify_auth(self.ks, msg, client.cid):
            return
        batch = client.current()
        if batch is None or msg.digest != batch.digest:
            return
        got = client.responses.setdefault(msg.digest, {})
        got[msg.sender.index] = msg
        first = core.first_in_ring(self.config, batch.involved)
        client.believed[first] = msg.view % self.config.replicas
        if len(got) < self.config.faults + 1:
            return
        self._trace("ack", self._node_name(client.cid),
                    d=msg.digest.hex(), txns=len(batch.txns))
        self.latencies_us.append(self.now_us - client.first_sent_us)
        client.acks.append((msg.digest, client.first_sent_us, self.now_us,
                            len(batch.txns)))
        client.responses.clear()
        client.next_i += 1
        client.sent_at_us = -1
        client.first_sent_us = -1
        self._timer_gen[("c", client.cid)] = (
            self._timer_gen.get(("c", client.cid), 0) + 1
        )
        if client.current() is None:
            self._mark_done(client)
        else:
            self._client_send(client, broadcast=False)

    def _client_timer(self, client: ClientState, gen: int, digest: bytes) -> None:
        if gen != self._timer_gen.get(("c", client.cid), 0):
            return
        batch = client.current()
        if batch is None or batch.digest != digest:
            return
        client.retries += 1
        self._trace("client_retry", self._node_name(client.cid),
                    d=digest.hex())
        self._client_send(client, broadcast=True)

    # --- main loop ------------------------------------------------------------

    def run(self, deadline_us: int = 120_000_000) -> RunResult:
        quiescent = True
        while self._heap:
            at_us, _, item = heapq.heappop(self._heap)
            if at_us > deadline_us:
                quiescent = False
                break
            self.now_us = at_us
            tag = item[0]
            if tag == "msg":
                self._run_replica(item[1], at_us, item)
            elif tag == "timer":
                rid, kind, key, gen = item[1], item[2], item[3], item[4]
                if gen != self._timer_gen.get((rid, kind, key), 0):
                    continue
                self._run_replica(rid, at_us, ("tmr", rid, kind, key))
            elif tag == "tmr":
                # A timer expiry that had to wait for a busy replica.
                self._run_replica(item[1], at_us, item)
            elif tag == "cmsg":
                self._client_recv(self.clients[item[1]], item[2], item[3])
            elif tag == "cstart":
                self._client_send(self.clients[item[1]], broadcast=False)
            elif tag == "ctimer":
                self._client_timer(self.clients[item[1]], item[2], item[3])
            if self.clients and self._done_count == len(self.clients):
                break
        return RunResult(
            config=self.config,
            seed=self.seed,
            replicas=self.replicas,
            clients=self.clients,
            counters=self.counters,
            violations=self.violations,
            trace_lines=self.trace_lines,
            end_us=self.now_us,
            quiescent=quiescent,
            faulty=frozenset(rid for rid, b in self.behaviors.items()
                             if b.name != "honest"),
            cross_counts=self.cross_counts,
        )
