"""Core value types for sharded ring-ordered BFT consensus.

This module defines the vocabulary shared by every other layer: shard and
replica identifiers, the system configuration (shard count, replicas per
shard, fault bound, ring policy), transactions and batches with per-shard
read/write sets, digests, and the protocol message types. Everything here is
an immutable value; behavior lives in the engine modules.

Shards are numbered 1..z. A ring policy assigns each shard a position on a
logical ring; cross-shard transactions visit their involved shards in ring
order, which is what makes lock acquisition globally ordered.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import ClassVar, Optional

DIGEST_SIZE = 16

# Digest of the empty input, used as a placeholder where no payload exists.
NULL_DIGEST = bytes(DIGEST_SIZE)


def digest_bytes(data: bytes) -> bytes:
    """Fixed-width content digest used for batch identity and chaining."""
    return hashlib.blake2b(data, digest_size=DIGEST_SIZE).digest()


@dataclass(frozen=True, order=True)
class ReplicaId:
    """A replica is addressed by its shard and its index within the shard."""

    shard: int
    index: int

    def __str__(self) -> str:
        return f"s{self.shard}/{self.index}"


class RingPolicy:
    """Maps shard ids to ring positions. The default is ascending by id.

    A policy is a permutation of 1..z; position(s) is the rank of shard s on
    the ring. Ring order of an involved set is the set sorted by position.
    """

    def __init__(self, name: str, permutation: tuple[int, ...]):
        z = len(permutation)
        if sorted(permutation) != list(range(1, z + 1)):
            raise ValueError(f"ring policy must be a permutation of 1..{z}")
        self.name = name
        self.permutation = permutation
        self._position = {s: i for i, s in enumerate(permutation)}

    @classmethod
    def ascending(cls, shards: int) -> "RingPolicy":
        return cls("ascending", tuple(range(1, shards + 1)))

    def position(self, shard: int) -> int:
        return self._position[shard]


@dataclass(frozen=True)
class SystemConfig:
    """Static system parameters.

    shards: number of shards z (ids 1..z)
    replicas: replicas per shard n
    faults: tolerated byzantine replicas per shard f, requires n >= 3f+1
    """

    shards: int
    replicas: int
    faults: int
    ring_policy: RingPolicy = field(compare=False, default=None)  # type: ignore[assignment]
    checkpoint_period: int = 100

    def __post_init__(self):
        if self.shards < 1:
            raise ValueError("need at least one shard")
        if self.faults < 0:
            raise ValueError("fault bound must be non-negative")
        if self.replicas < 3 * self.faults + 1:
            raise ValueError(
                f"n={self.replicas} violates n >= 3f+1 for f={self.faults}"
            )
        if self.checkpoint_period < 1:
            raise ValueError("checkpoint period must be positive")
        if self.ring_policy is None:
            object.__setattr__(self, "ring_policy", RingPolicy.ascending(self.shards))
        elif len(self.ring_policy.permutation) != self.shards:
            raise ValueError("ring policy does not cover all shards")

    @property
    def quorum(self) -> int:
        """Vote threshold nf = n - f."""
        return self.replicas - self.faults

    def all_replicas(self, shard: int) -> list[ReplicaId]:
        return [ReplicaId(shard, i) for i in range(self.replicas)]

    def primary_index(self, view: int) -> int:
        return view % self.replicas


def ring_order(config: SystemConfig, involved: tuple[int, ...]) -> tuple[int, ...]:
    """Involved shards sorted by ring position."""
    if not involved:
        raise ValueError("involved set is empty")
    pos = config.ring_policy.position
    for s in involved:
        if not 1 <= s <= config.shards:
            raise ValueError(f"shard {s} outside 1..{config.shards}")
    if len(set(involved)) != len(involved):
        raise ValueError("involved set has duplicates")
    return tuple(sorted(involved, key=pos))


def first_in_ring(config: SystemConfig, involved: tuple[int, ...]) -> int:
    return ring_order(config, involved)[0]


def next_in_ring(config: SystemConfig, involved: tuple[int, ...], shard: int) -> int:
    """Successor of `shard` among the involved set, wrapping at the end."""
    order = ring_order(config, involved)
    i = order.index(shard)
    return order[(i + 1) % len(order)]


def prev_in_ring(config: SystemConfig, involved: tuple[int, ...], shard: int) -> int:
    order = ring_order(config, involved)
    i = order.index(shard)
    return order[(i - 1) % len(order)]


@dataclass(frozen=True)
class WriteOp:
    """A single write at one shard.

    If dep_shard is non-zero the written value is taken from the ring-carried
    result set: the value previously written to (dep_shard, dep_key) by this
    same transaction's upstream fragment. Otherwise `value` is written as is.
    """

    shard: int
    key: str
    value: str = ""
    dep_shard: int = 0
    dep_key: str = ""


@dataclass(frozen=True)
class ReadDep:
    """A declared read of (shard, key); remote reads resolve through the
    ring-carried result set, local reads come from the shard's own store."""

    shard: int
    key: str


@dataclass(frozen=True)
class Transaction:
    """A client transaction touching one or more shards.

    txn_id is (client id, client-local counter) and is unique per client.
    involved must equal the set of shards named by the ops.
    """

    client: int
    counter: int
    involved: tuple[int, ...]
    writes: tuple[WriteOp, ...]
    reads: tuple[ReadDep, ...] = ()
    signature: bytes = b""

    @property
    def txn_id(self) -> tuple[int, int]:
        return (self.client, self.counter)

    def read_keys(self, shard: int) -> set[str]:
        keys = {r.key for r in self.reads if r.shard == shard}
        keys |= {w.dep_key for w in self.writes if w.dep_shard == shard}
        return keys

    def write_keys(self, shard: int) -> set[str]:
        return {w.key for w in self.writes if w.shard == shard}


@dataclass(frozen=True)
class Batch:
    """The consensus unit: one or more transactions sharing an involved set."""

    txns: tuple[Transaction, ...]

    def __post_init__(self):
        if not self.txns:
            raise ValueError("batch must carry at least one transaction")
        involved = self.txns[0].involved
        for t in self.txns:
            if t.involved != involved:
                raise ValueError("batch mixes involved sets")

    @property
    def involved(self) -> tuple[int, ...]:
        return self.txns[0].involved

    @property
    def client(self) -> int:
        return self.txns[0].client

    @cached_property
    def encoded(self) -> bytes:
        from . import codec

        return codec.encode_batch(self)

    @cached_property
    def digest(self) -> bytes:
        return digest_bytes(self.encoded)

    def read_keys(self, shard: int) -> set[str]:
        keys: set[str] = set()
        for t in self.txns:
            keys |= t.read_keys(shard)
        return keys

    def write_keys(self, shard: int) -> set[str]:
        keys: set[str] = set()
        for t in self.txns:
            keys |= t.write_keys(shard)
        return keys

    def lock_keys(self, shard: int) -> set[str]:
        return self.read_keys(shard) | self.write_keys(shard)


def null_digest_for(k: int) -> bytes:
    """Digest of the null proposal used to fill sequence gaps after a view
    change. View-independent so re-proposals stay identical."""
    return digest_bytes(b"null:%d" % k)


# --- protocol messages -----------------------------------------------------
#
# Every message carries `auth`: a MAC for intra-shard traffic (Preprepare,
# Prepare, Checkpoint, Response) or a signature for messages that third
# parties must verify (Commit, Forward, Execute, RemoteView, ViewChange,
# NewView, client requests). Authentication is computed over the canonical
# encoding with auth blanked; see codec.signing_bytes.


@dataclass(frozen=True)
class ClientRequest:
    kind: ClassVar[str] = "request"
    client: int
    batch: Batch
    auth: bytes = b""


@dataclass(frozen=True)
class Preprepare:
    kind: ClassVar[str] = "preprepare"
    sender: ReplicaId
    view: int
    k: int
    batch: Optional[Batch]
    digest: bytes
    auth: bytes = b""


@dataclass(frozen=True)
class Prepare:
    kind: ClassVar[str] = "prepare"
    sender: ReplicaId
    view: int
    k: int
    digest: bytes
    auth: bytes = b""


@dataclass(frozen=True)
class Commit:
    kind: ClassVar[str] = "commit"
    sender: ReplicaId
    view: int
    k: int
    digest: bytes
    auth: bytes = b""


@dataclass(frozen=True)
class Forward:
    """Hands a committed cross-shard batch to the next shard on the ring.

    cert is the commit certificate: (replica index, signature) pairs from
    quorum distinct replicas of origin_shard, each signing the canonical
    Commit(view, k, digest) bytes.
    """

    kind: ClassVar[str] = "forward"
    sender: ReplicaId
    origin_shard: int
    view: int
    k: int
    batch: Batch
    digest: bytes
    cert: tuple[tuple[int, bytes], ...]
    auth: bytes = b""


@dataclass(frozen=True)
class ExecuteMsg:
    """Carries accumulated fragment results (sigma) around the ring during
    the execution rotation. sigma is ring-ordered: (shard, ((key, value)...))."""

    kind: ClassVar[str] = "execute"
    sender: ReplicaId
    origin_shard: int
    digest: bytes
    sigma: tuple[tuple[int, tuple[tuple[str, str], ...]], ...]
    auth: bytes = b""


@dataclass(frozen=True)
class CheckpointEntry:
    """Replay material for one sequence slot: the batch, its commit
    certificate, and (if executed) the writes it applied at this shard."""

    k: int
    digest: bytes
    batch: Optional[Batch]
    cert_view: int
    cert: tuple[tuple[int, bytes], ...]
    executed: bool
    writes: tuple[tuple[str, str], ...]


@dataclass(frozen=True)
class Checkpoint:
    kind: ClassVar[str] = "checkpoint"
    sender: ReplicaId
    boundary: int
    entries_digest: bytes
    entries: tuple[CheckpointEntry, ...]
    auth: bytes = b""


@dataclass(frozen=True)
class PreparedEntry:
    """A slot the sender prepared (or committed); carried in ViewChange so the
    next primary can re-propose it at the same sequence number."""

    k: int
    view: int
    digest: bytes
    batch: Optional[Batch]


@dataclass(frozen=True)
class ViewChange:
    kind: ClassVar[str] = "viewchange"
    sender: ReplicaId
    new_view: int
    last_stable: int
    prepared: tuple[PreparedEntry, ...]
    auth: bytes = b""


@dataclass(frozen=True)
class NewView:
    kind: ClassVar[str] = "newview"
    sender: ReplicaId
    new_view: int
    view_changes: tuple[ViewChange, ...]
    preprepares: tuple[Preprepare, ...]
    auth: bytes = b""


@dataclass(frozen=True)
class RemoteView:
    """Cross-shard complaint: the sender waited past its remote timer with
    fewer than f+1 matching Forwards for `digest` from shard origin_shard."""

    kind: ClassVar[str] = "remoteview"
    sender: ReplicaId
    origin_shard: int
    digest: bytes
    batch: Batch
    auth: bytes = b""


@dataclass(frozen=True)
class Response:
    kind: ClassVar[str] = "response"
    sender: ReplicaId
    view: int
    k: int
    digest: bytes
    sigma: tuple[tuple[int, tuple[tuple[str, str], ...]], ...]
    auth: bytes = b""


ProtocolMessage = (
    ClientRequest
    | Preprepare
    | Prepare
    | Commit
    | Forward
    | ExecuteMsg
    | Checkpoint
    | ViewChange
    | NewView
    | RemoteView
    | Response
)

# Message kinds whose authenticator is a signature rather than a MAC.
SIGNED_KINDS = frozenset(
    {"commit", "forward", "execute", "remoteview", "viewchange", "newview", "request"}
)


@dataclass(frozen=True)
class TimerConfig:
    """Virtual-time timer durations (microseconds).

    The ordering local < remote < transmit is required: a shard must attempt
    local recovery (view change) before complaining to its predecessor, and a
    predecessor must see complaints before blind retransmission.
    """

    local_us: int = 50_000
    remote_us: int = 150_000
    transmit_us: int = 400_000
    client_us: int = 2_000_000
    viewchange_us: int = 100_000
    max_retransmit: int = 12

    def __post_init__(self):
        if not (self.local_us < self.remote_us < self.transmit_us):
            raise ValueError("timer ordering local < remote < transmit violated")
        for name in ("local_us", "remote_us", "transmit_us", "client_us",
                     "viewchange_us"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_retransmit < 0:
            raise ValueError("max_retransmit must be non-negative")
