"""Per-shard hash-chained ledger with Merkle batch roots.

Each replica keeps a partial ledger: a chain of blocks starting at a fixed
genesis block. A block commits one executed batch: its Merkle root, the
proposer of the view that committed it, the ids of the member transactions,
and the hash of the previous block. A cross-shard batch is appended to every
involved shard's ledger; chain positions may differ between shards, but
conflicting batches keep their relative order at every shard where they
contend (the engine's lock discipline guarantees that, and verify_chain plus
the union checks in `verify` confirm it after a run).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import codec, core
from .core import digest_bytes

_LEAF = b"\x00"
_NODE = b"\x01"


def merkle_root(leaves: list[bytes]) -> bytes:
    """Root of a binary Merkle tree; an odd level duplicates its last node."""
    if not leaves:
        raise ValueError("merkle tree needs at least one leaf")
    level = [digest_bytes(_LEAF + leaf) for leaf in leaves]
    while len(level) > 1:
        if len(level) % 2 == 1:
            level.append(level[-1])
        level = [
            digest_bytes(_NODE + level[i] + level[i + 1])
            for i in range(0, len(level), 2)
        ]
    return level[0]


def batch_merkle_root(batch: core.Batch) -> bytes:
    return merkle_root([codec.encode_txn(t) for t in batch.txns])


@dataclass(frozen=True)
class Block:
    k: int
    root: bytes
    proposer: int
    prev_hash: bytes
    batch_digest: bytes
    involved: tuple[int, ...]
    txn_ids: tuple[tuple[int, int], ...]

    def encoded(self) -> bytes:
        # proposer is deliberately left out: replicas may commit the same
        # batch in different views (one before a view change, one after its
        # reproposal), so who proposed is replica-local provenance, not
        # agreed content. Same principle as commit certificates staying out
        # of checkpoint content digests.
        out = bytearray()
        out += codec._i64(self.k)
        out += codec._bytes(self.root)
        out += codec._bytes(self.prev_hash)
        out += codec._bytes(self.batch_digest)
        out += codec._u32(len(self.involved))
        for s in self.involved:
            out += codec._i64(s)
        out += codec._u32(len(self.txn_ids))
        for c, n in self.txn_ids:
            out += codec._i64(c) + codec._i64(n)
        return bytes(out)

    def block_hash(self) -> bytes:
        return digest_bytes(self.encoded())


GENESIS = Block(
    k=0,
    root=digest_bytes(b"origin"),
    proposer=-1,
    prev_hash=core.NULL_DIGEST,
    batch_digest=core.NULL_DIGEST,
    involved=(),
    txn_ids=(),
)


class PartialLedger:
    """One shard's chain as a single replica sees it."""

    def __init__(self, shard: int):
        self.shard = shard
        self.blocks: list[Block] = [GENESIS]

    def head(self) -> Block:
        return self.blocks[-1]

    def append_batch(self, batch: core.Batch, proposer: int) -> Block:
        block = Block(
            k=len(self.blocks),
            root=batch_merkle_root(batch),
            proposer=proposer,
            prev_hash=self.head().block_hash(),
            batch_digest=batch.digest,
            involved=batch.involved,
            txn_ids=tuple(t.txn_id for t in batch.txns),
        )
        self.blocks.append(block)
        return block

    def append_block(self, block: Block) -> None:
        """Append replay material (checkpoint adoption); same chain rules."""
        if block.k != len(self.blocks):
            raise ValueError(f"expected position {len(self.blocks)}, got {block.k}")
        if block.prev_hash != self.head().block_hash():
            raise ValueError("parent hash mismatch")
        self.blocks.append(block)

    def verify_chain(self) -> bool:
        if self.blocks[0] != GENESIS:
            return False
        for i, block in enumerate(self.blocks):
            if block.k != i:
                return False
            if i and block.prev_hash != self.blocks[i - 1].block_hash():
                return False
        return True

    def position_of(self, batch_digest: bytes) -> int | None:
        for block in self.blocks[1:]:
            if block.batch_digest == batch_digest:
                return block.k
        return None

    def export(self) -> str:
        """Newline-delimited hex of each block's canonical encoding."""
        return "\n".join(b.encoded().hex() for b in self.blocks) + "\n"
