"""Canonical byte encoding for protocol messages.

Every message has exactly one encoding: a one-byte kind tag followed by the
message fields in declaration order. Primitives are length-prefixed or fixed
width, so the encoding is unambiguous and stable across runs and platforms:

    u8      single byte
    u32     4-byte big-endian unsigned (lengths, counts)
    i64     8-byte big-endian signed (sequence numbers, views, ids)
    bytes   u32 length + raw bytes
    str     utf-8 bytes as `bytes`
    bool    u8 0 or 1
    opt(X)  u8 presence flag + X if present
    seq(X)  u32 count + items

Authenticators are computed over `signing_bytes`, the canonical encoding with
the auth field blanked. Batch digests hash `encode_batch`.
"""

from __future__ import annotations

import struct
from dataclasses import replace

from . import core

TAGS = {
    "request": 1,
    "preprepare": 2,
    "prepare": 3,
    "commit": 4,
    "forward": 5,
    "execute": 6,
    "checkpoint": 7,
    "viewchange": 8,
    "newview": 9,
    "remoteview": 10,
    "response": 11,
}


class DecodeError(ValueError):
    pass


def _u32(n: int) -> bytes:
    return struct.pack(">I", n)


def _i64(n: int) -> bytes:
    return struct.pack(">q", n)


def _bytes(b: bytes) -> bytes:
    return _u32(len(b)) + b


def _str(s: str) -> bytes:
    return _bytes(s.encode("utf-8"))


def _bool(v: bool) -> bytes:
    return b"\x01" if v else b"\x00"


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError("truncated input")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def i64(self) -> int:
        return struct.unpack(">q", self.take(8))[0]

    def bytes_(self) -> bytes:
        return self.take(self.u32())

    def str_(self) -> str:
        return self.bytes_().decode("utf-8")

    def bool_(self) -> bool:
        v = self.u8()
        if v not in (0, 1):
            raise DecodeError("bad bool")
        return v == 1

    def done(self) -> bool:
        return self.pos == len(self.data)


def _enc_replica(r: core.ReplicaId) -> bytes:
    return _i64(r.shard) + _i64(r.index)


def _dec_replica(r: _Reader) -> core.ReplicaId:
    return core.ReplicaId(r.i64(), r.i64())


def _enc_write(w: core.WriteOp) -> bytes:
    return (
        _i64(w.shard)
        + _str(w.key)
        + _str(w.value)
        + _i64(w.dep_shard)
        + _str(w.dep_key)
    )


def _dec_write(r: _Reader) -> core.WriteOp:
    return core.WriteOp(r.i64(), r.str_(), r.str_(), r.i64(), r.str_())


def encode_txn(t: core.Transaction) -> bytes:
    out = bytearray()
    out += _i64(t.client)
    out += _i64(t.counter)
    out += _u32(len(t.involved))
    for s in t.involved:
        out += _i64(s)
    out += _u32(len(t.writes))
    for w in t.writes:
        out += _enc_write(w)
    out += _u32(len(t.reads))
    for rd in t.reads:
        out += _i64(rd.shard) + _str(rd.key)
    out += _bytes(t.signature)
    return bytes(out)


def txn_signing_bytes(t: core.Transaction) -> bytes:
    return encode_txn(replace(t, signature=b""))


def _dec_txn(r: _Reader) -> core.Transaction:
    client = r.i64()
    counter = r.i64()
    involved = tuple(r.i64() for _ in range(r.u32()))
    writes = tuple(_dec_write(r) for _ in range(r.u32()))
    reads = tuple(core.ReadDep(r.i64(), r.str_()) for _ in range(r.u32()))
    sig = r.bytes_()
    return core.Transaction(client, counter, involved, writes, reads, sig)


def encode_batch(b: core.Batch) -> bytes:
    out = bytearray(_u32(len(b.txns)))
    for t in b.txns:
        out += _bytes(encode_txn(t))
    return bytes(out)


def _dec_batch(r: _Reader) -> core.Batch:
    n = r.u32()
    txns = []
    for _ in range(n):
        txns.append(_dec_txn(_Reader(r.bytes_())))
    return core.Batch(tuple(txns))


def _enc_opt_batch(b) -> bytes:
    if b is None:
        return b"\x00"
    return b"\x01" + _bytes(encode_batch(b))


def _dec_opt_batch(r: _Reader):
    if r.u8() == 0:
        return None
    return _dec_batch(_Reader(r.bytes_()))


def _enc_cert(cert: tuple[tuple[int, bytes], ...]) -> bytes:
    out = bytearray(_u32(len(cert)))
    for index, sig in cert:
        out += _i64(index) + _bytes(sig)
    return bytes(out)


def _dec_cert(r: _Reader) -> tuple[tuple[int, bytes], ...]:
    return tuple((r.i64(), r.bytes_()) for _ in range(r.u32()))


def _enc_sigma(sigma) -> bytes:
    out = bytearray(_u32(len(sigma)))
    for shard, writes in sigma:
        out += _i64(shard)
        out += _u32(len(writes))
        for key, val in writes:
            out += _str(key) + _str(val)
    return bytes(out)


def _dec_sigma(r: _Reader):
    sigma = []
    for _ in range(r.u32()):
        shard = r.i64()
        writes = tuple((r.str_(), r.str_()) for _ in range(r.u32()))
        sigma.append((shard, writes))
    return tuple(sigma)


def _enc_checkpoint_entry(e: core.CheckpointEntry) -> bytes:
    out = bytearray()
    out += _i64(e.k)
    out += _bytes(e.digest)
    out += _enc_opt_batch(e.batch)
    out += _i64(e.cert_view)
    out += _enc_cert(e.cert)
    out += _bool(e.executed)
    out += _u32(len(e.writes))
    for key, val in e.writes:
        out += _str(key) + _str(val)
    return bytes(out)


def _dec_checkpoint_entry(r: _Reader) -> core.CheckpointEntry:
    k = r.i64()
    digest = r.bytes_()
    batch = _dec_opt_batch(r)
    cert_view = r.i64()
    cert = _dec_cert(r)
    executed = r.bool_()
    writes = tuple((r.str_(), r.str_()) for _ in range(r.u32()))
    return core.CheckpointEntry(k, digest, batch, cert_view, cert, executed, writes)


def _enc_prepared_entry(e: core.PreparedEntry) -> bytes:
    return _i64(e.k) + _i64(e.view) + _bytes(e.digest) + _enc_opt_batch(e.batch)


def _dec_prepared_entry(r: _Reader) -> core.PreparedEntry:
    return core.PreparedEntry(r.i64(), r.i64(), r.bytes_(), _dec_opt_batch(r))


def encode_message(msg: core.ProtocolMessage) -> bytes:
    kind = msg.kind
    out = bytearray([TAGS[kind]])
    if kind == "request":
        out += _i64(msg.client)
        out += _bytes(encode_batch(msg.batch))
    elif kind == "preprepare":
        out += _enc_replica(msg.sender)
        out += _i64(msg.view) + _i64(msg.k)
        out += _enc_opt_batch(msg.batch)
        out += _bytes(msg.digest)
    elif kind == "prepare" or kind == "commit":
        out += _enc_replica(msg.sender)
        out += _i64(msg.view) + _i64(msg.k)
        out += _bytes(msg.digest)
    elif kind == "forward":
        out += _enc_replica(msg.sender)
        out += _i64(msg.origin_shard)
        out += _i64(msg.view) + _i64(msg.k)
        out += _bytes(encode_batch(msg.batch))
        out += _bytes(msg.digest)
        out += _enc_cert(msg.cert)
    elif kind == "execute":
        out += _enc_replica(msg.sender)
        out += _i64(msg.origin_shard)
        out += _bytes(msg.digest)
        out += _enc_sigma(msg.sigma)
    elif kind == "checkpoint":
        out += _enc_replica(msg.sender)
        out += _i64(msg.boundary)
        out += _bytes(msg.entries_digest)
        out += _u32(len(msg.entries))
        for e in msg.entries:
            out += _bytes(_enc_checkpoint_entry(e))
    elif kind == "viewchange":
        out += _enc_replica(msg.sender)
        out += _i64(msg.new_view) + _i64(msg.last_stable)
        out += _u32(len(msg.prepared))
        for e in msg.prepared:
            out += _bytes(_enc_prepared_entry(e))
    elif kind == "newview":
        out += _enc_replica(msg.sender)
        out += _i64(msg.new_view)
        out += _u32(len(msg.view_changes))
        for vc in msg.view_changes:
            out += _bytes(encode_message(vc))
        out += _u32(len(msg.preprepares))
        for pp in msg.preprepares:
            out += _bytes(encode_message(pp))
    elif kind == "remoteview":
        out += _enc_replica(msg.sender)
        out += _i64(msg.origin_shard)
        out += _bytes(msg.digest)
        out += _bytes(encode_batch(msg.batch))
    elif kind == "response":
        out += _enc_replica(msg.sender)
        out += _i64(msg.view) + _i64(msg.k)
        out += _bytes(msg.digest)
        out += _enc_sigma(msg.sigma)
    else:  # pragma: no cover - all kinds enumerated above
        raise ValueError(f"unknown message kind {kind!r}")
    out += _bytes(msg.auth)
    return bytes(out)


def decode_message(data: bytes) -> core.ProtocolMessage:
    r = _Reader(data)
    tag = r.u8()
    msg: core.ProtocolMessage
    if tag == TAGS["request"]:
        client = r.i64()
        batch = _dec_batch(_Reader(r.bytes_()))
        msg = core.ClientRequest(client, batch, r.bytes_())
    elif tag == TAGS["preprepare"]:
        sender = _dec_replica(r)
        view, k = r.i64(), r.i64()
        batch = _dec_opt_batch(r)
        digest = r.bytes_()
        msg = core.Preprepare(sender, view, k, batch, digest, r.bytes_())
    elif tag == TAGS["prepare"]:
        msg = core.Prepare(_dec_replica(r), r.i64(), r.i64(), r.bytes_(), r.bytes_())
    elif tag == TAGS["commit"]:
        msg = core.Commit(_dec_replica(r), r.i64(), r.i64(), r.bytes_(), r.bytes_())
    elif tag == TAGS["forward"]:
        sender = _dec_replica(r)
        origin = r.i64()
        view, k = r.i64(), r.i64()
        batch = _dec_batch(_Reader(r.bytes_()))
        digest = r.bytes_()
        cert = _dec_cert(r)
        msg = core.Forward(sender, origin, view, k, batch, digest, cert, r.bytes_())
    elif tag == TAGS["execute"]:
        msg = core.ExecuteMsg(
            _dec_replica(r), r.i64(), r.bytes_(), _dec_sigma(r), r.bytes_()
        )
    elif tag == TAGS["checkpoint"]:
        sender = _dec_replica(r)
        boundary = r.i64()
        entries_digest = r.bytes_()
        entries = tuple(
            _dec_checkpoint_entry(_Reader(r.bytes_())) for _ in range(r.u32())
        )
        msg = core.Checkpoint(sender, boundary, entries_digest, entries, r.bytes_())
    elif tag == TAGS["viewchange"]:
        sender = _dec_replica(r)
        new_view, last_stable = r.i64(), r.i64()
        prepared = tuple(
            _dec_prepared_entry(_Reader(r.bytes_())) for _ in range(r.u32())
        )
        msg = core.ViewChange(sender, new_view, last_stable, prepared, r.bytes_())
    elif tag == TAGS["newview"]:
        sender = _dec_replica(r)
        new_view = r.i64()
        vcs = []
        for _ in range(r.u32()):
            vc = decode_message(r.bytes_())
            if not isinstance(vc, core.ViewChange):
                raise DecodeError("newview carries a non-viewchange")
            vcs.append(vc)
        pps = []
        for _ in range(r.u32()):
            pp = decode_message(r.bytes_())
            if not isinstance(pp, core.Preprepare):
                raise DecodeError("newview carries a non-preprepare")
            pps.append(pp)
        msg = core.NewView(sender, new_view, tuple(vcs), tuple(pps), r.bytes_())
    elif tag == TAGS["remoteview"]:
        sender = _dec_replica(r)
        origin = r.i64()
        digest = r.bytes_()
        batch = _dec_batch(_Reader(r.bytes_()))
        msg = core.RemoteView(sender, origin, digest, batch, r.bytes_())
    elif tag == TAGS["response"]:
        sender = _dec_replica(r)
        view, k = r.i64(), r.i64()
        digest = r.bytes_()
        sigma = _dec_sigma(r)
        msg = core.Response(sender, view, k, digest, sigma, r.bytes_())
    else:
        raise DecodeError(f"unknown message tag {tag}")
    if not r.done():
        raise DecodeError("trailing bytes after message")
    return msg


def signing_bytes(msg: core.ProtocolMessage) -> bytes:
    """Canonical bytes the authenticator covers: the encoding with auth blank."""
    if msg.auth:
        msg = replace(msg, auth=b"")
    return encode_message(msg)


def message_size(msg: core.ProtocolMessage) -> int:
    return len(encode_message(msg))
