"""Authentication for protocol messages.

Two interchangeable schemes share one interface:

* ``hash`` (default for simulation): keyed blake2b for both MACs and
  signatures. Verification of a "signature" re-derives it from the signer's
  secret, which the keystore holds for every identity. That is sound inside
  the simulator because fault injection never hands one replica's secret to
  another; it buys a large constant factor over public-key crypto.
* ``ed25519``: HMAC-SHA256 MACs and real Ed25519 signatures. Same interface,
  actual asymmetric verification.

MACs are pairwise (sender, receiver); signatures are per identity and
third-party verifiable, which cross-shard messages and commit certificates
rely on. Identities are replicas (shard, index) or clients (integer id).
"""

from __future__ import annotations

import hashlib
import hmac as hmac_mod
from dataclasses import replace

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from . import codec, core

Identity = core.ReplicaId | int

MAC_SIZE = 16
SCHEMES = ("hash", "ed25519")


def _ident_bytes(ident: Identity) -> bytes:
    if isinstance(ident, core.ReplicaId):
        return b"r:%d:%d" % (ident.shard, ident.index)
    return b"c:%d" % ident


class KeyStore:
    """Holds every identity's keys, derived deterministically from a seed."""

    def __init__(self, config: core.SystemConfig, clients: int,
                 seed: bytes = b"keys", scheme: str = "hash"):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}")
        self.config = config
        self.scheme = scheme
        self._seed = seed
        self._secrets: dict[bytes, bytes] = {}
        self._priv: dict[bytes, Ed25519PrivateKey] = {}
        self._pub: dict[bytes, Ed25519PublicKey] = {}
        idents: list[Identity] = []
        for s in range(1, config.shards + 1):
            idents.extend(config.all_replicas(s))
        idents.extend(range(clients))
        for ident in idents:
            ib = _ident_bytes(ident)
            secret = hashlib.blake2b(seed + b"|" + ib, digest_size=32).digest()
            self._secrets[ib] = secret
            if scheme == "ed25519":
                priv = Ed25519PrivateKey.from_private_bytes(secret)
                self._priv[ib] = priv
                self._pub[ib] = priv.public_key()

    def _known(self, ident: Identity) -> bytes:
        ib = _ident_bytes(ident)
        if ib not in self._secrets:
            raise KeyError(f"unknown identity {ident}")
        return ib

    def _pair_key(self, a: Identity, b: Identity) -> bytes:
        ia, ib = sorted((self._known(a), self._known(b)))
        return hashlib.blake2b(
            self._seed + b"|mac|" + ia + b"|" + ib, digest_size=32
        ).digest()

    # --- pairwise MACs ---

    def mac(self, sender: Identity, receiver: Identity, data: bytes) -> bytes:
        key = self._pair_key(sender, receiver)
        if self.scheme == "hash":
            return hashlib.blake2b(data, key=key, digest_size=MAC_SIZE).digest()
        return hmac_mod.new(key, data, hashlib.sha256).digest()[:MAC_SIZE]

    def verify_mac(self, sender: Identity, receiver: Identity,
                   data: bytes, tag: bytes) -> bool:
        try:
            expected = self.mac(sender, receiver, data)
        except KeyError:
            return False
        return hmac_mod.compare_digest(expected, tag)

    # --- signatures ---

    def sign(self, ident: Identity, data: bytes) -> bytes:
        ib = self._known(ident)
        if self.scheme == "hash":
            return hashlib.blake2b(
                data, key=self._secrets[ib], digest_size=MAC_SIZE
            ).digest()
        return self._priv[ib].sign(data)

    def verify(self, ident: Identity, data: bytes, sig: bytes) -> bool:
        try:
            ib = self._known(ident)
        except KeyError:
            return False
        if self.scheme == "hash":
            expected = hashlib.blake2b(
                data, key=self._secrets[ib], digest_size=MAC_SIZE
            ).digest()
            return hmac_mod.compare_digest(expected, sig)
        try:
            self._pub[ib].verify(sig, data)
            return True
        except InvalidSignature:
            return False


def sign_txn(ks: KeyStore, txn: core.Transaction) -> core.Transaction:
    sig = ks.sign(txn.client, codec.txn_signing_bytes(txn))
    return replace(txn, signature=sig)


def authenticate(ks: KeyStore, msg, sender: Identity,
                 receiver: Identity | None = None):
    """Attach the authenticator: a signature for cross-verifiable kinds, a
    pairwise MAC otherwise (receiver required for MACs)."""
    body = codec.signing_bytes(msg)
    if msg.kind in core.SIGNED_KINDS:
        auth = ks.sign(sender, body)
    else:
        if receiver is None:
            raise ValueError(f"{msg.kind} needs a receiver for its MAC")
        auth = ks.mac(sender, receiver, body)
    return replace(msg, auth=auth)


def verify_auth(ks: KeyStore, msg, receiver: Identity) -> bool:
    """Check the authenticator against the embedded sender identity."""
    sender: Identity = msg.client if msg.kind == "request" else msg.sender
    body = codec.signing_bytes(msg)
    if msg.kind in core.SIGNED_KINDS:
        return ks.verify(sender, body, msg.auth)
    return ks.verify_mac(sender, receiver, body, msg.auth)


def verify_txn(ks: KeyStore, txn: core.Transaction) -> bool:
    return ks.verify(txn.client, codec.txn_signing_bytes(txn), txn.signature)


def well_formed_batch(ks: KeyStore, config: core.SystemConfig,
                      batch: core.Batch) -> bool:
    """Every transaction signed by its claimed client, involved sets valid,
    and every op named on an involved shard."""
    involved = batch.involved
    try:
        core.ring_order(config, involved)
    except ValueError:
        return False
    for t in batch.txns:
        if t.involved != involved:
            return False
        for w in t.writes:
            if w.shard not in involved:
                return False
            if w.dep_shard and w.dep_shard not in involved:
                return False
        for rd in t.reads:
            if rd.shard not in involved:
                return False
        if not verify_txn(ks, t):
            return False
    return True


def commit_signing_bytes(sender: core.ReplicaId, view: int, k: int,
                         digest: bytes) -> bytes:
    return codec.signing_bytes(core.Commit(sender, view, k, digest))


def verify_certificate(ks: KeyStore, config: core.SystemConfig,
                       origin_shard: int, view: int, k: int, digest: bytes,
                       cert: tuple[tuple[int, bytes], ...]) -> bool:
    """A commit certificate needs quorum signatures from distinct replicas of
    the origin shard, each over the canonical Commit bytes."""
    indices = [index for index, _ in cert]
    if len(set(indices)) < config.quorum:
        return False
    for index, sig in cert:
        if not 0 <= index < config.replicas:
            return False
        body = commit_signing_bytes(
            core.ReplicaId(origin_shard, index), view, k, digest
        )
        if not ks.verify(core.ReplicaId(origin_shard, index), body, sig):
            return False
    return True
