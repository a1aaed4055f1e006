"""Replica state machine: intra-shard consensus, locking, execution, recovery.

A replica is a pure event-driven state machine: feed it a message or a timer
expiry and it returns a StepOutput listing the messages it wants delivered,
the timers it wants armed or cancelled, trace notes, and the virtual
processing time it consumed. The network simulator owns time and transport;
nothing here reads a clock or touches I/O, which is what makes runs
reproducible bit for bit.

Consensus within a shard is the classic three-phase protocol: the view's
primary assigns the next sequence number and broadcasts a Preprepare; every
replica that accepts it broadcasts a Prepare; quorum (n-f) matching Prepares
trigger a signed Commit; quorum matching Commits commit the slot and yield a
commit certificate. Commits are signature-authenticated even inside a shard
so the certificate can travel to other shards inside Forward messages.

Committed slots acquire locks strictly in sequence order: only the slot at
k_max+1 may lock, and only if every key it touches is free or already held by
the same batch; otherwise it parks in the pending table and everything behind
it waits. That head-of-line discipline is deliberate: all cross-shard batches
visit shards in ring order and lock in sequence order, so no cycle of lock
waits can form. Single-shard batches execute the moment they lock; cross-shard
batches hold their locks while the Forward rotation completes and execute
during the Execute rotation, releasing locks as results propagate.

Recovery paths: a local timer expiring starts a view change; f+1 RemoteView
complaints from the successor shard do too; checkpoints every
`checkpoint_period` slots carry replay material that brings replicas kept in
the dark back up to date; transmit timers re-send cross-shard messages that
may have been lost.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import codec, core, crypto, ring
from .core import ReplicaId
from .ledger import PartialLedger


class ProtocolViolation(Exception):
    """Raised when execution hits a state that well-formed flows cannot
    produce, e.g. a declared dependency missing from the carried results."""


@dataclass
class CostModel:
    """Per-event virtual processing costs (microseconds). A replica is a
    serial server: handling time accumulates, so batching saturates."""

    per_message_us: int = 30
    per_txn_validate_us: int = 10
    per_txn_execute_us: int = 25


@dataclass
class StepOutput:
    sends: list = field(default_factory=list)  # (msg, dst, retx: bool)
    timer_starts: list = field(default_factory=list)  # (kind, key, duration_us)
    timer_cancels: list = field(default_factory=list)  # (kind, key)
    notes: list = field(default_factory=list)  # (event, fields dict)
    busy_us: int = 0


class Slot:
    """Consensus state for one sequence number."""

    __slots__ = (
        "k", "batches", "accepted", "prepare_votes", "sent_commit",
        "commit_votes", "committed", "digest", "cert", "cert_view",
        "proposer", "locked", "executed", "responded", "writes",
        "forward_msg", "forward_dst", "execute_msg", "execute_dst",
        "retx", "replays", "echoes", "is_null",
    )

    def __init__(self, k: int):
        self.k = k
        self.batches: dict[bytes, core.Batch | None] = {}
        self.accepted: dict[int, bytes] = {}
        self.prepare_votes: dict[tuple[int, bytes], set[int]] = {}
        self.sent_commit: set[tuple[int, bytes]] = set()
        self.commit_votes: dict[tuple[int, bytes], dict[int, bytes]] = {}
        self.committed = False
        self.digest = b""
        self.cert: tuple[tuple[int, bytes], ...] = ()
        self.cert_view = 0
        self.proposer = 0
        self.locked = False
        self.executed = False
        self.responded = False
        self.writes: tuple[tuple[str, str], ...] = ()
        self.forward_msg = None
        self.forward_dst = None
        self.execute_msg = None
        self.execute_dst = None
        self.retx = 0
        self.replays = 0
        self.echoes: dict[int, int] = {}
        self.is_null = False

    def batch(self) -> core.Batch | None:
        return self.batches.get(self.digest)


class Replica:
    def __init__(self, config: core.SystemConfig, rid: ReplicaId,
                 ks: crypto.KeyStore, timers: core.TimerConfig | None = None,
                 cost: CostModel | None = None):
        self.config = config
        self.rid = rid
        self.ks = ks
        self.timers = timers or core.TimerConfig()
        self.cost = cost or CostModel()
        self.peers = [r for r in config.all_replicas(rid.shard) if r != rid]

        self.view = 0
        self.in_viewchange = False
        self.vc_target = 0
        self.vc_attempts = 0
        self.vc_votes: dict[int, dict[int, core.ViewChange]] = {}
        self.last_newview: core.NewView | None = None
        self.newview_resends = 0

        self.next_k = 1
        self.slots: dict[int, Slot] = {}
        self.digest_k: dict[bytes, int] = {}
        self.executed_digests: set[bytes] = set()
        self.k_max = 0
        self.watermark = 0
        self.chain_next = 1
        self.last_stable = 0
        self.last_ckpt_emitted = 0

        self.local_nudges: dict[bytes, int] = {}
        self.locks: dict[str, bytes] = {}
        self.store: dict[str, str] = {}
        self.ledger = PartialLedger(rid.shard)
        self.responses: dict[int, core.Response] = {}
        self.exec_history: dict[int, bytes] = {}
        self.pending_requests: dict[bytes, core.ClientRequest] = {}
        self.future_pp: dict[tuple[int, int], core.Preprepare] = {}

        # Cross-shard aggregation state, by batch digest (see ring module).
        self.cst: dict[bytes, ring.DigestState] = {}
        self.ckpt_votes: dict[tuple[int, bytes], set[int]] = {}
        self.ckpt_entries: dict[tuple[int, bytes], tuple] = {}

        self._out = StepOutput()

    # --- plumbing -----------------------------------------------------------

    def is_primary(self, view: int | None = None) -> bool:
        v = self.view if view is None else view
        return self.config.primary_index(v) == self.rid.index

    def note(self, event: str, **fields) -> None:
        self._out.notes.append((event, fields))

    def send_raw(self, msg, dst, retx: bool = False) -> None:
        self._out.sends.append((msg, dst, retx))

    def send_macced(self, msg, dst) -> None:
        self.send_raw(crypto.authenticate(self.ks, msg, self.rid, dst), dst)

    def broadcast_macced(self, msg) -> None:
        for peer in self.peers:
            self.send_macced(msg, peer)

    def broadcast_signed(self, msg):
        signed = crypto.authenticate(self.ks, msg, self.rid)
        for peer in self.peers:
            self.send_raw(signed, peer)
        return signed

    def start_timer(self, kind: str, key: bytes, duration_us: int) -> None:
        self._out.timer_starts.append((kind, key, duration_us))

    def cancel_timer(self, kind: str, key: bytes) -> None:
        self._out.timer_cancels.append((kind, key))

    def _slot(self, k: int) -> Slot:
        slot = self.slots.get(k)
        if slot is None:
            slot = Slot(k)
            self.slots[k] = slot
        return slot

    # --- entry points -------------------------------------------------------

    def on_message(self, msg, src, now_us: int, retx: bool = False) -> StepOutput:
        self._out = out = StepOutput()
        out.busy_us += self.cost.per_message_us
        kind = msg.kind
        if kind in ("forward", "execute", "remoteview"):
            ring.on_cross_shard(self, msg, src, retx)
        elif kind == "request":
            self._on_request(msg)
        elif kind in ("preprepare", "prepare", "commit", "checkpoint",
                      "viewchange", "newview"):
            if msg.sender.shard != self.rid.shard:
                self.note("drop_foreign", kind=kind)
            elif not crypto.verify_auth(self.ks, msg, self.rid):
                self.note("drop_bad_auth", kind=kind)
            elif kind == "preprepare":
                self._on_preprepare(msg)
            elif kind == "prepare":
                self._on_prepare(msg)
            elif kind == "commit":
                self._on_commit(msg)
            elif kind == "checkpoint":
                self._on_checkpoint(msg)
            elif kind == "viewchange":
                self._on_viewchange(msg)
            else:
                self._on_newview(msg)
        else:
            self.note("drop_unknown", kind=kind)
        return out

    def on_timer(self, kind: str, key: bytes, now_us: int) -> StepOutput:
        self._out = out = StepOutput()
        out.busy_us += self.cost.per_message_us
        if kind == "local":
            self._on_local_timeout(key)
        elif kind == "remote":
            st = self.cst.get(key)
            if st is not None and not st.forward_fired:
                self.note("remote_timeout", d=key)
                ring.send_remote_view(self, key, st)
        elif kind == "rvbuf":
            self._on_rvbuf_timeout(key)
        elif kind == "transmit":
            self._on_transmit_timeout(key)
        elif kind == "viewchange":
            if self.in_viewchange:
                self.vc_attempts += 1
                self.note("viewchange_timeout", target=self.vc_target)
                self.start_view_change(target=self.vc_target + 1)
        return out

    # --- client requests ----------------------------------------------------

    def _on_request(self, msg: core.ClientRequest) -> None:
        batch = msg.batch
        self._out.busy_us += len(batch.txns) * self.cost.per_txn_validate_us
        if not crypto.verify_auth(self.ks, msg, self.rid):
            self.note("drop_bad_auth", kind="request")
            return
        if not crypto.well_formed_batch(self.ks, self.config, batch):
            self.note("drop_malformed", kind="request")
            return
        first = core.first_in_ring(self.config, batch.involved)
        if first != self.rid.shard:
            if self.is_primary() and not self.in_viewchange:
                dst = ReplicaId(first, self.config.primary_index(self.view))
                self.send_raw(msg, dst)
                self.note("request_rerouted", dst_shard=first)
            return
        digest = batch.digest
        stored = self.responses.get(msg.client)
        if stored is not None and stored.digest == digest:
            self.send_raw(stored, msg.client)
            self.note("response_replayed", client=msg.client)
            return
        if digest in self.executed_digests:
            return
        if digest in self.digest_k:
            # Already assigned a slot. A repeat request means the client has
            # not been answered yet; if this replica proposed the slot and it
            # is still open, the Preprepare may have been lost, so send it
            # again (bounded).
            slot = self.slots.get(self.digest_k[digest])
            if (slot is not None and slot.committed and not slot.is_null
                    and slot.digest == digest and slot.batch() is None):
                # Committed from votes alone and the proposal never made it
                # here; the retried request finally supplies the content.
                slot.batches[digest] = batch
                self.note("batch_adopted", k=slot.k, d=digest)
                self._drain_locks()
                return
            if (slot is not None and not slot.committed
                    and self.is_primary() and not self.in_viewchange
                    and slot.accepted.get(self.view) == digest
                    and slot.batch() is not None):
                count = slot.echoes.get(-1, 0)
                if count < 2 * self.config.replicas:
                    slot.echoes[-1] = count + 1
                    pp = core.Preprepare(self.rid, self.view, slot.k,
                                         slot.batch(), digest)
                    self.broadcast_macced(pp)
                    self.note("preprepare_resent", k=slot.k)
            return
        if self.is_primary() and not self.in_viewchange:
            self._assign_and_propose(batch)
        else:
            self.pending_requests[digest] = msg
            dst = ReplicaId(self.rid.shard, self.config.primary_index(self.view))
            if dst != self.rid:
                self.send_raw(msg, dst)
            self.note("request_relayed", client=msg.client)
            self.start_timer("local", digest, self.timers.local_us)

    def _assign_and_propose(self, batch: core.Batch) -> None:
        digest = batch.digest
        k = self.next_k
        self.next_k += 1
        pp = core.Preprepare(self.rid, self.view, k, batch, digest)
        self.note("proposed", k=k, d=digest)
        self._accept_preprepare(pp, from_newview=False, broadcast=True)

    # --- three-phase consensus ----------------------------------------------

    def _on_preprepare(self, msg: core.Preprepare) -> None:
        if msg.sender.index != self.config.primary_index(msg.view):
            self.note("drop_not_primary", kind="preprepare")
            return
        if msg.view > self.view and len(self.future_pp) < 256:
            # Proposals can outrun the NewView that installs their view;
            # hold them until this replica catches up.
            self.future_pp.setdefault((msg.view, msg.k), msg)
            return
        if msg.view != self.view or self.in_viewchange:
            self.note("drop_stale_view", kind="preprepare", v=msg.view)
            return
        self._accept_preprepare(msg, from_newview=False, broadcast=False)

    def _accept_preprepare(self, msg: core.Preprepare, from_newview: bool,
                           broadcast: bool) -> None:
        k, view, digest, batch = msg.k, msg.view, msg.digest, msg.batch
        if k <= self.last_stable:
            return
        slot = self._slot(k)
        prior = slot.accepted.get(view)
        if prior is not None:
            if prior != digest:
                self.note("equivocation", k=k, v=view)
            return
        if batch is None:
            if not from_newview or digest != core.null_digest_for(k):
                self.note("drop_malformed", kind="preprepare")
                return
            slot.is_null = True
        else:
            self._out.busy_us += len(batch.txns) * self.cost.per_txn_validate_us
            if digest != batch.digest:
                self.note("drop_digest_mismatch", kind="preprepare")
                return
            if not crypto.well_formed_batch(self.ks, self.config, batch):
                self.note("drop_malformed", kind="preprepare")
                return
            if self.rid.shard not in batch.involved:
                self.note("drop_not_involved", kind="preprepare")
                return
            first = core.first_in_ring(self.config, batch.involved)
            if len(batch.involved) > 1 and first != self.rid.shard:
                st = ring.get_state(self, digest)
                if not st.forward_fired:
                    # A proposal for a cross-shard batch this replica has not
                    # yet seen f+1 Forwards for: hold it until they arrive.
                    st.pending_preprepare = msg
                    self.note("preprepare_buffered", k=k, d=digest)
                    return
            known_k = self.digest_k.get(digest)
            if known_k is not None and known_k != k:
                self.note("drop_duplicate_assignment", k=k, d=digest)
                return
            self.digest_k[digest] = k

        slot.accepted[view] = digest
        slot.batches[digest] = batch
        self.note("accepted", k=k, d=digest, v=view)
        if not slot.committed:
            self.start_timer("local", digest, self.timers.local_us)
        if broadcast:
            self.broadcast_macced(msg)
        prep = core.Prepare(self.rid, view, k, digest)
        self.broadcast_macced(prep)
        self._record_prepare(slot, view, digest, self.rid.index)

    def _retired_view(self, view: int) -> bool:
        """True for views this replica may no longer act in: anything below
        the current view, or below an announced view-change target.  The
        ViewChange broadcast for that target snapshots the prepared set, so
        acting in an older view afterwards would silently invalidate it."""
        if view < self.view:
            return True
        return self.in_viewchange and view < self.vc_target

    def _on_prepare(self, msg: core.Prepare) -> None:
        if self._retired_view(msg.view):
            self.note("drop_stale_view", kind="prepare", v=msg.view)
            return
        slot = self._slot(msg.k)
        self._record_prepare(slot, msg.view, msg.digest, msg.sender.index)

    def _record_prepare(self, slot: Slot, view: int, digest: bytes,
                        index: int) -> None:
        votes = slot.prepare_votes.setdefault((view, digest), set())
        if index in votes and index != self.rid.index:
            self._echo_votes(slot, view, digest, index)
            return
        votes.add(index)
        self._eval_prepared(slot, view, digest)

    def _eval_prepared(self, slot: Slot, view: int, digest: bytes) -> None:
        if (view, digest) in slot.sent_commit:
            return
        if slot.accepted.get(view) != digest:
            return
        votes = slot.prepare_votes.get((view, digest), ())
        if len(votes) < self.config.quorum:
            return
        slot.sent_commit.add((view, digest))
        self.note("prepared", k=slot.k, d=digest, v=view)
        commit = core.Commit(self.rid, view, slot.k, digest)
        signed = self.broadcast_signed(commit)
        self._record_commit(slot, view, digest, self.rid.index, signed.auth)

    def _on_commit(self, msg: core.Commit) -> None:
        if self._retired_view(msg.view):
            # A vote for a view this replica has left behind. Counting it
            # authors nothing, and a commit quorum is final in any view, so
            # record it: late or relayed certificate pieces are how a
            # straggler catches up when the rest of the shard moved on.
            if msg.k <= self.last_stable:
                return
            self.note("late_commit", k=msg.k, v=msg.view)
        slot = self._slot(msg.k)
        self._record_commit(slot, msg.view, msg.digest, msg.sender.index,
                            msg.auth)

    def _echo_votes(self, slot: Slot, view: int, digest: bytes,
                    index: int) -> None:
        """A peer re-sent a vote this replica already counted: that peer is
        stalled and fishing for the votes it is missing. Answer directly with
        this replica's own votes for the slot, a bounded number of times.
        Never answers mid view change: fresh votes for the old view would
        contradict the ViewChange already broadcast."""
        if self.in_viewchange or view != self.view:
            return
        if slot.accepted.get(view) != digest:
            return
        count = slot.echoes.get(index, 0)
        if count >= 2 * self.config.replicas:
            return
        slot.echoes[index] = count + 1
        dst = ReplicaId(self.rid.shard, index)
        self.send_macced(core.Prepare(self.rid, view, slot.k, digest), dst)
        if (view, digest) in slot.sent_commit:
            commit = core.Commit(self.rid, view, slot.k, digest)
            self.send_raw(crypto.authenticate(self.ks, commit, self.rid), dst)
        self.note("votes_echoed", k=slot.k, dst=index)

    def _record_commit(self, slot: Slot, view: int, digest: bytes,
                       index: int, sig: bytes) -> None:
        votes = slot.commit_votes.setdefault((view, digest), {})
        if index in votes and index != self.rid.index:
            self._echo_votes(slot, view, digest, index)
            return
        votes[index] = sig
        if len(votes) < self.config.quorum:
            return
        if slot.committed:
            if slot.digest != digest:
                self.note("violation", what="conflicting_commit", k=slot.k)
                return
            if view > slot.cert_view:
                # Re-committed in a newer view (after a view change): refresh
                # the certificate and re-drive the Forward if still in flight.
                slot.cert_view = view
                slot.cert = tuple(sorted(votes.items()))[: self.config.quorum]
                batch = slot.batch()
                if (batch is not None and len(batch.involved) > 1
                        and slot.locked and not slot.executed):
                    ring.send_forward(self, slot)
            return
        slot.committed = True
        slot.digest = digest
        slot.cert_view = view
        slot.cert = tuple(sorted(votes.items()))[: self.config.quorum]
        slot.proposer = self.config.primary_index(view)
        if digest != core.null_digest_for(slot.k):
            self.digest_k.setdefault(digest, slot.k)
        else:
            slot.is_null = True
        # Losing proposals die with the slot, not with their batch: unbind
        # them so a batch displaced by a null decision (or by a competing
        # proposal after a view change) can be proposed again in a new slot.
        for d in {*slot.accepted.values(), *slot.batches}:
            if d != digest and self.digest_k.get(d) == slot.k:
                del self.digest_k[d]
        if not slot.is_null and slot.batch() is None:
            self._recover_batch(slot)
        self.pending_requests.pop(digest, None)
        self.local_nudges.pop(digest, None)
        self.cancel_timer("local", digest)
        self.note("committed", k=slot.k, d=digest, v=view)
        self._drain_locks()

    # --- locking and execution ----------------------------------------------

    def _lockable(self, keys: set[str], digest: bytes) -> bool:
        return all(self.locks.get(key, digest) == digest for key in keys)

    def _drain_locks(self) -> None:
        """Advance the lock high-water: the slot at k_max+1 locks when its
        keys are free, then executes (single-shard) or forwards (cross-shard).
        A conflict parks it and stalls everything behind it."""
        while True:
            slot = self.slots.get(self.k_max + 1)
            if slot is None or not slot.committed or slot.locked:
                return
            if slot.is_null:
                slot.locked = True
                self.k_max += 1
                self._mark_executed(slot, ())
                continue
            batch = slot.batch()
            if batch is None:
                batch = self._recover_batch(slot)
            if batch is None:
                return  # committed by observation only; checkpoint will fill
            keys = batch.lock_keys(self.rid.shard)
            if not self._lockable(keys, slot.digest):
                self.note("parked", k=slot.k, d=slot.digest)
                return
            for key in sorted(keys):
                self.locks[key] = slot.digest
            slot.locked = True
            self.k_max += 1
            self.note("locked", k=slot.k, d=slot.digest)
            st = self.cst.get(slot.digest)
            if len(batch.involved) == 1:
                writes = self._apply_fragment(batch, {})
                self._release_locks(slot)
                self._finish_execution(slot, writes)
                self._respond(slot, ((self.rid.shard, writes),))
            elif st is not None and st.execute_fired and st.pending_sigma is not None:
                # The execute rotation already reached this shard while this
                # replica lagged; no point forwarding, execute directly.
                sigma = st.pending_sigma
                st.pending_sigma = None
                self._execute_cst(slot, sigma)
            else:
                ring.send_forward(self, slot)

    def _usable_pending_preprepare(self, st: ring.DigestState):
        """Return the buffered proposal if it is still for the current view.
        A view change voids a buffered proposal (its votes can no longer form
        a quorum), so drop it and let the current primary re-propose."""
        pp = st.pending_preprepare
        if pp is None:
            return None
        if pp.view == self.view and not self.in_viewchange:
            return pp
        st.pending_preprepare = None
        self.note("buffered_proposal_voided", k=pp.k, v=pp.view)
        return None

    def _recover_batch(self, slot: Slot) -> core.Batch | None:
        """A slot can commit on votes alone when the proposal itself was
        lost. The batch content is digest-bound, so it can be adopted from
        any other place it legitimately arrived: the cross-shard aggregation
        state (Forwards carry it) or a stored client request."""
        st = self.cst.get(slot.digest)
        if (st is not None and st.batch is not None
                and st.batch.digest == slot.digest):
            slot.batches[slot.digest] = st.batch
            return st.batch
        req = self.pending_requests.get(slot.digest)
        if req is not None and req.batch.digest == slot.digest:
            slot.batches[slot.digest] = req.batch
            return req.batch
        return None

    def _release_locks(self, slot: Slot) -> None:
        for key in [k for k, d in self.locks.items() if d == slot.digest]:
            del self.locks[key]

    def _apply_fragment(self, batch: core.Batch, sigma_in: dict) -> tuple:
        self._out.busy_us += len(batch.txns) * self.cost.per_txn_execute_us
        writes: list[tuple[str, str]] = []
        shard = self.rid.shard
        for txn in batch.txns:
            for w in txn.writes:
                if w.shard != shard:
                    continue
                if w.dep_shard and w.dep_shard != shard:
                    upstream = sigma_in.get(w.dep_shard)
                    if upstream is None or w.dep_key not in upstream:
                        raise ProtocolViolation(
                            f"dependency {w.dep_shard}:{w.dep_key} missing"
                        )
                    value = upstream[w.dep_key]
                elif w.dep_shard == shard:
                    value = self.store.get(w.dep_key, "")
                else:
                    value = w.value
                self.store[w.key] = value
                writes.append((w.key, value))
        return tuple(writes)

    def _finish_execution(self, slot: Slot, writes: tuple) -> None:
        self._mark_executed(slot, writes)

    def _mark_executed(self, slot: Slot, writes: tuple) -> None:
        slot.executed = True
        slot.writes = writes
        self.executed_digests.add(slot.digest)
        self.exec_history[slot.k] = slot.digest
        batch = slot.batch()
        self.note("executed", k=slot.k, d=slot.digest,
                  txns=len(batch.txns) if batch else 0)
        self._append_ready()
        self._advance_watermark()

    def _append_ready(self) -> None:
        """Extend the hash chain in strict sequence order. Execution may run
        ahead of a still-travelling cross-shard batch; the chain waits for it
        so every replica of a shard appends identical blocks."""
        while True:
            slot = self.slots.get(self.chain_next)
            if slot is None or not slot.executed:
                return
            if not slot.is_null:
                batch = slot.batch()
                self.ledger.append_batch(batch, slot.proposer)
                self.note("block", k=slot.k, d=slot.digest,
                          pos=self.ledger.head().k)
            self.chain_next += 1

    def _execute_cst(self, slot: Slot, sigma) -> None:
        """Execute this shard's fragment during the execute rotation and pass
        the grown result set to the next shard."""
        batch = slot.batch()
        sigma_in = {shard: dict(writes) for shard, writes in sigma}
        writes = self._apply_fragment(batch, sigma_in)
        self._release_locks(slot)
        self._finish_execution(slot, writes)
        sigma_out = tuple(sigma) + ((self.rid.shard, writes),)
        self.cancel_timer("local", slot.digest)
        self.cancel_timer("remote", slot.digest)
        self.cancel_timer("transmit", slot.digest)
        # Fresh retry budget for the Execute leg; the Forward leg may have
        # consumed the old one entirely while the rotation was stalled.
        slot.retx = 0
        ring.send_execute(self, slot, sigma_out)
        self._drain_locks()

    def _respond(self, slot: Slot, sigma) -> None:
        batch = slot.batch()
        if batch is None or slot.responded:
            return
        slot.responded = True
        resp = core.Response(self.rid, self.view, slot.k, slot.digest,
                             tuple(sigma))
        resp = crypto.authenticate(self.ks, resp, self.rid, batch.client)
        self.responses[batch.client] = resp
        self.send_raw(resp, batch.client)
        self.note("respond", client=batch.client, d=slot.digest, k=slot.k)

    # --- cross-shard quorum callbacks (from the ring module) -----------------

    def on_forward_quorum(self, digest: bytes, st: ring.DigestState) -> None:
        if digest in self.executed_digests:
            return
        k = self.digest_k.get(digest)
        involved = st.batch.involved
        first = core.first_in_ring(self.config, involved)
        if k is not None:
            slot = self.slots.get(k)
            if slot is None or slot.executed:
                return
            if first != self.rid.shard:
                if slot.committed and not slot.locked:
                    # The slot committed on votes alone before the batch
                    # arrived; the Forward carries it, so the lock queue may
                    # be able to advance now.
                    self._drain_locks()
                return
            if slot.locked:
                # Wrap-around: every involved shard holds locks; execution
                # starts here with an empty result set.
                self.note("rotation_two", d=digest, k=slot.k)
                self._execute_cst(slot, ())
            else:
                # Committed but parked behind the lock high-water; retry
                # after the queue drains.
                st.pending_wrap = True
            return
        if first == self.rid.shard:
            # This shard initiated the batch but this replica has no slot for
            # it (it was in the dark); hold until a checkpoint catches it up.
            st.pending_wrap = True
            return
        pp = self._usable_pending_preprepare(st)
        if pp is not None:
            st.pending_preprepare = None
            self._accept_preprepare(pp, from_newview=False, broadcast=False)
            return
        if self.is_primary() and not self.in_viewchange:
            self._assign_and_propose(st.batch)
        else:
            self.start_timer("local", digest, self.timers.local_us)

    def on_execute_quorum(self, digest: bytes, st: ring.DigestState,
                          sigma) -> None:
        k = self.digest_k.get(digest)
        slot = self.slots.get(k) if k is not None else None
        if slot is None or not slot.committed:
            st.pending_sigma = sigma
            return
        batch = slot.batch()
        if batch is None:
            st.pending_sigma = sigma
            return
        first = core.first_in_ring(self.config, batch.involved)
        if slot.executed:
            if first == self.rid.shard:
                self.cancel_timer("transmit", digest)
                self._respond(slot, sigma)
            return
        if slot.locked:
            self._execute_cst(slot, sigma)
        else:
            st.pending_sigma = sigma

    # --- timers ---------------------------------------------------------------

    def _on_local_timeout(self, digest: bytes) -> None:
        k = self.digest_k.get(digest)
        slot = self.slots.get(k) if k is not None else None
        if slot is not None and slot.committed:
            return
        if not self.in_viewchange and self._nudge(digest, slot):
            return
        self.note("local_timeout", d=digest)
        self.start_view_change(reason="local")

    def _nudge(self, digest: bytes, slot: Slot | None) -> bool:
        """Progress on this digest stalled: before blaming the primary with a
        view change, re-broadcast this replica's own contribution a couple of
        times. Under lossy links the missing piece is usually one dropped
        vote, and peers answer re-sent votes with their own (_echo_votes), so
        a nudge is usually enough and far cheaper than rotating the primary."""
        nudges = self.local_nudges.get(digest, 0)
        if nudges >= 2:
            return False
        self.local_nudges[digest] = nudges + 1
        if slot is not None and slot.accepted.get(self.view) == digest:
            if self.is_primary() and slot.batch() is not None:
                pp = core.Preprepare(self.rid, self.view, slot.k,
                                     slot.batch(), digest)
                self.broadcast_macced(pp)
            self.broadcast_macced(core.Prepare(self.rid, self.view, slot.k,
                                               digest))
            if (self.view, digest) in slot.sent_commit:
                commit = core.Commit(self.rid, self.view, slot.k, digest)
                self.broadcast_signed(commit)
        else:
            req = self.pending_requests.get(digest)
            if req is not None:
                dst = ReplicaId(self.rid.shard,
                                self.config.primary_index(self.view))
                if dst != self.rid:
                    self.send_raw(req, dst)
        self.note("nudge", d=digest, n=nudges + 1)
        self.start_timer("local", digest, self.timers.local_us)
        return True

    def _on_rvbuf_timeout(self, digest: bytes) -> None:
        st = self.cst.get(digest)
        if st is None:
            return
        st.remote_buffer_armed = False
        if (not st.remote_fired
                and len(st.remote_senders) >= self.config.faults + 1
                and digest in self.digest_k):
            st.remote_fired = True
            self.note("remote_viewchange", d=digest)
            self.start_view_change(reason="remote")
        else:
            st.remote_senders.clear()
            self.note("remoteview_dropped", d=digest)

    def _on_transmit_timeout(self, digest: bytes) -> None:
        k = self.digest_k.get(digest)
        if k is None:
            return
        slot = self.slots.get(k)
        if slot is None:
            return
        if slot.retx >= self.timers.max_retransmit:
            return
        batch = slot.batch()
        if batch is None:
            return
        if slot.executed:
            first = core.first_in_ring(self.config, batch.involved)
            if first == self.rid.shard and slot.responded:
                return
            msg, dst = slot.execute_msg, slot.execute_dst
        else:
            if not slot.locked:
                return
            msg, dst = slot.forward_msg, slot.forward_dst
        if msg is None:
            return
        slot.retx += 1
        self.send_raw(msg, dst, retx=True)
        self.note("retransmit", d=digest, kind=msg.kind, n=slot.retx)
        # Exponential backoff: later retries are spaced out so the fixed
        # retry budget covers a long window instead of burning out early.
        self.start_timer("transmit", digest,
                         self.timers.transmit_us * len(batch.involved)
                         * (2 ** min(slot.retx, 3)))

    def on_stuck_predecessor(self, digest: bytes, sender: ReplicaId) -> None:
        """A predecessor keeps retransmitting a Forward this replica already
        processed end to end: the predecessor missed the Execute leg that
        would let it finish.  Answer with the cached Execute if it was the
        one addressed to that very replica."""
        k = self.digest_k.get(digest)
        slot = self.slots.get(k) if k is not None else None
        if slot is None or not slot.executed or slot.execute_msg is None:
            return
        if slot.execute_dst != sender:
            return
        if slot.replays >= self.timers.max_retransmit:
            return
        slot.replays += 1
        self.send_raw(slot.execute_msg, sender, retx=True)
        self.note("execute_replayed", d=digest, k=slot.k)

    # --- checkpoints ------------------------------------------------------------

    def _advance_watermark(self) -> None:
        while True:
            slot = self.slots.get(self.watermark + 1)
            if slot is None or not slot.executed:
                break
            self.watermark += 1
        period = self.config.checkpoint_period
        while self.watermark >= self.last_ckpt_emitted + period:
            self._emit_checkpoint(self.last_ckpt_emitted + period)

    def _checkpoint_entry(self, k: int) -> core.CheckpointEntry:
        slot = self.slots[k]
        return core.CheckpointEntry(
            k=k,
            digest=slot.digest,
            batch=slot.batch(),
            cert_view=slot.cert_view,
            cert=slot.cert,
            executed=True,
            writes=slot.writes,
        )

    @staticmethod
    def _entries_content_digest(entries) -> bytes:
        # Certificates differ between replicas (each keeps the quorum it saw
        # first), so the matching key covers only replica-independent fields.
        blank = [replace(e, cert_view=0, cert=()) for e in entries]
        return core.digest_bytes(
            b"".join(codec._enc_checkpoint_entry(e) for e in blank)
        )

    def _emit_checkpoint(self, boundary: int) -> None:
        entries = tuple(
            self._checkpoint_entry(k)
            for k in range(self.last_ckpt_emitted + 1, boundary + 1)
        )
        self.last_ckpt_emitted = boundary
        content = self._entries_content_digest(entries)
        msg = core.Checkpoint(self.rid, boundary, content, entries)
        self.broadcast_macced(msg)
        self.note("checkpoint_emit", boundary=boundary)
        self._record_checkpoint(boundary, content, entries, self.rid.index)

    def _on_checkpoint(self, msg: core.Checkpoint) -> None:
        if msg.boundary <= self.last_stable:
            return
        content = self._entries_content_digest(msg.entries)
        if content != msg.entries_digest:
            self.note("drop_digest_mismatch", kind="checkpoint")
            return
        self._record_checkpoint(msg.boundary, content, msg.entries,
                                msg.sender.index)

    def _record_checkpoint(self, boundary: int, content: bytes, entries,
                           index: int) -> None:
        key = (boundary, content)
        votes = self.ckpt_votes.setdefault(key, set())
        votes.add(index)
        if entries:
            self.ckpt_entries.setdefault(key, tuple(entries))
        if len(votes) < self.config.faults + 1 or boundary <= self.last_stable:
            return
        self.note("checkpoint_stable", boundary=boundary)
        if self.watermark < boundary:
            self._adopt_checkpoint(boundary, self.ckpt_entries[key])
        self.last_stable = boundary
        self._truncate(boundary)

    def _adopt_checkpoint(self, boundary: int, entries) -> None:
        self.note("adopt", boundary=boundary)
        for entry in entries:
            slot = self._slot(entry.k)
            if slot.executed:
                continue
            if entry.batch is None:
                slot.is_null = True
                slot.digest = entry.digest
                slot.committed = True
                slot.locked = True
                self._mark_executed(slot, ())
                continue
            if entry.digest != entry.batch.digest or not crypto.verify_certificate(
                self.ks, self.config, self.rid.shard, entry.cert_view,
                entry.k, entry.digest, entry.cert,
            ):
                self.note("violation", what="bad_checkpoint_entry", k=entry.k)
                return
            if slot.locked:
                self._release_locks(slot)
            slot.committed = True
            slot.digest = entry.digest
            slot.batches[entry.digest] = entry.batch
            slot.cert = entry.cert
            slot.cert_view = entry.cert_view
            slot.proposer = self.config.primary_index(entry.cert_view)
            slot.locked = True
            self.digest_k[entry.digest] = entry.k
            for key, value in entry.writes:
                self.store[key] = value
            self.cancel_timer("local", entry.digest)
            self._mark_executed(slot, entry.writes)
        if self.k_max < boundary:
            self.k_max = boundary
        self.next_k = max(self.next_k, boundary + 1)
        self._drain_locks()
        self._reeval_pending()

    def _truncate(self, boundary: int) -> None:
        for k in [k for k in self.slots if k <= boundary]:
            slot = self.slots[k]
            if not slot.executed or k >= self.chain_next:
                continue
            batch = slot.batch()
            if (batch is not None and len(batch.involved) > 1
                    and not slot.responded
                    and core.first_in_ring(self.config, batch.involved)
                    == self.rid.shard):
                # Still waiting for the wrap-around result set to answer the
                # client; keep the slot alive past the stable boundary.
                continue
            self.digest_k.pop(slot.digest, None)
            self.cst.pop(slot.digest, None)
            del self.slots[k]
        self.ckpt_votes = {
            key: v for key, v in self.ckpt_votes.items() if key[0] > boundary
        }
        self.ckpt_entries = {
            key: v for key, v in self.ckpt_entries.items() if key[0] > boundary
        }

    def _reeval_pending(self) -> None:
        """Retry buffered work that earlier state blocked: held preprepares,
        quorums that fired before their slot existed, wrap-around signals."""
        for digest in list(self.cst):
            st = self.cst.get(digest)
            if st is None or st.batch is None:
                continue
            if digest in self.executed_digests:
                continue
            if st.pending_wrap and digest in self.digest_k:
                st.pending_wrap = False
                self.on_forward_quorum(digest, st)
            if st.pending_sigma is not None and digest in self.digest_k:
                slot = self.slots.get(self.digest_k[digest])
                if slot is not None and slot.locked and not slot.executed:
                    sigma = st.pending_sigma
                    st.pending_sigma = None
                    self._execute_cst(slot, sigma)
            if (st.forward_fired and digest not in self.digest_k
                    and self._usable_pending_preprepare(st) is None
                    and self.is_primary() and not self.in_viewchange
                    and core.first_in_ring(self.config, st.batch.involved)
                    != self.rid.shard):
                self._assign_and_propose(st.batch)

    # --- view changes -------------------------------------------------------

    def _prepared_entries(self) -> tuple[core.PreparedEntry, ...]:
        entries = []
        for k in sorted(self.slots):
            if k <= self.last_stable:
                continue
            slot = self.slots[k]
            best: tuple[int, bytes] | None = None
            if slot.committed:
                best = (slot.cert_view, slot.digest)
            for (view, digest), votes in slot.prepare_votes.items():
                if (len(votes) >= self.config.quorum
                        and slot.accepted.get(view) == digest):
                    if best is None or view > best[0]:
                        best = (view, digest)
            if best is not None:
                view, digest = best
                entries.append(core.PreparedEntry(
                    k, view, digest, slot.batches.get(digest)
                ))
        return tuple(entries)

    def start_view_change(self, reason: str = "local",
                          target: int | None = None) -> None:
        if target is None:
            target = self.view + 1
        if self.in_viewchange and target <= self.vc_target:
            return
        self.in_viewchange = True
        self.vc_target = target
        self.note("vc_start", target=target, reason=reason)
        vc = core.ViewChange(self.rid, target, self.last_stable,
                             self._prepared_entries())
        signed = self.broadcast_signed(vc)
        self._record_viewchange(signed)
        backoff = self.timers.viewchange_us * (2 ** min(self.vc_attempts, 6))
        self.start_timer("viewchange", b"vc", backoff)

    def _on_viewchange(self, msg: core.ViewChange) -> None:
        if msg.new_view <= self.view:
            # The sender is trying to leave a view this replica's group has
            # already left behind. Hand it the NewView that got us here so it
            # can catch up instead of escalating alone.
            self._resend_newview(msg.sender)
            return
        self._record_viewchange(msg)

    def _resend_newview(self, dst: ReplicaId) -> None:
        if self.last_newview is None:
            return
        if self.newview_resends >= self.timers.max_retransmit * self.config.replicas:
            return
        self.newview_resends += 1
        self.send_raw(self.last_newview, dst, retx=True)
        self.note("newview_resent", v=self.view, dst=str(dst))

    def _push_commits(self, index: int) -> None:
        """Relay stored commit certificates to one stalled peer. The cert
        signatures verify whoever re-sends them, so rebuilding the original
        Commit messages gives the peer the quorum it is missing without this
        replica authoring any new vote."""
        dst = ReplicaId(self.rid.shard, index)
        pushed = 0
        for k in sorted(self.slots):
            slot = self.slots[k]
            if not slot.committed or slot.is_null or not slot.cert:
                continue
            count = slot.echoes.get(index, 0)
            if count >= 2 * self.config.replicas:
                continue
            slot.echoes[index] = count + 1
            for idx, sig in slot.cert:
                commit = core.Commit(ReplicaId(self.rid.shard, idx),
                                     slot.cert_view, slot.k, slot.digest, sig)
                self.send_raw(commit, dst, retx=True)
            pushed += 1
        if pushed:
            self.note("certs_pushed", dst=index, slots=pushed)

    def _record_viewchange(self, msg: core.ViewChange) -> None:
        votes = self.vc_votes.setdefault(msg.new_view, {})
        votes.setdefault(msg.sender.index, msg)
        # Join rule: f+1 distinct replicas want out of every view this replica
        # is willing to stay in. Jump to the smallest target above its own
        # floor; counting votes across targets (not per target) is what lets
        # stragglers converge instead of leapfrogging each other forever.
        floor = self.vc_target if self.in_viewchange else self.view
        above: set[int] = set()
        best = None
        for v, vs in self.vc_votes.items():
            if v > floor:
                senders = set(vs) - {self.rid.index}
                if senders:
                    above |= senders
                    if best is None or v < best:
                        best = v
        if best is not None and len(above) >= self.config.faults + 1:
            self.start_view_change(reason="join", target=best)
        elif not self.in_viewchange and msg.new_view > self.view:
            # Nobody here wants that view change: the sender is usually a
            # straggler missing a commit the rest of the shard has. Hand it
            # the stored certificates so it can finish instead of escalating.
            self._push_commits(msg.sender.index)
        votes = self.vc_votes.get(msg.new_view, {})
        if (len(votes) >= self.config.quorum
                and self.config.primary_index(msg.new_view) == self.rid.index
                and msg.new_view > self.view
                and msg.new_view >= self.vc_target):
            self._build_newview(msg.new_view)

    def _build_newview(self, new_view: int) -> None:
        votes = self.vc_votes[new_view]
        chosen = tuple(votes[i] for i in sorted(votes))[: self.config.quorum]
        max_stable, proposals = select_newview_proposals(
            self.config, chosen, new_view, self.rid
        )
        msg = core.NewView(self.rid, new_view, chosen, proposals)
        signed = self.broadcast_signed(msg)
        self.note("newview_sent", v=new_view)
        self._apply_newview(signed)

    def _on_newview(self, msg: core.NewView) -> None:
        if msg.new_view <= self.view:
            return
        if msg.new_view < self.vc_target:
            # Installing a view below the announced target would break the
            # promise this replica's ViewChange made; anything it prepared
            # since that broadcast would be invisible to the old view.
            self.note("drop_below_target", kind="newview", v=msg.new_view)
            return
        if msg.sender.index != self.config.primary_index(msg.new_view):
            self.note("drop_not_primary", kind="newview")
            return
        senders = {vc.sender.index for vc in msg.view_changes}
        if len(senders) < self.config.quorum:
            self.note("drop_bad_justification", kind="newview")
            return
        for vc in msg.view_changes:
            if vc.new_view != msg.new_view or not crypto.verify_auth(
                self.ks, vc, self.rid
            ):
                self.note("drop_bad_justification", kind="newview")
                return
        _, expected = select_newview_proposals(
            self.config, msg.view_changes, msg.new_view, msg.sender
        )
        carried = tuple(
            (pp.k, pp.digest, pp.batch is None) for pp in msg.preprepares
        )
        recomputed = tuple(
            (pp.k, pp.digest, pp.batch is None) for pp in expected
        )
        if carried != recomputed:
            self.note("drop_bad_justification", kind="newview")
            self.start_view_change(reason="bad_newview",
                                   target=msg.new_view + 1)
            return
        self._apply_newview(msg)

    def _apply_newview(self, msg: core.NewView) -> None:
        self.view = msg.new_view
        self.in_viewchange = False
        self.vc_attempts = 0
        self.vc_target = self.view
        self.last_newview = msg
        self.newview_resends = 0
        self.local_nudges.clear()
        self.cancel_timer("viewchange", b"vc")
        self.note("newview", v=self.view)
        self.vc_votes = {v: m for v, m in self.vc_votes.items()
                         if v > self.view}
        max_k = max([self.last_stable]
                    + [vc.last_stable for vc in msg.view_changes]
                    + [pp.k for pp in msg.preprepares])
        # Restart assignment right after the carried history.  A proposal the
        # new view does not carry can never commit (every replica that could
        # vote for it has moved on), so its slot must be reassignable or it
        # would stay an unfillable hole ahead of the execution watermark.
        self.next_k = max_k + 1
        # Digest-to-slot bindings from proposals the new view does not carry
        # forward are void (e.g. an equivocating primary's forgeries); clear
        # them so the batches can be proposed afresh.
        reproposed = {(pp.k, pp.digest) for pp in msg.preprepares}
        for k, slot in self.slots.items():
            if k <= self.last_stable or slot.committed:
                continue
            for d in set(slot.accepted.values()):
                if (k, d) not in reproposed and self.digest_k.get(d) == k:
                    del self.digest_k[d]
        for pp in msg.preprepares:
            self._accept_preprepare(pp, from_newview=True, broadcast=False)
        held = [pp for (v, _), pp in self.future_pp.items() if v == self.view]
        self.future_pp = {key: pp for key, pp in self.future_pp.items()
                          if key[0] > self.view}
        for pp in sorted(held, key=lambda p: p.k):
            self._on_preprepare(pp)
        self._redrive_requests()
        # Re-arm the watchdog for every cross-shard batch still undecided
        # here: the view change consumed the old local timers, and a batch
        # nobody is watching can stall a shard for good.
        for digest, st in self.cst.items():
            if not st.forward_fired or digest in self.executed_digests:
                continue
            k = self.digest_k.get(digest)
            slot = self.slots.get(k) if k is not None else None
            if slot is None or not slot.committed:
                self.start_timer("local", digest, self.timers.local_us)
        if self.is_primary():
            self._reeval_pending()

    def _redrive_requests(self) -> None:
        """After a view change, push requests the old primary sat on to the
        new one (or propose them, if that is now this replica's job)."""
        for digest, req in list(self.pending_requests.items()):
            if digest in self.digest_k or digest in self.executed_digests:
                del self.pending_requests[digest]
                continue
            if self.is_primary():
                self._assign_and_propose(req.batch)
            else:
                dst = ReplicaId(self.rid.shard,
                                self.config.primary_index(self.view))
                self.send_raw(req, dst)
                self.start_timer("local", digest, self.timers.local_us)

    # --- inspection helpers ---------------------------------------------------

    def executed_sequence(self) -> list[tuple[int, str]]:
        """(k, digest hex) for every slot this replica ever executed, in
        sequence order; used by the run checkers."""
        return [(k, self.exec_history[k].hex())
                for k in sorted(self.exec_history)]


def select_newview_proposals(config: core.SystemConfig, vcs, new_view: int,
                             sender: ReplicaId):
    """Deterministic reproposal set for a new view: for every sequence number
    above the highest stable boundary, the prepared entry with the highest
    view wins (batch-bearing copies preferred); gaps become null proposals."""
    max_stable = max(vc.last_stable for vc in vcs)
    best: dict[int, core.PreparedEntry] = {}
    for vc in sorted(vcs, key=lambda v: v.sender.index):
        for e in vc.prepared:
            if e.k <= max_stable:
                continue
            cur = best.get(e.k)
            if (cur is None or e.view > cur.view
                    or (e.view == cur.view and cur.batch is None
                        and e.batch is not None)):
                best[e.k] = e
    max_k = max(best, default=max_stable)
    proposals = []
    for k in range(max_stable + 1, max_k + 1):
        e = best.get(k)
        null_d = core.null_digest_for(k)
        batch = e.batch if e is not None else None
        if e is not None and batch is None and e.digest != null_d:
            # Batchless report (commit observed without the proposal); some
            # other report in the set carries the same digest with its batch
            # whenever a real commit happened, so search for it.
            for vc in vcs:
                for other in vc.prepared:
                    if (other.k == k and other.digest == e.digest
                            and other.batch is not None):
                        batch = other.batch
                        break
                if batch is not None:
                    break
        if e is None or (batch is None and e.digest != null_d):
            proposals.append(core.Preprepare(sender, new_view, k, None, null_d))
        elif batch is None:
            proposals.append(core.Preprepare(sender, new_view, k, None, null_d))
        else:
            proposals.append(core.Preprepare(sender, new_view, k, batch, e.digest))
    return max_stable, tuple(proposals)
