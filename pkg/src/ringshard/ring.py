"""Cross-shard layer: linear communication, aggregation, and rotations.

Cross-shard traffic uses a linear primitive: when shard S hands a batch to
shard U, each replica of S sends one signed message to the replica of U with
the same index, so exactly n messages cross the boundary per hop. A receiver
relays the first sighting of each original sender's copy to its own shard, and
acts once it holds f+1 well-formed copies from distinct original senders with
identical content: with at most f faults, at least one copy is from a
non-faulty sender, and f+1 non-faulty senders guarantee delivery despite f
byzantine receivers.

Three message kinds ride this primitive:

* Forward: a committed batch plus its commit certificate, moving along the
  first rotation. At the first shard on the ring it wraps around, which is the
  signal that every involved shard holds locks and execution may begin.
* Execute: the accumulated fragment results (sigma) moving along the second
  rotation; the wrap back to the first shard triggers the client response.
* RemoteView: a complaint sent backwards along the ring when a shard saw a
  Forward but could not gather f+1 of them before its remote timer expired;
  f+1 distinct complaints make the predecessor shard change its view.

State here is per-digest bookkeeping owned by a replica; the replica module
drives it and supplies locks, sequence numbers, and execution.
"""

from __future__ import annotations

from typing import TYPE_CHECKING

from . import codec, core, crypto

if TYPE_CHECKING:  # pragma: no cover
    from .replica import Replica


class DigestState:
    """Aggregation state for one batch digest at one replica."""

    __slots__ = (
        "batch",
        "origin_shard",
        "forward_senders",
        "forward_fired",
        "forward_msgs",
        "forward_reshares",
        "execute_senders",
        "execute_fired",
        "execute_sigma",
        "execute_msgs",
        "execute_reshares",
        "remote_senders",
        "remote_fired",
        "remote_buffer_armed",
        "relay_counts",
        "remote_armed",
        "remote_resends",
        "pending_preprepare",
        "pending_sigma",
        "pending_wrap",
    )

    def __init__(self) -> None:
        self.batch: core.Batch | None = None
        self.origin_shard = 0
        self.forward_senders: set[int] = set()
        self.forward_fired = False
        self.forward_msgs: dict[int, core.Forward] = {}
        self.forward_reshares = 0
        self.execute_senders: dict[bytes, set[int]] = {}
        self.execute_fired = False
        self.execute_sigma = None
        self.execute_msgs: dict[bytes, dict[int, core.ExecuteMsg]] = {}
        self.execute_reshares = 0
        self.remote_senders: set[int] = set()
        self.remote_fired = False
        self.remote_buffer_armed = False
        self.relay_counts: dict[tuple[str, int], int] = {}
        self.remote_armed = False
        self.remote_resends = 0
        self.pending_preprepare = None
        self.pending_sigma = None
        self.pending_wrap = False


def get_state(rep: "Replica", digest: bytes) -> DigestState:
    st = rep.cst.get(digest)
    if st is None:
        st = DigestState()
        rep.cst[digest] = st
    return st


def _sigma_key(sigma) -> bytes:
    return codec._enc_sigma(sigma)


def on_cross_shard(rep: "Replica", msg, src, retx: bool = False) -> None:
    """Entry point for Forward, Execute, and RemoteView deliveries."""
    direct = isinstance(src, core.ReplicaId) and src.shard != rep.rid.shard
    if direct and src.index != rep.rid.index:
        rep.note("drop_wrong_index", kind=msg.kind, src=str(src))
        return
    if direct and src != msg.sender:
        rep.note("drop_sender_mismatch", kind=msg.kind, src=str(src))
        return
    if not crypto.verify_auth(rep.ks, msg, rep.rid):
        rep.note("drop_bad_auth", kind=msg.kind)
        return

    if msg.kind == "forward":
        _on_forward(rep, msg, direct, retx)
    elif msg.kind == "execute":
        _on_execute(rep, msg, direct, retx)
    else:
        _on_remoteview(rep, msg, direct, retx)


def _relay(rep: "Replica", st: DigestState, msg, direct: bool, retx: bool,
           fired: bool) -> None:
    """Broadcast a directly received cross-shard message inside the shard.

    The first copy from each (kind, original sender) is always relayed.  A
    retransmitted copy is relayed again while the local aggregation for that
    kind is still short of quorum: a straggler's peers may be the only path
    by which the missing distinct senders can still reach it.  Re-relays
    carry the retransmission mark and stay within the same budget."""
    if not direct:
        return
    key = (msg.kind, msg.sender.index)
    count = st.relay_counts.get(key, 0)
    if count > 0 and (fired or not retx or count > rep.timers.max_retransmit):
        return
    st.relay_counts[key] = count + 1
    for peer in rep.peers:
        rep.send_raw(msg, peer, retx=retx)


def _reshare_forward(rep: "Replica", st: DigestState, digest: bytes) -> None:
    """A retransmitted Forward arrived after local quorum: some replica is
    still starved of distinct senders. Re-broadcast the stored quorum so a
    shard-local straggler can assemble f+1 no matter which originals the
    network ate. Rate-capped per digest; the copies are marked as
    retransmissions so fired peers receiving them do not echo unboundedly."""
    if st.forward_reshares >= rep.timers.max_retransmit:
        return
    quorum = rep.config.faults + 1
    chosen = [st.forward_msgs[i] for i in sorted(st.forward_msgs)][:quorum]
    if len(chosen) < quorum:
        return
    st.forward_reshares += 1
    for peer in rep.peers:
        for m in chosen:
            rep.send_raw(m, peer, retx=True)
    rep.note("reshare", d=digest, kind="forward")


def _reshare_execute(rep: "Replica", st: DigestState, digest: bytes) -> None:
    """Same as _reshare_forward for the Execute aggregation: re-broadcast the
    stored f+1 copies of the sigma that won locally."""
    if st.execute_reshares >= rep.timers.max_retransmit:
        return
    msgs = st.execute_msgs.get(_sigma_key(st.execute_sigma), {})
    quorum = rep.config.faults + 1
    chosen = [msgs[i] for i in sorted(msgs)][:quorum]
    if len(chosen) < quorum:
        return
    st.execute_reshares += 1
    for peer in rep.peers:
        for m in chosen:
            rep.send_raw(m, peer, retx=True)
    rep.note("reshare", d=digest, kind="execute")


def _on_forward(rep: "Replica", msg: core.Forward, direct: bool,
                retx: bool) -> None:
    batch = msg.batch
    involved = batch.involved
    if rep.rid.shard not in involved:
        rep.note("drop_not_involved", kind="forward")
        return
    if msg.origin_shard != msg.sender.shard:
        rep.note("drop_bad_origin", kind="forward")
        return
    try:
        expected_prev = core.prev_in_ring(rep.config, involved, rep.rid.shard)
    except ValueError:
        rep.note("drop_malformed", kind="forward")
        return
    if msg.origin_shard != expected_prev:
        rep.note("drop_bad_origin", kind="forward")
        return
    if msg.digest != batch.digest:
        rep.note("drop_digest_mismatch", kind="forward")
        return
    if not crypto.well_formed_batch(rep.ks, rep.config, batch):
        rep.note("drop_malformed", kind="forward")
        return
    if not crypto.verify_certificate(
        rep.ks, rep.config, msg.origin_shard, msg.view, msg.k, msg.digest, msg.cert
    ):
        rep.note("drop_bad_cert", kind="forward")
        return

    st = get_state(rep, msg.digest)
    st.batch = batch
    st.origin_shard = msg.origin_shard
    _relay(rep, st, msg, direct, retx, st.forward_fired)
    st.forward_senders.add(msg.sender.index)

    if st.forward_fired:
        # Quorum already reached here; a retransmitted copy means its sender
        # or a shard-local peer is stuck. Help both: re-share the stored
        # quorum inside the shard, and if the stuck predecessor itself is
        # asking, let the replica answer it with the cached Execute.
        if retx:
            _reshare_forward(rep, st, msg.digest)
            if direct:
                rep.on_stuck_predecessor(msg.digest, msg.sender)
        return

    st.forward_msgs.setdefault(msg.sender.index, msg)

    # A first sighting arms the remote timer: if f+1 matching Forwards do not
    # arrive before it expires, the predecessor shard gets a complaint.
    if not st.remote_armed:
        st.remote_armed = True
        rep.start_timer("remote", msg.digest, rep.timers.remote_us)

    if len(st.forward_senders) >= rep.config.faults + 1:
        st.forward_fired = True
        rep.cancel_timer("remote", msg.digest)
        rep.note("quorum_forward", d=msg.digest, origin=msg.origin_shard)
        rep.on_forward_quorum(msg.digest, st)


def _on_execute(rep: "Replica", msg: core.ExecuteMsg, direct: bool,
                retx: bool) -> None:
    st = get_state(rep, msg.digest)
    batch = st.batch
    if batch is not None and rep.rid.shard not in batch.involved:
        rep.note("drop_not_involved", kind="execute")
        return
    if direct and batch is not None:
        expected_prev = core.prev_in_ring(rep.config, batch.involved, rep.rid.shard)
        if msg.sender.shard != expected_prev:
            rep.note("drop_bad_origin", kind="execute")
            return
    _relay(rep, st, msg, direct, retx, st.execute_fired)
    key = _sigma_key(msg.sigma)
    senders = st.execute_senders.setdefault(key, set())
    senders.add(msg.sender.index)

    if st.execute_fired:
        if retx:
            _reshare_execute(rep, st, msg.digest)
        return

    st.execute_msgs.setdefault(key, {}).setdefault(msg.sender.index, msg)
    if len(senders) >= rep.config.faults + 1:
        st.execute_fired = True
        st.execute_sigma = msg.sigma
        rep.note("quorum_execute", d=msg.digest)
        rep.on_execute_quorum(msg.digest, st, msg.sigma)


def _on_remoteview(rep: "Replica", msg: core.RemoteView, direct: bool,
                   retx: bool) -> None:
    # The complaint names the shard it is about; only that shard acts on it.
    if msg.origin_shard != rep.rid.shard:
        rep.note("drop_not_involved", kind="remoteview")
        return
    if rep.rid.shard not in msg.batch.involved:
        rep.note("drop_not_involved", kind="remoteview")
        return
    if msg.digest != msg.batch.digest:
        rep.note("drop_digest_mismatch", kind="remoteview")
        return
    st = get_state(rep, msg.digest)
    if st.batch is None:
        st.batch = msg.batch
    _relay(rep, st, msg, direct, retx, st.remote_fired)
    st.remote_senders.add((msg.sender.shard, msg.sender.index))
    if st.remote_fired:
        return
    if len(st.remote_senders) >= rep.config.faults + 1:
        if msg.digest in rep.digest_k:
            st.remote_fired = True
            rep.note("remote_viewchange", d=msg.digest)
            rep.start_view_change(reason="remote")
        elif not st.remote_buffer_armed:
            # Complaint about a digest this replica has no slot for: hold it
            # for one remote period, then act or drop (replica.on_timer).
            st.remote_buffer_armed = True
            rep.start_timer("rvbuf", msg.digest, rep.timers.remote_us)


def send_forward(rep: "Replica", slot) -> None:
    """Hand the committed batch to the same-index peer of the next shard."""
    batch = slot.batch()
    involved = batch.involved
    nxt = core.next_in_ring(rep.config, involved, rep.rid.shard)
    msg = core.Forward(
        sender=rep.rid,
        origin_shard=rep.rid.shard,
        view=slot.cert_view,
        k=slot.k,
        batch=batch,
        digest=slot.digest,
        cert=slot.cert,
    )
    msg = crypto.authenticate(rep.ks, msg, rep.rid)
    slot.forward_msg = msg
    slot.forward_dst = core.ReplicaId(nxt, rep.rid.index)
    rep.send_raw(msg, slot.forward_dst)
    rep.note("forward_sent", d=slot.digest, dst_shard=nxt, k=slot.k)
    rep.start_timer(
        "transmit", slot.digest, rep.timers.transmit_us * len(involved)
    )


def send_execute(rep: "Replica", slot, sigma) -> None:
    batch = slot.batch()
    nxt = core.next_in_ring(rep.config, batch.involved, rep.rid.shard)
    msg = core.ExecuteMsg(
        sender=rep.rid,
        origin_shard=rep.rid.shard,
        digest=slot.digest,
        sigma=sigma,
    )
    msg = crypto.authenticate(rep.ks, msg, rep.rid)
    slot.execute_msg = msg
    slot.execute_dst = core.ReplicaId(nxt, rep.rid.index)
    rep.send_raw(msg, slot.execute_dst)
    rep.note("execute_sent", d=slot.digest, dst_shard=nxt)
    rep.start_timer(
        "transmit", slot.digest, rep.timers.transmit_us * len(batch.involved)
    )


def send_remote_view(rep: "Replica", digest: bytes, st: DigestState) -> None:
    """Remote timer expired short of f+1 Forwards: complain backwards."""
    if st.batch is None:
        return
    prev = core.prev_in_ring(rep.config, st.batch.involved, rep.rid.shard)
    msg = core.RemoteView(
        sender=rep.rid,
        origin_shard=prev,
        digest=digest,
        batch=st.batch,
    )
    msg = crypto.authenticate(rep.ks, msg, rep.rid)
    rep.send_raw(msg, core.ReplicaId(prev, rep.rid.index))
    rep.note("remoteview_sent", d=digest, dst_shard=prev)
    # Re-arm: if the predecessor stays silent the complaint repeats, up to
    # the retransmission cap.
    st.remote_resends += 1
    if st.remote_resends <= rep.timers.max_retransmit:
        rep.start_timer("remote", digest, rep.timers.remote_us)
