"""Recovery mechanisms, each driven end to end through the simulator:
primary replacement, retransmission, checkpoint catch-up, and the
cross-shard complaint path."""

from ringshard import core, scenario, verify

from conftest import run_scenario


def make_fault(kind, shard, index, **kw):
    return scenario.FaultSpec(kind=kind, shard=shard, index=index, **kw)


def test_silent_primary_replaced_by_view_change():
    res, sim, spec, registry, metrics = run_scenario(
        shards=1, txns=200, clients=4, seed=11, deadline_s=300,
        fault_specs=(make_fault("silent", 1, 0, at_ms=200),))
    assert res.all_acked()
    assert res.counters.get("note_newview", 0) > 0
    assert verify.run_all(res, registry) == []
    # the shard settled on a non-initial primary
    views = {rep.view for rid, rep in res.replicas.items()
             if rid.shard == 1 and rid not in res.faulty}
    assert all(v >= 1 for v in views)


def test_lost_forwards_recovered_by_retransmission():
    """Every Forward of one hop dropped once (partition window shorter than
    the retransmit interval): the origin's transmit timer re-sends and the
    batch completes with no view change at the receiving shard."""
    part = scenario.PartitionSpec(start_ms=0, end_ms=700, src_shards=(1,),
                                  dst_shards=(2,), kinds=("forward",))
    res, sim, spec, registry, metrics = run_scenario(
        shards=2, txns=30, clients=1, seed=12, cross_pct=100.0,
        first_shard=1, deadline_s=300, partitions=(part,))
    assert res.all_acked()
    assert res.counters.get("retransmissions", 0) > 0
    assert res.counters.get("partitioned", 0) > 0
    assert verify.run_all(res, registry) == []


def test_dark_replica_catches_up_from_checkpoints():
    """A primary that excludes one replica from its proposals cannot stop it
    from executing: commits still arrive from the other replicas, and stable
    checkpoints replay the missing batches."""
    res, sim, spec, registry, metrics = run_scenario(
        shards=1, txns=150, clients=2, seed=13, checkpoint_period=10,
        deadline_s=300,
        fault_specs=(make_fault("keep_dark", 1, 0, dark=(3,)),))
    assert res.all_acked()
    dark = res.replicas[core.ReplicaId(1, 3)]
    assert res.counters.get("note_adopt", 0) > 0
    assert res.counters.get("note_checkpoint_stable", 0) > 0
    # caught up at least to the last stable boundary, with a valid chain
    assert dark.last_stable >= 10
    assert max(dark.exec_history) >= dark.last_stable
    assert dark.ledger.verify_chain()
    assert verify.run_all(res, registry) == []


def test_missing_forward_quorum_triggers_remote_view_change():
    """If fewer than f+1 Forwards reach the next shard, its remote timers
    expire and the complaint drives a view change at the origin shard, whose
    new primary re-drives the handoff."""
    part = scenario.PartitionSpec(start_ms=0, end_ms=3000, src_shards=(1,),
                                  dst_shards=(2,), dst_indices=(1, 2, 3),
                                  kinds=("forward",))
    res, sim, spec, registry, metrics = run_scenario(
        shards=2, txns=30, clients=1, seed=14, cross_pct=100.0,
        first_shard=1, deadline_s=300, partitions=(part,))
    assert res.all_acked()
    assert res.counters.get("send_remoteview", 0) >= 2
    assert res.counters.get("note_remote_viewchange", 0) >= 1
    assert res.counters.get("note_newview", 0) >= 1
    origin_views = {rep.view for rid, rep in res.replicas.items()
                    if rid.shard == 1}
    assert max(origin_views) >= 1
    assert verify.run_all(res, registry) == []
