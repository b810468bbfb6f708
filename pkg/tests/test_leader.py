import pytest

from shardpaxos.actions import Group, SafetyViolation
from shardpaxos.leader import Leader, Role
from shardpaxos.wire import (
    Envelope,
    MsgType,
    PaxosMessage,
    encode_envelope,
    make_req_id,
)


def request(pid, value=b"v", shards=None, req_id=1):
    env = Envelope(req_id, tuple(shards or (pid,)), value)
    return PaxosMessage(MsgType.REQUEST, pid=pid, value=encode_envelope(env))


def p1b(inst, rnd, vrnd=0, value=b"", swid=1, pid=0):
    return PaxosMessage(
        MsgType.PHASE1B, inst=inst, rnd=rnd, vrnd=vrnd, swid=swid, pid=pid, value=value
    )


def test_primary_stamps_instance_and_increments():
    ld = Leader(partitions=4)
    out = ld.on_request(request(3, b"hello"))
    assert len(out) == 1
    m = out[0].message
    assert m.msgtype is MsgType.PHASE2A
    assert (m.inst, m.rnd, m.pid) == (0, 0, 3)
    assert out[0].target is Group.ACCEPTORS
    assert ld.inst_counter == [0, 0, 0, 1]


def test_per_partition_counters_are_independent():
    ld = Leader(partitions=2)
    insts = []
    for pid in (0, 0, 1):
        insts.append(ld.on_request(request(pid))[0].message.inst)
    assert insts == [0, 1, 0]
    # replay against a plain counter oracle
    oracle = {}
    ld2 = Leader(partitions=8)
    import random

    rng = random.Random(3)
    for _ in range(500):
        pid = rng.randrange(8)
        got = ld2.on_request(request(pid))[0].message.inst
        want = oracle.get(pid, 0)
        assert got == want
        oracle[pid] = want + 1


def test_out_of_range_partition_dropped():
    ld = Leader(partitions=2)
    assert ld.on_request(request(2)) == []
    assert ld.last_drop == "invalid_partition"
    assert ld.inst_counter == [0, 0]


def test_primary_never_prepares_and_drops_phase1b():
    ld = Leader(partitions=1)
    out = ld.on_request(request(0))
    assert all(a.message.msgtype is MsgType.PHASE2A for a in out)
    assert ld.on_phase1b(p1b(0, 1)) == []


def test_backup_requires_positive_round():
    with pytest.raises(ValueError):
        Leader(partitions=1, role=Role.BACKUP, reserved_rnd=0)
    with pytest.raises(ValueError):
        Leader(partitions=1, role=Role.PRIMARY, reserved_rnd=2)


def test_backup_prepares_before_proposing():
    ld = Leader(partitions=1, role=Role.BACKUP, reserved_rnd=1, device_id=7)
    ld.inst_counter[0] = 7
    out = ld.on_request(request(0, b"v"))
    assert len(out) == 1
    m = out[0].message
    assert m.msgtype is MsgType.PHASE1A
    assert (m.inst, m.rnd, m.pid, m.swid) == (7, 1, 0, 7)
    assert ld.inst_counter[0] == 8
    assert (0, 7) in ld.pending


def test_backup_concurrent_pending_instances_tracked_independently():
    ld = Leader(partitions=1, role=Role.BACKUP, reserved_rnd=1)
    req_a, req_b = request(0, b"a"), request(0, b"b")
    ld.on_request(req_a)
    ld.on_request(req_b)
    assert ld.pending[(0, 0)].client_value == req_a.value
    assert ld.pending[(0, 1)].client_value == req_b.value
    # quorum on inst 1 only proposes b
    ld.on_phase1b(p1b(1, 1, swid=1))
    out = ld.on_phase1b(p1b(1, 1, swid=2))
    assert out[0].message.value == req_b.value
    assert out[0].message.inst == 1
    assert (0, 0) in ld.pending


def test_backup_free_choice_when_no_prior_votes():
    ld = Leader(partitions=1, role=Role.BACKUP, reserved_rnd=1, acceptors=3)
    req = request(0, b"client")
    ld.on_request(req)
    assert ld.on_phase1b(p1b(0, 1, swid=1)) == []
    out = ld.on_phase1b(p1b(0, 1, swid=2))
    m = out[0].message
    assert m.msgtype is MsgType.PHASE2A
    assert (m.inst, m.rnd, m.value) == (0, 1, req.value)


def test_backup_selects_highest_vrnd_value():
    ld = Leader(partitions=1, role=Role.BACKUP, reserved_rnd=2, acceptors=3)
    ld.on_request(request(0, b"client"))
    ld.on_phase1b(p1b(0, 2, vrnd=0, value=b"", swid=1))
    out = ld.on_phase1b(p1b(0, 2, vrnd=1, value=b"w", swid=2))
    assert out[0].message.value == b"w"


def test_backup_treats_round0_vote_as_prior_vote():
    # vrnd == 0 with a value means a round-0 vote, not a free slot.
    ld = Leader(partitions=1, role=Role.BACKUP, reserved_rnd=1, acceptors=3)
    ld.on_request(request(0, b"client"))
    ld.on_phase1b(p1b(0, 1, vrnd=0, value=b"w", swid=1))
    out = ld.on_phase1b(p1b(0, 1, vrnd=0, value=b"", swid=2))
    assert out[0].message.value == b"w"


def test_backup_quorum_fires_once():
    ld = Leader(partitions=1, role=Role.BACKUP, reserved_rnd=1, acceptors=3)
    ld.on_request(request(0))
    ld.on_phase1b(p1b(0, 1, swid=1))
    assert ld.on_phase1b(p1b(0, 1, swid=2)) != []
    assert ld.on_phase1b(p1b(0, 1, swid=3)) == []


def test_backup_duplicate_promise_ignored():
    ld = Leader(partitions=1, role=Role.BACKUP, reserved_rnd=1, acceptors=3)
    ld.on_request(request(0))
    ld.on_phase1b(p1b(0, 1, swid=1))
    assert ld.on_phase1b(p1b(0, 1, swid=1)) == []
    assert len(ld.pending[(0, 0)].promises) == 1


def test_backup_stale_round_and_unknown_instance_dropped():
    ld = Leader(partitions=1, role=Role.BACKUP, reserved_rnd=2, acceptors=3)
    ld.on_request(request(0))
    assert ld.on_phase1b(p1b(0, 1, swid=1)) == []
    assert ld.last_drop == "stale_round"
    assert ld.on_phase1b(p1b(5, 2, swid=1)) == []
    assert ld.last_drop == "unknown_instance"


def test_conflicting_equal_vrnd_votes_fail_loudly():
    ld = Leader(partitions=1, role=Role.BACKUP, reserved_rnd=1, acceptors=5)
    ld.on_request(request(0))
    ld.on_phase1b(p1b(0, 1, vrnd=1, value=b"x", swid=1))
    with pytest.raises(SafetyViolation):
        ld.on_phase1b(p1b(0, 1, vrnd=1, value=b"y", swid=2))


def test_sync_decided_advances_counters():
    ld = Leader(partitions=2, role=Role.BACKUP, reserved_rnd=1)
    ld.sync_decided({0: 41})
    assert ld.inst_counter == [42, 0]
    ld.sync_decided({0: 5})
    assert ld.inst_counter == [42, 0]
    out = ld.on_request(request(0))
    assert out[0].message.inst == 42


def test_multi_shard_request_allocates_all_partitions_atomically():
    ld = Leader(partitions=4)
    ld.on_request(request(0))  # pid 0 -> inst 0
    out = ld.on_request(request(1, b"m", shards=(1, 3)))
    assert [(a.message.pid, a.message.inst) for a in out] == [(1, 0), (3, 0)]
    assert ld.inst_counter == [1, 1, 0, 1]
    # all PHASE2As carry the full envelope so replicas see the shard set
    assert out[0].message.value == out[1].message.value


def test_multi_shard_invalid_partition_drops_whole_request():
    ld = Leader(partitions=2)
    assert ld.on_request(request(0, shards=(0, 5))) == []
    assert ld.inst_counter == [0, 0]


def test_backup_backpressure_when_pending_full():
    ld = Leader(
        partitions=1, role=Role.BACKUP, reserved_rnd=1, pending_capacity=2
    )
    ld.on_request(request(0))
    ld.on_request(request(0))
    assert ld.on_request(request(0)) == []
    assert ld.last_drop == "backpressure"
    assert ld.inst_counter == [2]


def test_gap_fill_prepares_exact_instance_without_touching_counter():
    ld = Leader(partitions=1, role=Role.BACKUP, reserved_rnd=1)
    out = ld.fill_gap(0, 9)
    m = out[0].message
    assert (m.msgtype, m.inst, m.rnd) == (MsgType.PHASE1A, 9, 1)
    assert ld.inst_counter == [0]
    # escalation uses a disjoint higher round
    out2 = ld.fill_gap(0, 9, attempt=2)
    assert out2[0].message.rnd == 1 + 2 * 16
    # no prior vote discovered -> proposes the empty filler value
    ld.on_phase1b(p1b(9, 33, swid=1))
    out3 = ld.on_phase1b(p1b(9, 33, swid=2))
    assert out3[0].message.value == b""
