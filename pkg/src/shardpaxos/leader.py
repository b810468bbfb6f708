"""Leader roles: the primary sequencer and the backup that runs prepare rounds.

The primary owns round 0. Every instance is implicitly promised to round 0 at
initialization, so the primary skips the prepare phase entirely: a client
REQUEST is stamped with the next instance number for its partition and
multicast to the acceptors as a PHASE2A. A backup leader owns a reserved
nonzero round and must win a PHASE1A/PHASE1B majority for an instance before
it may send PHASE2A.

State is one instance counter per partition plus, for backups, a pending
table tracking prepare progress per (pid, inst). Handlers are deterministic:
the same state and input always produce the same actions and successor state.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field

from .actions import Action, Group, SafetyViolation, multicast
from .wire import Envelope, EnvelopeError, MsgType, PaxosMessage, decode_envelope

# Backup rounds escalate by this stride when a stalled instance is re-prepared,
# so every backup's rounds stay disjoint: backup b uses {b, b+16, b+32, ...}.
ROUND_STRIDE = 16


class Role(enum.Enum):
    PRIMARY = "primary"
    BACKUP = "backup"


@dataclass
class PendingProposal:
    rnd: int
    client_value: bytes
    promises: set[int] = field(default_factory=set)
    best_vrnd: int = -1  # -1: no vote reported yet
    best_value: bytes = b""


def _involved_shards(m: PaxosMessage) -> tuple[int, ...]:
    """Partitions a REQUEST touches, from its value envelope.

    Values that do not parse as an envelope are treated as single-shard
    requests for the header pid.
    """
    try:
        env = decode_envelope(m.value)
    except EnvelopeError:
        return (m.pid,)
    if len(env.shards) == 1:
        return (m.pid,)
    return tuple(sorted(set(env.shards)))


class Leader:
    """One leader instance (primary or backup) over P partitions.

    Multi-shard requests are allocated atomically: the leader claims an
    instance in every involved partition before emitting any PHASE2A/PHASE1A,
    so the per-partition orders of any two multi-shard requests never
    contradict each other.
    """

    def __init__(
        self,
        partitions: int,
        *,
        role: Role = Role.PRIMARY,
        reserved_rnd: int = 0,
        acceptors: int = 3,
        device_id: int = 0,
        pending_capacity: int = 2**16,
    ):
        if partitions < 1:
            raise ValueError("need at least one partition")
        if role is Role.PRIMARY and reserved_rnd != 0:
            raise ValueError("primary leader must use round 0")
        if role is Role.BACKUP and reserved_rnd <= 0:
            raise ValueError("backup leader needs a reserved round > 0")
        if acceptors < 1 or acceptors % 2 == 0:
            raise ValueError("acceptor count must be odd and positive")
        self.partitions = partitions
        self.role = role
        self.reserved_rnd = reserved_rnd
        self.majority = acceptors // 2 + 1
        self.device_id = device_id
        self.pending_capacity = pending_capacity
        self.inst_counter = [0] * partitions
        self.pending: dict[tuple[int, int], PendingProposal] = {}
        self.stats: Counter[str] = Counter()
        self.last_drop: str | None = None

    # -- request handling --------------------------------------------------

    def on_request(self, m: PaxosMessage) -> list[Action]:
        self.last_drop = None
        if m.msgtype is not MsgType.REQUEST:
            raise ValueError(f"on_request got {m.msgtype.name}")
        shards = _involved_shards(m)
        if any(pid >= self.partitions for pid in shards):
            self.stats["invalid_partition"] += 1
            self.last_drop = "invalid_partition"
            return []
        if self.role is Role.PRIMARY:
            return self._primary_propose(shards, m.value)
        return self._backup_prepare(shards, m.value)

    def _primary_propose(self, shards: tuple[int, ...], value: bytes) -> list[Action]:
        out = []
        for pid in shards:
            inst = self.inst_counter[pid]
            self.inst_counter[pid] = inst + 1
            out.append(
                multicast(
                    PaxosMessage(
                        MsgType.PHASE2A,
                        inst=inst,
                        rnd=0,
                        swid=self.device_id,
                        pid=pid,
                        value=value,
                    ),
                    Group.ACCEPTORS,
                )
            )
            self.stats["proposed"] += 1
        return out

    def _backup_prepare(self, shards: tuple[int, ...], value: bytes) -> list[Action]:
        if len(self.pending) + len(shards) > self.pending_capacity:
            self.stats["backpressure"] += 1
            self.last_drop = "backpressure"
            return []
        out = []
        for pid in shards:
            inst = self.inst_counter[pid]
            self.inst_counter[pid] = inst + 1
            self.pending[(pid, inst)] = PendingProposal(self.reserved_rnd, value)
            out.append(self._phase1a(pid, inst, self.reserved_rnd))
        return out

    def _phase1a(self, pid: int, inst: int, rnd: int) -> Action:
        self.stats["prepared"] += 1
        return multicast(
            PaxosMessage(
                MsgType.PHASE1A, inst=inst, rnd=rnd, swid=self.device_id, pid=pid
            ),
            Group.ACCEPTORS,
        )

    def fill_gap(self, pid: int, inst: int, attempt: int = 0) -> list[Action]:
        """Re-prepare a stalled instance so replica delivery can move past it.

        Proposes an empty value if the prepare majority reports no prior vote;
        otherwise the discovered value is re-proposed. Each attempt escalates
        the round by ROUND_STRIDE, which keeps rounds unique per backup while
        letting a retry override promises made to an earlier attempt whose
        responses were lost.
        """
        if self.role is not Role.BACKUP:
            raise ValueError("only a backup leader re-proposes stalled instances")
        if pid >= self.partitions:
            raise ValueError(f"partition {pid} out of range")
        rnd = self.reserved_rnd + attempt * ROUND_STRIDE
        self.pending[(pid, inst)] = PendingProposal(rnd, b"")
        self.stats["gap_fill"] += 1
        return [self._phase1a(pid, inst, rnd)]

    # -- prepare responses ---------------------------------------------------

    def on_phase1b(self, m: PaxosMessage) -> list[Action]:
        self.last_drop = None
        if self.role is Role.PRIMARY:
            # Round-0 reservation means the primary never prepares, so any
            # PHASE1B here is stray traffic.
            self.stats["phase1b_at_primary"] += 1
            self.last_drop = "phase1b_at_primary"
            return []
        key = (m.pid, m.inst)
        entry = self.pending.get(key)
        if entry is None:
            self.stats["unknown_instance"] += 1
            self.last_drop = "unknown_instance"
            return []
        if m.rnd != entry.rnd:
            self.stats["stale_round"] += 1
            self.last_drop = "stale_round"
            return []
        if m.swid in entry.promises:
            self.stats["duplicate_promise"] += 1
            return []
        entry.promises.add(m.swid)
        # A promise reports a prior vote when it carries a value. Round-0
        # votes have vrnd == 0, so vrnd alone cannot distinguish "voted at
        # round 0" from "never voted"; the value does.
        if m.value != b"" or m.vrnd > 0:
            if m.vrnd > entry.best_vrnd:
                entry.best_vrnd = m.vrnd
                entry.best_value = m.value
            elif m.vrnd == entry.best_vrnd and m.value != entry.best_value:
                raise SafetyViolation(
                    f"two values at vrnd={m.vrnd} for pid={m.pid} inst={m.inst}: "
                    f"{entry.best_value!r} vs {m.value!r}"
                )
        if len(entry.promises) < self.majority:
            return []
        value = entry.best_value if entry.best_vrnd >= 0 else entry.client_value
        del self.pending[key]
        self.stats["proposed"] += 1
        return [
            multicast(
                PaxosMessage(
                    MsgType.PHASE2A,
                    inst=m.inst,
                    rnd=entry.rnd,
                    swid=self.device_id,
                    pid=m.pid,
                    value=value,
                ),
                Group.ACCEPTORS,
            )
        ]

    # -- catch-up ------------------------------------------------------------

    def sync_decided(self, decided: dict[int, int]) -> None:
        """Advance instance counters past instances known to be chosen."""
        for pid, inst in decided.items():
            if pid < self.partitions and inst + 1 > self.inst_counter[pid]:
                self.inst_counter[pid] = inst + 1
        for pid, inst in list(self.pending):
            if inst <= decided.get(pid, -1):
                # Chosen by someone else while the prepare was in flight; a
                # client value parked here is re-submitted by its proposer.
                del self.pending[(pid, inst)]

    def on_message(self, m: PaxosMessage) -> list[Action]:
        if m.msgtype is MsgType.REQUEST:
            return self.on_request(m)
        if m.msgtype is MsgType.PHASE1B:
            return self.on_phase1b(m)
        self.stats["unhandled_msgtype"] += 1
        self.last_drop = "unhandled_msgtype"
        return []
