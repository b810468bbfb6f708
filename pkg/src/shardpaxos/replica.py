"""Replica execution engine: quorum tracking, in-order delivery, trimming,
worker routing, and multi-shard coordination.

A ``ReplicaPartition`` turns PHASE2B streams into a gap-free, in-order
sequence of delivered commands for one partition. An instance is decided when
a majority of distinct acceptors vote for it in the same round; decided
instances are held back until every lower instance has been delivered.
Quorum bookkeeping for an instance is garbage-collected at delivery, so
replica memory stays bounded by the undelivered window.

Routing follows the static rule worker = pid mod workers, which pins each
partition to exactly one worker. Commands spanning several partitions are
delivered once per involved partition and executed exactly once, by the
lowest-id involved worker, after all copies have arrived at the rendezvous.
"""

from __future__ import annotations

import threading
from collections import Counter, deque
from dataclasses import dataclass
from typing import Callable

from .actions import SafetyViolation
from .wire import (
    EnvelopeError,
    MsgType,
    PaxosMessage,
    decode_envelope,
)


@dataclass(frozen=True)
class DeliveredCommand:
    pid: int
    inst: int
    value: bytes  # application payload, envelope stripped
    req_id: int | None = None
    multi_shard: frozenset[int] | None = None


class ReplicaPartition:
    def __init__(
        self,
        pid: int,
        *,
        acceptors: int = 3,
        capacity: int = 1024,
        trim_threshold: float = 0.5,
        replica_id: int = 0,
        on_decide: Callable[[int, bytes], None] | None = None,
    ):
        self.pid = pid
        self.majority = acceptors // 2 + 1
        self.capacity = capacity
        self.trim_threshold = trim_threshold
        self.replica_id = replica_id
        self.on_decide = on_decide
        # inst -> {rnd -> (set of swids, value)}
        self.quorum_table: dict[int, dict[int, tuple[set[int], bytes]]] = {}
        self.decided: dict[int, bytes] = {}  # decided but not yet delivered
        self.delivery_cursor = 0
        self.decided_count = 0  # decides since the last trim
        self.highest_decided = -1
        self.last_trim = 0
        self.stats: Counter[str] = Counter()

    def on_phase2b(self, m: PaxosMessage) -> list[DeliveredCommand]:
        if m.msgtype is not MsgType.PHASE2B:
            raise ValueError(f"on_phase2b got {m.msgtype.name}")
        if m.pid != self.pid:
            raise ValueError(f"partition {self.pid} got message for pid {m.pid}")
        if m.inst < self.delivery_cursor:
            # Already delivered and garbage-collected; a straggler vote.
            self.stats["stale_vote"] += 1
            return []
        rounds = self.quorum_table.setdefault(m.inst, {})
        entry = rounds.get(m.rnd)
        if entry is None:
            entry = (set(), m.value)
            rounds[m.rnd] = entry
        voters, value = entry
        if m.value != value:
            raise SafetyViolation(
                f"acceptors disagree within round: pid={m.pid} inst={m.inst} "
                f"rnd={m.rnd}: {value!r} vs {m.value!r}"
            )
        if m.swid in voters:
            self.stats["duplicate_vote"] += 1
            return []
        voters.add(m.swid)
        if len(voters) != self.majority:
            return []
        return self._decide(m.inst, value)

    def _decide(self, inst: int, value: bytes) -> list[DeliveredCommand]:
        prior = self.decided.get(inst)
        if prior is not None:
            if prior != value:
                raise SafetyViolation(
                    f"two quorums with different values: pid={self.pid} "
                    f"inst={inst}: {prior!r} vs {value!r}"
                )
            self.stats["redundant_decide"] += 1
            return []
        self.decided[inst] = value
        self.decided_count += 1
        if inst > self.highest_decided:
            self.highest_decided = inst
        if self.on_decide is not None:
            self.on_decide(inst, value)
        out = []
        while self.delivery_cursor in self.decided:
            cur = self.delivery_cursor
            val = self.decided.pop(cur)
            self.quorum_table.pop(cur, None)
            self.delivery_cursor = cur + 1
            out.append(self._unwrap(cur, val))
        return out

    def _unwrap(self, inst: int, value: bytes) -> DeliveredCommand:
        try:
            env = decode_envelope(value)
        except EnvelopeError:
            return DeliveredCommand(self.pid, inst, value)
        multi = frozenset(env.shards) if env.multi_shard else None
        return DeliveredCommand(self.pid, inst, env.payload, env.req_id, multi)

    def maybe_trim(self) -> PaxosMessage | None:
        """Emit a trim once enough instances decided and delivery has moved.

        The watermark is the delivery cursor, not the highest decided
        instance: anything at or above the cursor may still be needed to fill
        gaps, so acceptors must keep it.
        """
        if self.decided_count < self.trim_threshold * self.capacity:
            return None
        if self.delivery_cursor <= self.last_trim:
            return None
        self.decided_count = 0
        self.last_trim = self.delivery_cursor
        self.stats["trims"] += 1
        return PaxosMessage(
            MsgType.TRIM,
            inst=self.delivery_cursor,
            swid=self.replica_id,
            pid=self.pid,
        )

    def undelivered_gap(self) -> int | None:
        """The instance delivery is stuck on, if anything newer has decided."""
        if self.decided and self.delivery_cursor < max(self.decided):
            return self.delivery_cursor
        return None


def worker_for(pid: int, workers: int) -> int:
    return pid % workers


class WorkerRouter:
    """Static pid -> worker fan-out with bounded per-worker queues.

    Single producer, single consumer per queue; the producer is whoever calls
    route(), the consumer whoever drains that worker's queue. A full queue
    drops the message: retransmission is the proposer's job, not ours.
    """

    def __init__(self, workers: int, *, queue_capacity: int = 4096, batch_size: int = 32):
        if workers < 1:
            raise ValueError("need at least one worker")
        self.workers = workers
        self.queue_capacity = queue_capacity
        self.batch_size = batch_size
        self.queues: list[deque] = [deque() for _ in range(workers)]
        self.stats: Counter[str] = Counter()

    def route(self, m: PaxosMessage) -> int:
        idx = worker_for(m.pid, self.workers)
        q = self.queues[idx]
        if len(q) >= self.queue_capacity:
            self.stats["queue_full_drop"] += 1
        else:
            q.append(m)
        return idx

    def drain(self, worker: int, limit: int | None = None) -> list[PaxosMessage]:
        q = self.queues[worker]
        n = min(len(q), limit if limit is not None else self.batch_size)
        return [q.popleft() for _ in range(n)]


class BarrierTimeout(Exception):
    """An involved partition never delivered its copy of a multi-shard command."""


class MultiShardCoordinator:
    """Rendezvous for commands that span partitions.

    Every involved partition delivers its own copy of the command; the
    command runs once, on the lowest-id involved worker, after the last copy
    arrives. ``arrive`` is the non-blocking form for single-threaded callers:
    it returns the execution result on the completing arrival and None for
    the earlier ones. ``arrive_blocking`` parks real worker threads until the
    rendezvous completes or times out.
    """

    def __init__(
        self,
        workers: int,
        execute: Callable[[DeliveredCommand, int], bytes],
    ):
        self.workers = workers
        self.execute = execute
        self._pending: dict[int, set[int]] = {}  # req_id -> pids still awaited
        self._results: dict[int, tuple[int, bytes]] = {}
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self.stats: Counter[str] = Counter()

    def _arrive_locked(self, cmd: DeliveredCommand) -> tuple[int, bytes] | None:
        if cmd.multi_shard is None:
            raise ValueError("single-shard commands bypass the coordinator")
        assert cmd.req_id is not None
        waiting = self._pending.get(cmd.req_id)
        if waiting is None:
            waiting = set(cmd.multi_shard)
            self._pending[cmd.req_id] = waiting
        waiting.discard(cmd.pid)
        if waiting:
            return None
        del self._pending[cmd.req_id]
        executor = min(worker_for(pid, self.workers) for pid in cmd.multi_shard)
        result = self.execute(cmd, executor)
        self._results[cmd.req_id] = (executor, result)
        self.stats["executed"] += 1
        return executor, result

    def arrive(self, cmd: DeliveredCommand) -> tuple[int, bytes] | None:
        with self._lock:
            return self._arrive_locked(cmd)

    def arrive_blocking(
        self, worker: int, cmd: DeliveredCommand, timeout: float | None = None
    ) -> tuple[int, bytes]:
        """Block until the command has executed; raises BarrierTimeout."""
        assert cmd.req_id is not None
        with self._cond:
            done = self._arrive_locked(cmd)
            if done is not None:
                self._cond.notify_all()
                return done
            ok = self._cond.wait_for(
                lambda: cmd.req_id in self._results, timeout=timeout
            )
            if not ok:
                raise BarrierTimeout(
                    f"req {cmd.req_id:#x}: worker {worker} waited on shards "
                    f"{sorted(cmd.multi_shard or ())}, copy never delivered"
                )
            return self._results[cmd.req_id]


def cross_shard_order(
    deliveries: list[tuple[int, int, int]],
) -> tuple[dict[int, set[int]], bool]:
    """Build the cross-shard precedence relation and test it for cycles.

    ``deliveries`` is a list of (pid, inst, req_id) records. Request r1
    precedes r2 when r1 is delivered before r2 in some partition where both
    appear. Returns (successor edges keyed by req_id, acyclic verdict).
    Consecutive-pair edges per partition are enough: a cycle through the full
    pairwise relation always maps onto a cycle through successor edges.
    """
    per_shard: dict[int, list[int]] = {}
    members: dict[int, set[int]] = {}
    seen: set[tuple[int, int]] = set()
    for pid, inst, req_id in sorted(deliveries, key=lambda d: (d[0], d[1])):
        if (pid, inst) in seen:
            continue
        seen.add((pid, inst))
        # a retried request can be decided twice in one shard; only its first
        # delivery defines its position in the order
        if req_id in members.setdefault(pid, set()):
            continue
        members[pid].add(req_id)
        per_shard.setdefault(pid, []).append(req_id)
    edges: dict[int, set[int]] = {}
    indegree: Counter[int] = Counter()
    nodes: set[int] = set()
    for order in per_shard.values():
        nodes.update(order)
        for a, b in zip(order, order[1:]):
            if a == b:
                continue
            if b not in edges.setdefault(a, set()):
                edges[a].add(b)
                indegree[b] += 1
    ready = deque(n for n in nodes if indegree[n] == 0)
    visited = 0
    while ready:
        n = ready.popleft()
        visited += 1
        for succ in edges.get(n, ()):
            indegree[succ] -= 1
            if indegree[succ] == 0:
                ready.append(succ)
    return edges, visited == len(nodes)
