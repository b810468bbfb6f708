"""Acceptor: per-partition ring-buffer vote logs with trim support.

An acceptor keeps one log per partition, each a ring of ``capacity`` cells
indexed by ``inst mod capacity``. A cell holds the highest round promised,
the round of the last vote cast, and the voted value. Memory is therefore
proportional to partitions * capacity and nothing else; instances outside
the window [low_watermark, low_watermark + capacity) are dropped rather than
aliased onto live cells, because silently overwriting an untriangulated vote
could let two values win the same instance.

TRIM messages advance the watermark: all state below the trim instance is
erased and those cells become reusable.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .actions import Action, Group, forward, multicast
from .wire import MsgType, PaxosMessage


@dataclass
class Entry:
    rnd: int = 0
    vrnd: int = 0
    value: bytes = b""
    occupied: bool = False

    def clear(self) -> None:
        self.rnd = 0
        self.vrnd = 0
        self.value = b""
        self.occupied = False


class Acceptor:
    def __init__(self, swid: int, partitions: int, capacity: int):
        if partitions < 1 or capacity < 1:
            raise ValueError("partitions and capacity must be positive")
        self.swid = swid
        self.partitions = partitions
        self.capacity = capacity
        self.rings = [
            [Entry() for _ in range(capacity)] for _ in range(partitions)
        ]
        self.low_watermark = [0] * partitions
        self.occupied = [0] * partitions
        self.peak_occupied = [0] * partitions
        self.stats: Counter[str] = Counter()
        self.last_drop: str | None = None

    # -- helpers -------------------------------------------------------------

    def _entry(self, pid: int, inst: int) -> Entry | None:
        """Cell for (pid, inst), or None when outside the live window."""
        if pid >= self.partitions:
            self.stats["invalid_partition"] += 1
            self.last_drop = "invalid_partition"
            return None
        wm = self.low_watermark[pid]
        if inst < wm or inst >= wm + self.capacity:
            self.stats["out_of_window"] += 1
            self.last_drop = "out_of_window"
            return None
        return self.rings[pid][inst % self.capacity]

    def _occupy(self, pid: int, e: Entry) -> None:
        if not e.occupied:
            e.occupied = True
            self.occupied[pid] += 1
            if self.occupied[pid] > self.peak_occupied[pid]:
                self.peak_occupied[pid] = self.occupied[pid]

    # -- message handlers ------------------------------------------------------

    def on_phase1a(self, m: PaxosMessage) -> list[Action]:
        self.last_drop = None
        e = self._entry(m.pid, m.inst)
        if e is None:
            return []
        if m.rnd <= e.rnd:
            # Already promised an equal or higher round: reject silently.
            self.stats["stale_phase1a"] += 1
            self.last_drop = "stale_rnd"
            return []
        self._occupy(m.pid, e)
        e.rnd = m.rnd
        self.stats["promised"] += 1
        return [
            forward(
                PaxosMessage(
                    MsgType.PHASE1B,
                    inst=m.inst,
                    rnd=m.rnd,
                    vrnd=e.vrnd,
                    swid=self.swid,
                    pid=m.pid,
                    value=e.value,
                ),
                m.swid,
            )
        ]

    def on_phase2a(self, m: PaxosMessage) -> list[Action]:
        self.last_drop = None
        e = self._entry(m.pid, m.inst)
        if e is None:
            return []
        # >= rather than >: an acceptor must vote at the round it promised,
        # and the round-0 fast path arrives at cells whose rnd is already 0.
        if m.rnd < e.rnd:
            self.stats["stale_phase2a"] += 1
            self.last_drop = "stale_rnd"
            return []
        self._occupy(m.pid, e)
        e.rnd = m.rnd
        e.vrnd = m.rnd
        e.value = m.value
        self.stats["voted"] += 1
        return [
            multicast(
                PaxosMessage(
                    MsgType.PHASE2B,
                    inst=m.inst,
                    rnd=m.rnd,
                    vrnd=m.rnd,
                    swid=self.swid,
                    pid=m.pid,
                    value=m.value,
                ),
                Group.REPLICAS,
            )
        ]

    def on_trim(self, m: PaxosMessage) -> list[Action]:
        self.last_drop = None
        if m.pid >= self.partitions:
            self.stats["invalid_partition"] += 1
            self.last_drop = "invalid_partition"
            return []
        wm = self.low_watermark[m.pid]
        if m.inst <= wm:
            self.stats["stale_trim"] += 1
            return []
        ring = self.rings[m.pid]
        for inst in range(wm, min(m.inst, wm + self.capacity)):
            e = ring[inst % self.capacity]
            if e.occupied:
                self.occupied[m.pid] -= 1
            e.clear()
        self.low_watermark[m.pid] = m.inst
        self.stats["trimmed"] += 1
        return []

    def on_message(self, m: PaxosMessage) -> list[Action]:
        if m.msgtype is MsgType.PHASE1A:
            return self.on_phase1a(m)
        if m.msgtype is MsgType.PHASE2A:
            return self.on_phase2a(m)
        if m.msgtype is MsgType.TRIM:
            return self.on_trim(m)
        self.stats["unhandled_msgtype"] += 1
        self.last_drop = "unhandled_msgtype"
        return []
