"""Client-side library: wraps values in consensus headers and drives retries.

A proposer maps each key onto a partition by even key-range split, wraps the
application payload in a request envelope (request id + involved shard set),
and emits a REQUEST toward the leader address. It never learns instance
numbers; those belong to the leader.

Timeout policy: resend the same request id up to max_retries times, then ask
the controller to change leaders and keep resending toward the (possibly
re-routed) leader address. Resends can cause the same value to be decided in
several instances; delivery is therefore at-least-once and deduplication by
request id is the application's concern.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field

from .wire import (
    MAX_VALUE,
    Envelope,
    MsgType,
    PaxosMessage,
    ValueTooLarge,
    encode_envelope,
    make_req_id,
)


class KeyOutOfRange(Exception):
    pass


def map_key(key: int, partitions: int, key_range: int) -> int:
    """Even split of [0, key_range) across partitions."""
    if not 0 <= key < key_range:
        raise KeyOutOfRange(f"key {key} not in [0, {key_range})")
    return key * partitions // key_range


@dataclass
class ProposerConfig:
    partitions: int = 1
    key_range: int = 4096
    retry_timeout_us: int = 10_000
    max_retries: int = 3

    def __post_init__(self):
        if self.partitions < 1:
            raise ValueError("partitions must be >= 1")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")
        if self.key_range < self.partitions:
            raise ValueError("key_range must cover every partition")


class RetryAction(enum.Enum):
    RESEND = "resend"
    REQUEST_LEADER_CHANGE = "request_leader_change"


@dataclass
class PendingRequest:
    req_id: int
    request: PaxosMessage
    submitted_us: int
    retries: int = 0
    attempt: int = 0
    leader_changes: int = 0


class Proposer:
    def __init__(self, proposer_id: int, config: ProposerConfig):
        self.proposer_id = proposer_id
        self.config = config
        self.seq = 0
        self.pending: dict[int, PendingRequest] = {}
        self.stats: Counter[str] = Counter()

    def _register(self, shards: tuple[int, ...], payload: bytes, now_us: int) -> PendingRequest:
        if len(payload) > MAX_VALUE:
            raise ValueTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_VALUE}")
        req_id = make_req_id(self.proposer_id, self.seq)
        self.seq += 1
        value = encode_envelope(Envelope(req_id, shards, payload))
        if len(value) > MAX_VALUE:
            raise ValueTooLarge(
                f"payload plus envelope is {len(value)} bytes, exceeds {MAX_VALUE}"
            )
        msg = PaxosMessage(MsgType.REQUEST, pid=min(shards), value=value)
        p = PendingRequest(req_id, msg, now_us)
        self.pending[req_id] = p
        self.stats["submitted"] += 1
        return p

    def submit(self, payload: bytes, key: int, now_us: int = 0) -> PendingRequest:
        pid = map_key(key, self.config.partitions, self.config.key_range)
        return self._register((pid,), payload, now_us)

    def submit_multi(
        self, payload: bytes, pids: tuple[int, ...], now_us: int = 0
    ) -> PendingRequest:
        """Submit to an explicit shard set; the caller names the shards."""
        shards = tuple(sorted(set(pids)))
        if not shards:
            raise ValueError("empty shard set")
        if any(not 0 <= p < self.config.partitions for p in shards):
            raise KeyOutOfRange(f"shard set {shards} outside 0..{self.config.partitions - 1}")
        return self._register(shards, payload, now_us)

    def on_response(self, req_id: int, now_us: int) -> int | None:
        """Round-trip latency in microseconds, or None for an unknown or
        already-completed request (late duplicate responses are normal)."""
        p = self.pending.pop(req_id, None)
        if p is None:
            self.stats["stray_response"] += 1
            return None
        self.stats["completed"] += 1
        return now_us - p.submitted_us

    def on_timeout(self, req_id: int) -> tuple[RetryAction, PendingRequest] | None:
        """Decide what to do about an expired request; None if it completed."""
        p = self.pending.get(req_id)
        if p is None:
            return None
        if p.retries < self.config.max_retries:
            p.retries += 1
            p.attempt += 1
            self.stats["resend"] += 1
            return (RetryAction.RESEND, p)
        p.retries = 0
        p.attempt += 1
        p.leader_changes += 1
        self.stats["leader_change_requests"] += 1
        return (RetryAction.REQUEST_LEADER_CHANGE, p)
