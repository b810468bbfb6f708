"""Output actions shared by the consensus roles.

Role transition functions never touch a transport. They return a list of
``Action`` values describing what to send where: either a unicast to one
device id or a multicast to a named device group. The caller (simulator,
test, or a real transport) resolves the dispatch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .wire import PaxosMessage


class Group(enum.Enum):
    ACCEPTORS = "acceptors"
    REPLICAS = "replicas"


@dataclass(frozen=True)
class Action:
    message: PaxosMessage
    dispatch: str  # "forward" or "multicast"
    target: int | Group


def forward(message: PaxosMessage, device_id: int) -> Action:
    return Action(message, "forward", device_id)


def multicast(message: PaxosMessage, group: Group) -> Action:
    return Action(message, "multicast", group)


class SafetyViolation(Exception):
    """Two different values observed where the protocol guarantees one.

    Raised eagerly so bugs surface at the point of divergence instead of as
    corrupted replica state later.
    """
