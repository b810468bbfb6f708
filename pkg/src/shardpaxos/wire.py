"""Binary codec for the consensus packet header.

Every message exchanged between proposers, leaders, acceptors, and replicas
is a fixed 15-byte big-endian header followed by a length-prefixed value:

    msgtype(1) | inst(4) | rnd(2) | vrnd(2) | swid(2) | pid(2) | value_len(2) | value

The full frame (header + value) must fit in a 1500-byte MTU, which caps the
value at 1460 bytes. Encoding and decoding are pure functions; decoding never
raises anything other than ``DecodeError`` subclasses, no matter the input.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

HEADER_FMT = ">BIHHHHH"
HEADER_SIZE = struct.calcsize(HEADER_FMT)  # 15
MAX_FRAME = 1500
MAX_VALUE = 1460

_MAX_INST = 2**32 - 1
_MAX_U16 = 2**16 - 1


class MsgType(enum.IntEnum):
    REQUEST = 1
    PHASE1A = 2
    PHASE1B = 3
    PHASE2A = 4
    PHASE2B = 5
    TRIM = 6


class WireError(Exception):
    """Base for codec failures."""


class ValueTooLarge(WireError):
    """Encoding would exceed the 1500-byte frame bound."""


class FieldOverflow(WireError):
    """A header field does not fit its wire width."""


class DecodeError(WireError):
    """Base for all decode failures; decode raises nothing else."""


class TruncatedHeader(DecodeError):
    pass


class UnknownMsgType(DecodeError):
    pass


class LengthMismatch(DecodeError):
    pass


@dataclass(frozen=True)
class PaxosMessage:
    """One consensus packet.

    ``inst`` is the slot in the command sequence for partition ``pid``.
    ``rnd`` is the ballot the sender is operating in; ``vrnd`` the ballot of
    the vote an acceptor reports (0 when it never voted). ``swid`` identifies
    the sender (0 in client REQUESTs). A TRIM reuses the header with ``inst``
    carrying the trim watermark and an empty value.
    """

    msgtype: MsgType
    inst: int = 0
    rnd: int = 0
    vrnd: int = 0
    swid: int = 0
    pid: int = 0
    value: bytes = b""


def encode_message(m: PaxosMessage) -> bytes:
    if len(m.value) > MAX_VALUE:
        raise ValueTooLarge(
            f"value of {len(m.value)} bytes exceeds {MAX_VALUE} (frame > {MAX_FRAME})"
        )
    if not 0 <= m.inst <= _MAX_INST:
        raise FieldOverflow(f"inst {m.inst} out of 32-bit range")
    for name in ("rnd", "vrnd", "swid", "pid"):
        v = getattr(m, name)
        if not 0 <= v <= _MAX_U16:
            raise FieldOverflow(f"{name} {v} out of 16-bit range")
    return (
        struct.pack(
            HEADER_FMT,
            int(m.msgtype),
            m.inst,
            m.rnd,
            m.vrnd,
            m.swid,
            m.pid,
            len(m.value),
        )
        + m.value
    )


def decode_message(b: bytes) -> PaxosMessage:
    if len(b) < HEADER_SIZE:
        raise TruncatedHeader(f"{len(b)} bytes, header needs {HEADER_SIZE}")
    tag, inst, rnd, vrnd, swid, pid, vlen = struct.unpack_from(HEADER_FMT, b)
    try:
        msgtype = MsgType(tag)
    except ValueError:
        raise UnknownMsgType(f"tag byte {tag:#04x}") from None
    if len(b) != HEADER_SIZE + vlen:
        raise LengthMismatch(
            f"frame is {len(b)} bytes but value_len says {HEADER_SIZE + vlen}"
        )
    return PaxosMessage(msgtype, inst, rnd, vrnd, swid, pid, bytes(b[HEADER_SIZE:]))


# --- request envelope -------------------------------------------------------
#
# The proposer library wraps every application payload in a small envelope
# before it enters the REQUEST value, so that replicas can match responses
# and coordinate multi-shard execution without parsing application bytes:
#
#     req_id(8) | n_shards(1) | pid(2) * n_shards | payload
#
# req_id packs (proposer id << 32 | sequence number). Single-shard requests
# have n_shards == 1. The envelope is protocol-layer framing; the payload
# stays opaque to every consensus role.

_ENV_FIXED = struct.Struct(">QB")


class EnvelopeError(WireError):
    pass


@dataclass(frozen=True)
class Envelope:
    req_id: int
    shards: tuple[int, ...]
    payload: bytes = b""

    @property
    def multi_shard(self) -> bool:
        return len(self.shards) > 1


def make_req_id(proposer_id: int, seq: int) -> int:
    return (proposer_id << 32) | (seq & 0xFFFFFFFF)


def split_req_id(req_id: int) -> tuple[int, int]:
    return req_id >> 32, req_id & 0xFFFFFFFF


def encode_envelope(env: Envelope) -> bytes:
    if not 1 <= len(env.shards) <= 255:
        raise EnvelopeError(f"{len(env.shards)} shards (need 1..255)")
    head = _ENV_FIXED.pack(env.req_id, len(env.shards))
    pids = struct.pack(f">{len(env.shards)}H", *env.shards)
    return head + pids + env.payload


def decode_envelope(b: bytes) -> Envelope:
    if len(b) < _ENV_FIXED.size:
        raise EnvelopeError(f"{len(b)} bytes, envelope head needs {_ENV_FIXED.size}")
    req_id, n = _ENV_FIXED.unpack_from(b)
    if n == 0:
        raise EnvelopeError("zero shards")
    end = _ENV_FIXED.size + 2 * n
    if len(b) < end:
        raise EnvelopeError("truncated shard list")
    shards = struct.unpack_from(f">{n}H", b, _ENV_FIXED.size)
    return Envelope(req_id, shards, bytes(b[end:]))
