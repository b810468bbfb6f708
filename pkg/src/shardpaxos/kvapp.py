"""Replicated key-value application driven through the replica deliver callback.

Commands serialize into the consensus value payload as

    op(1) | key_len(2) | key | val_len(2) | val | req_id(8)

all big-endian. A multi-shard command is a batch: count(1) followed by that
many commands, applied together by the executing worker, each against the
store owning its key.

Two storage backends satisfy the same contract: a plain in-memory table, and
a file-backed table with a per-shard write-ahead log (every PUT is appended
to the log before the table mutates, so a restart can rebuild the table by
replay). Shards never share a storage location; the file backend gives each
shard its own directory.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

OP_PUT = 1
OP_GET = 2

RESP_OK = b"\x00"
RESP_NOT_FOUND = b"\x01"
RESP_ERROR = b"\x02"

_LEN = struct.Struct(">H")
_REQ = struct.Struct(">Q")
_REC_HEAD = struct.Struct(">II")  # record length, crc32


class KvDecodeError(Exception):
    pass


class IoError(Exception):
    """Fatal storage failure for a shard."""


@dataclass(frozen=True)
class KvCommand:
    op: int
    key: bytes
    value: bytes = b""
    req_id: int = 0


def encode_command(cmd: KvCommand) -> bytes:
    return b"".join(
        (
            bytes([cmd.op]),
            _LEN.pack(len(cmd.key)),
            cmd.key,
            _LEN.pack(len(cmd.value)),
            cmd.value,
            _REQ.pack(cmd.req_id),
        )
    )


def _decode_one(b: bytes, off: int) -> tuple[KvCommand, int]:
    if off + 3 > len(b):
        raise KvDecodeError("truncated command header")
    op = b[off]
    if op not in (OP_PUT, OP_GET):
        raise KvDecodeError(f"unknown op {op}")
    (klen,) = _LEN.unpack_from(b, off + 1)
    p = off + 3
    key = bytes(b[p : p + klen])
    p += klen
    if p + 2 > len(b):
        raise KvDecodeError("truncated key")
    (vlen,) = _LEN.unpack_from(b, p)
    p += 2
    value = bytes(b[p : p + vlen])
    p += vlen
    if p + 8 > len(b):
        raise KvDecodeError("truncated value")
    (req_id,) = _REQ.unpack_from(b, p)
    return KvCommand(op, key, value, req_id), p + 8


def decode_command(b: bytes) -> KvCommand:
    cmd, end = _decode_one(b, 0)
    if end != len(b):
        raise KvDecodeError(f"{len(b) - end} trailing bytes")
    return cmd


def encode_batch(cmds: list[KvCommand]) -> bytes:
    if not 1 <= len(cmds) <= 255:
        raise KvDecodeError(f"batch of {len(cmds)} commands (need 1..255)")
    return bytes([len(cmds)]) + b"".join(encode_command(c) for c in cmds)


def decode_batch(b: bytes) -> list[KvCommand]:
    if not b:
        raise KvDecodeError("empty batch")
    n, off = b[0], 1
    out = []
    for _ in range(n):
        cmd, off = _decode_one(b, off)
        out.append(cmd)
    if off != len(b):
        raise KvDecodeError(f"{len(b) - off} trailing bytes")
    return out


class MemoryStore:
    """In-memory shard table; no durability, no filesystem activity."""

    backend = "memory"

    def __init__(self, pid: int):
        self.pid = pid
        self.table: dict[bytes, bytes] = {}
        self.bytes_written = 0

    def apply(self, cmd: KvCommand) -> bytes:
        if cmd.op == OP_PUT:
            self.table[cmd.key] = cmd.value
            self.bytes_written += len(cmd.key) + len(cmd.value)
            return RESP_OK
        val = self.table.get(cmd.key)
        return RESP_NOT_FOUND if val is None else RESP_OK + val

    def close(self) -> None:
        pass


class FileStore:
    """Shard table backed by an append-only write-ahead log.

    Log records are length-prefixed with a per-record crc32:
    len(4) | crc32(4) | payload. The payload is the encoded PUT command.
    Replay stops at the first torn or corrupt record, which is the state the
    shard had durably reached. fsync policy: "always" syncs every append,
    "periodic" every ``fsync_interval`` appends, "never" leaves flushing to
    the OS.
    """

    backend = "file"

    def __init__(
        self,
        pid: int,
        root: str | os.PathLike,
        *,
        fsync: str = "periodic",
        fsync_interval: int = 128,
    ):
        if fsync not in ("always", "periodic", "never"):
            raise ValueError(f"unknown fsync policy {fsync!r}")
        self.pid = pid
        self.fsync = fsync
        self.fsync_interval = fsync_interval
        self.table: dict[bytes, bytes] = {}
        self.bytes_written = 0
        self._appends = 0
        shard_dir = Path(root) / f"shard-{pid:04d}"
        try:
            shard_dir.mkdir(parents=True, exist_ok=True)
            self.wal_path = shard_dir / "wal.log"
            if self.wal_path.exists():
                self._replay()
            self._wal = open(self.wal_path, "ab")
        except OSError as e:
            raise IoError(f"shard {pid}: {e}") from e

    def _replay(self) -> None:
        with open(self.wal_path, "rb") as f:
            data = f.read()
        off = 0
        while off + _REC_HEAD.size <= len(data):
            length, crc = _REC_HEAD.unpack_from(data, off)
            start = off + _REC_HEAD.size
            payload = data[start : start + length]
            if len(payload) < length or zlib.crc32(payload) != crc:
                break  # torn tail from a crash mid-append
            try:
                cmd = decode_command(payload)
            except KvDecodeError:
                break
            self.table[cmd.key] = cmd.value
            off = start + length

    def _append(self, payload: bytes) -> None:
        try:
            self._wal.write(_REC_HEAD.pack(len(payload), zlib.crc32(payload)))
            self._wal.write(payload)
            self._appends += 1
            if self.fsync == "always":
                self._wal.flush()
                os.fsync(self._wal.fileno())
            elif self.fsync == "periodic" and self._appends % self.fsync_interval == 0:
                self._wal.flush()
                os.fsync(self._wal.fileno())
        except OSError as e:
            raise IoError(f"shard {self.pid}: {e}") from e

    def apply(self, cmd: KvCommand) -> bytes:
        if cmd.op == OP_PUT:
            payload = encode_command(cmd)
            self._append(payload)  # log first, then mutate
            self.table[cmd.key] = cmd.value
            self.bytes_written += len(payload)
            return RESP_OK
        val = self.table.get(cmd.key)
        return RESP_NOT_FOUND if val is None else RESP_OK + val

    def close(self) -> None:
        try:
            self._wal.flush()
            if self.fsync != "never":
                os.fsync(self._wal.fileno())
            self._wal.close()
        except OSError as e:
            raise IoError(f"shard {self.pid}: {e}") from e


def storage_backends() -> tuple[str, ...]:
    return ("memory", "file")


def make_store(
    backend: str, pid: int, root: str | os.PathLike | None = None, **kwargs
):
    if backend == "memory":
        return MemoryStore(pid)
    if backend == "file":
        if root is None:
            raise ValueError("file backend needs a root directory")
        return FileStore(pid, root, **kwargs)
    raise ValueError(f"unknown backend {backend!r}")


class KvApp:
    """One replica's application state: a store per shard plus the deliver
    callback the replica engine drives."""

    def __init__(self, stores: dict[int, MemoryStore | FileStore], key_to_pid: Callable[[bytes], int]):
        self.stores = stores
        self.key_to_pid = key_to_pid

    def deliver(self, pid: int, inst: int, payload: bytes) -> bytes:
        try:
            cmd = decode_command(payload)
        except KvDecodeError as e:
            return RESP_ERROR + str(e).encode()
        return self.stores[pid].apply(cmd)

    def deliver_multi(self, shards: frozenset[int], payload: bytes) -> bytes:
        """Apply a batch across every involved shard's store.

        Runs on the single executing worker, which may touch stores owned by
        other workers; the rendezvous guarantees those workers are parked.
        """
        try:
            cmds = decode_batch(payload)
        except KvDecodeError as e:
            return RESP_ERROR + str(e).encode()
        resp = b""
        for cmd in cmds:
            pid = self.key_to_pid(cmd.key)
            if pid not in shards:
                return RESP_ERROR + f"key {cmd.key!r} outside shard set".encode()
            resp = self.stores[pid].apply(cmd)
        return resp

    def close(self) -> None:
        for store in self.stores.values():
            store.close()
