"""Append-only record log backing one durable queue.

Each record is ``>IIB`` (body length, crc32 of kind+body, kind) followed by the
body. PUBLISH bodies are encoded messages; ACK and NACK bodies are message ids.
A torn or corrupt tail is truncated on open: the write that produced it never
returned to its caller, so nothing acknowledged is lost.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
import zlib
from pathlib import Path
from typing import Iterator

logger = logging.getLogger(__name__)

PUBLISH = 1
ACK = 2
NACK = 3

_HEADER = struct.Struct(">IIB")
MAX_BODY = 64 * 1024 * 1024


def encode_record(kind: int, body: bytes) -> bytes:
    crc = zlib.crc32(bytes([kind]) + body)
    return _HEADER.pack(len(body), crc, kind) + body


def _scan(data: bytes) -> tuple[list[tuple[int, bytes]], int]:
    """Decode records from ``data``; returns the records and the valid length."""
    records = []
    pos = 0
    while pos + _HEADER.size <= len(data):
        length, crc, kind = _HEADER.unpack_from(data, pos)
        start = pos + _HEADER.size
        end = start + length
        if length > MAX_BODY or end > len(data) or kind not in (PUBLISH, ACK, NACK):
            break
        body = data[start:end]
        if zlib.crc32(bytes([kind]) + body) != crc:
            break
        records.append((kind, body))
        pos = end
    return records, pos


class RecordLog:
    def __init__(self, path: Path, fsync: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._lock = threading.Lock()
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT | os.O_APPEND, 0o644)

    def append(self, kind: int, body: bytes) -> int:
        rec = encode_record(kind, body)
        with self._lock:
            view = memoryview(rec)
            while view:
                n = os.write(self._fd, view)
                view = view[n:]
            if self.fsync:
                os.fsync(self._fd)
        return len(rec)

    def read_all(self) -> list[tuple[int, bytes]]:
        """Read every valid record, truncating a damaged tail in place."""
        with self._lock:
            data = self.path.read_bytes()
            records, valid = _scan(data)
            if valid < len(data):
                logger.warning(
                    "%s: discarding %d trailing bytes after record %d (torn or corrupt write)",
                    self.path, len(data) - valid, len(records),
                )
                os.ftruncate(self._fd, valid)
        return records

    def rewrite(self, records: list[tuple[int, bytes]]) -> None:
        """Atomically replace the log contents (used for compaction)."""
        tmp = self.path.with_suffix(".compact")
        with self._lock:
            with open(tmp, "wb") as fh:
                for kind, body in records:
                    fh.write(encode_record(kind, body))
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.path)
            os.close(self._fd)
            self._fd = os.open(self.path, os.O_RDWR | os.O_APPEND)

    def close(self) -> None:
        with self._lock:
            if self._fd >= 0:
                os.close(self._fd)
                self._fd = -1

    def __iter__(self) -> Iterator[tuple[int, bytes]]:
        return iter(self.read_all())
