"""Shared append-only write-ahead log.

Both components write here: the TC appends logical update, commit and
checkpoint records; the DC appends SMO, Δ, BW and RSSP-marker records.

File layout (little-endian)::

    header   magic b"TCDCLOG1" | version u16 | reserved u16 | page_size u32
    frame*   length u32 | crc32 u32 | payload[length]

A record's LSN is the byte offset of its frame. LSN 0 is the null LSN,
which can never collide with a record because the header occupies it.
"""

from __future__ import annotations

import os
import struct
import zlib
from bisect import bisect_left
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

NULL_LSN = 0

LOG_MAGIC = b"TCDCLOG1"
LOG_VERSION = 1
_HEADER = struct.Struct("<8sHHI")
HEADER_SIZE = _HEADER.size
_FRAME = struct.Struct("<II")
FRAME_OVERHEAD = _FRAME.size


class LogError(Exception):
    """Fatal log failure; the engine must stop appending."""


class ScanError(LogError):
    pass


class Kind(IntEnum):
    UPDATE = 1
    SMO = 2
    BCKPT = 3
    ECKPT = 4
    DELTA = 5
    BW = 6
    RSSP = 7
    COMMIT = 8
    ABORT = 9


# update flags
F_COMPENSATION = 0x1
F_PREV_ABSENT = 0x2  # the update inserted the key
F_DELETE = 0x4  # compensation of an insert: remove the key


@dataclass
class UpdateRecord:
    txn_id: int
    table_id: int
    key: int
    new_value: bytes
    prev_value: bytes
    pid: int
    prev_lsn_of_txn: int = NULL_LSN
    flags: int = 0
    lsn: int = NULL_LSN

    kind = Kind.UPDATE
    _S = struct.Struct("<QIQIQBHH")

    @property
    def is_delete(self) -> bool:
        return bool(self.flags & F_DELETE)

    @property
    def is_compensation(self) -> bool:
        return bool(self.flags & F_COMPENSATION)

    def encode(self) -> bytes:
        return (
            self._S.pack(
                self.txn_id,
                self.table_id,
                self.key,
                self.pid,
                self.prev_lsn_of_txn,
                self.flags,
                len(self.new_value),
                len(self.prev_value),
            )
            + self.new_value
            + self.prev_value
        )

    @classmethod
    def decode(cls, buf: memoryview) -> "UpdateRecord":
        txn, table, key, pid, prev, flags, nlen, plen = cls._S.unpack_from(buf, 0)
        off = cls._S.size
        new = bytes(buf[off : off + nlen])
        old = bytes(buf[off + nlen : off + nlen + plen])
        return cls(txn, table, key, new, old, pid, prev, flags)


@dataclass
class PageImage:
    """Post-SMO content of one page: a leaf's keys/values or an internal
    page's separator keys/children."""

    pid: int
    is_leaf: bool
    keys: list[int]
    values: list[bytes] = field(default_factory=list)
    children: list[int] = field(default_factory=list)
    level: int = 0


@dataclass
class SmoRecord:
    """Physiological, redo-only record of a B-tree split.

    Carries the full post-split image of every page it touched so that
    redo does not depend on the pre-split state of any page.
    """

    images: list[PageImage]
    lsn: int = NULL_LSN

    kind = Kind.SMO

    @property
    def pids(self) -> list[int]:
        return [im.pid for im in self.images]

    def encode(self) -> bytes:
        parts = [struct.pack("<I", len(self.images))]
        for im in self.images:
            n = len(im.keys)
            parts.append(struct.pack("<IBBI", im.pid, im.is_leaf, im.level, n))
            parts.append(struct.pack(f"<{n}Q", *im.keys))
            if im.is_leaf:
                plen = len(im.values[0]) if im.values else 0
                parts.append(struct.pack("<H", plen))
                parts.append(b"".join(im.values))
            else:
                parts.append(struct.pack(f"<{n}I", *im.children))
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: memoryview) -> "SmoRecord":
        (count,) = struct.unpack_from("<I", buf, 0)
        off = 4
        images = []
        for _ in range(count):
            pid, is_leaf, level, n = struct.unpack_from("<IBBI", buf, off)
            off += 10
            keys = list(struct.unpack_from(f"<{n}Q", buf, off))
            off += 8 * n
            if is_leaf:
                (plen,) = struct.unpack_from("<H", buf, off)
                off += 2
                vals = [bytes(buf[off + i * plen : off + (i + 1) * plen]) for i in range(n)]
                off += n * plen
                images.append(PageImage(pid, True, keys, values=vals))
            else:
                children = list(struct.unpack_from(f"<{n}I", buf, off))
                off += 4 * n
                images.append(PageImage(pid, False, keys, children=children, level=level))
        return cls(images)


@dataclass
class BeginCheckpoint:
    # txn_id -> lastLsn of every transaction active when bCkpt was written
    active_txns: dict[int, int] = field(default_factory=dict)
    lsn: int = NULL_LSN

    kind = Kind.BCKPT

    def encode(self) -> bytes:
        items = sorted(self.active_txns.items())
        flat = [v for kv in items for v in kv]
        return struct.pack(f"<I{2 * len(items)}Q", len(items), *flat)

    @classmethod
    def decode(cls, buf: memoryview) -> "BeginCheckpoint":
        (n,) = struct.unpack_from("<I", buf, 0)
        flat = struct.unpack_from(f"<{2 * n}Q", buf, 4)
        return cls(dict(zip(flat[0::2], flat[1::2])))


@dataclass
class EndCheckpoint:
    bckpt_lsn: int
    lsn: int = NULL_LSN

    kind = Kind.ECKPT

    def encode(self) -> bytes:
        return struct.pack("<Q", self.bckpt_lsn)

    @classmethod
    def decode(cls, buf: memoryview) -> "EndCheckpoint":
        return cls(struct.unpack_from("<Q", buf, 0)[0])


@dataclass
class DeltaRecord:
    """DC record (DirtySet, WrittenSet, FW-LSN, FirstDirty, TC-LSN).

    ``dirty_lsns`` is only populated in perfect-DPT mode and parallels
    ``dirty_set``.
    """

    dirty_set: list[int]
    written_set: list[int]
    fw_lsn: int
    first_dirty: int
    tc_lsn: int
    dirty_lsns: Optional[list[int]] = None
    lsn: int = NULL_LSN

    kind = Kind.DELTA
    _S = struct.Struct("<IIQIQB")

    def encode(self) -> bytes:
        nd, nw = len(self.dirty_set), len(self.written_set)
        has = self.dirty_lsns is not None
        out = self._S.pack(nd, nw, self.fw_lsn, self.first_dirty, self.tc_lsn, has)
        out += struct.pack(f"<{nd}I{nw}I", *self.dirty_set, *self.written_set)
        if has:
            out += struct.pack(f"<{nd}Q", *self.dirty_lsns)
        return out

    @classmethod
    def decode(cls, buf: memoryview) -> "DeltaRecord":
        nd, nw, fw, first, tc, has = cls._S.unpack_from(buf, 0)
        off = cls._S.size
        pids = struct.unpack_from(f"<{nd}I{nw}I", buf, off)
        off += 4 * (nd + nw)
        lsns = list(struct.unpack_from(f"<{nd}Q", buf, off)) if has else None
        return cls(list(pids[:nd]), list(pids[nd:]), fw, first, tc, lsns)


@dataclass
class BwRecord:
    """Buffer-write record (WrittenSet, FW-LSN) used by physiological analysis."""

    written_set: list[int]
    fw_lsn: int
    lsn: int = NULL_LSN

    kind = Kind.BW

    def encode(self) -> bytes:
        n = len(self.written_set)
        return struct.pack(f"<QI{n}I", self.fw_lsn, n, *self.written_set)

    @classmethod
    def decode(cls, buf: memoryview) -> "BwRecord":
        fw, n = struct.unpack_from("<QI", buf, 0)
        return cls(list(struct.unpack_from(f"<{n}I", buf, 12)), fw)


@dataclass
class RsspMarker:
    rssp_lsn: int
    lsn: int = NULL_LSN

    kind = Kind.RSSP

    def encode(self) -> bytes:
        return struct.pack("<Q", self.rssp_lsn)

    @classmethod
    def decode(cls, buf: memoryview) -> "RsspMarker":
        return cls(struct.unpack_from("<Q", buf, 0)[0])


@dataclass
class TxnEnd:
    """Commit or abort record closing a transaction's backward chain."""

    txn_id: int
    prev_lsn_of_txn: int
    committed: bool = True
    lsn: int = NULL_LSN

    @property
    def kind(self) -> Kind:
        return Kind.COMMIT if self.committed else Kind.ABORT

    def encode(self) -> bytes:
        return struct.pack("<QQ", self.txn_id, self.prev_lsn_of_txn)

    @classmethod
    def decode(cls, buf: memoryview, committed: bool) -> "TxnEnd":
        txn, prev = struct.unpack_from("<QQ", buf, 0)
        return cls(txn, prev, committed)


LogRecord = Union[
    UpdateRecord, SmoRecord, BeginCheckpoint, EndCheckpoint, DeltaRecord, BwRecord, RsspMarker, TxnEnd
]

_DECODERS = {
    Kind.UPDATE: UpdateRecord.decode,
    Kind.SMO: SmoRecord.decode,
    Kind.BCKPT: BeginCheckpoint.decode,
    Kind.ECKPT: EndCheckpoint.decode,
    Kind.DELTA: DeltaRecord.decode,
    Kind.BW: BwRecord.decode,
    Kind.RSSP: RsspMarker.decode,
    Kind.COMMIT: lambda b: TxnEnd.decode(b, True),
    Kind.ABORT: lambda b: TxnEnd.decode(b, False),
}


def encode_payload(record: LogRecord) -> bytes:
    return bytes([record.kind]) + record.encode()


def decode_payload(payload: memoryview, lsn: int) -> LogRecord:
    rec = _DECODERS[Kind(payload[0])](payload[1:])
    rec.lsn = lsn
    return rec


def log_pages_spanned(start: int, end: int, page_size: int) -> int:
    """Number of log pages touched by the byte range [start, end)."""
    if end <= start:
        return 0
    return (end - 1) // page_size - start // page_size + 1


class Log:
    """Single-writer log with a volatile append buffer and a stable prefix.

    ``stable_lsn`` is the LSN of the last record wholly on stable storage;
    every record with LSN <= stable_lsn survives a crash.
    """

    def __init__(self, path: Union[str, Path], page_size: int = 8192, create: bool = False):
        self.path = Path(path)
        if create or not self.path.exists():
            with open(self.path, "wb") as f:
                f.write(_HEADER.pack(LOG_MAGIC, LOG_VERSION, 0, page_size))
        self._fd = os.open(self.path, os.O_RDWR)
        head = os.pread(self._fd, HEADER_SIZE, 0)
        if len(head) < HEADER_SIZE:
            raise LogError(f"{self.path}: truncated log header")
        magic, version, _, self.page_size = _HEADER.unpack(head)
        if magic != LOG_MAGIC or version != LOG_VERSION:
            raise LogError(f"{self.path}: not a log file")
        self._offsets: list[int] = []
        self._stable_end = self._recover_tail()
        self._buf = bytearray()
        self._failed = False

    def _recover_tail(self) -> int:
        """Index whole frames and cut the file after the last one."""
        size = os.fstat(self._fd).st_size
        data = os.pread(self._fd, size - HEADER_SIZE, HEADER_SIZE)
        end = HEADER_SIZE
        for off, _ in _iter_frames(data, HEADER_SIZE):
            self._offsets.append(off)
        if self._offsets:
            last = self._offsets[-1]
            (length,) = struct.unpack_from("<I", data, last - HEADER_SIZE)
            end = last + FRAME_OVERHEAD + length
        if end != size:
            os.ftruncate(self._fd, end)
        return end

    # -- append side ---------------------------------------------------

    @property
    def end_lsn(self) -> int:
        """Position the next appended record will get."""
        return self._stable_end + len(self._buf)

    @property
    def stable_end(self) -> int:
        return self._stable_end

    @property
    def stable_lsn(self) -> int:
        i = bisect_left(self._offsets, self._stable_end)
        return self._offsets[i - 1] if i else NULL_LSN

    @property
    def last_lsn(self) -> int:
        return self._offsets[-1] if self._offsets else NULL_LSN

    def append(self, record: LogRecord) -> int:
        if self._failed:
            raise LogError("log is halted after an IO failure")
        payload = encode_payload(record)
        lsn = self.end_lsn
        self._buf += _FRAME.pack(len(payload), zlib.crc32(payload))
        self._buf += payload
        self._offsets.append(lsn)
        record.lsn = lsn
        if len(self._buf) >= self.page_size:
            self._flush()
        return lsn

    def _flush(self) -> None:
        if not self._buf:
            return
        try:
            os.pwrite(self._fd, bytes(self._buf), self._stable_end)
        except OSError as exc:
            self._failed = True
            raise LogError(f"log write failed: {exc}") from exc
        self._stable_end += len(self._buf)
        self._buf.clear()

    def force_to(self, lsn: int) -> int:
        """Make every record with LSN <= ``lsn`` durable; return stable_lsn."""
        if lsn > self.last_lsn:
            raise LogError(f"force_to({lsn}) beyond last appended record {self.last_lsn}")
        if lsn >= self._stable_end:
            self._flush()
        return self.stable_lsn

    def force(self) -> int:
        self._flush()
        return self.stable_lsn

    def crash(self) -> None:
        """Drop the volatile tail, as a process crash would."""
        cut = bisect_left(self._offsets, self._stable_end)
        del self._offsets[cut:]
        self._buf.clear()
        self.close()

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    # -- read side -----------------------------------------------------

    def is_boundary(self, lsn: int) -> bool:
        i = bisect_left(self._offsets, lsn)
        return i < len(self._offsets) and self._offsets[i] == lsn

    def read_stable(self, start: int = HEADER_SIZE) -> bytes:
        return os.pread(self._fd, self._stable_end - start, start)

    def scan(
        self,
        start: Optional[int] = None,
        kinds: Optional[Iterable[Kind]] = None,
        stop: Optional[int] = None,
    ) -> Iterator[LogRecord]:
        """Yield stable records with LSN >= ``start`` in LSN order.

        ``start`` must be a record boundary (or None for the log start).
        Scanning stops at the first frame that fails its checksum.
        """
        if start is None or start == NULL_LSN:
            start = HEADER_SIZE
        elif start != self._stable_end and not self.is_boundary(start):
            raise ScanError(f"LSN {start} is not a record boundary")
        wanted = None if kinds is None else {int(k) for k in kinds}
        data = self.read_stable(start)
        for off, payload in _iter_frames(data, start):
            if stop is not None and off >= stop:
                return
            if wanted is not None and payload[0] not in wanted:
                continue
            yield decode_payload(payload, off)

    def read_at(self, lsn: int) -> LogRecord:
        if not self.is_boundary(lsn):
            raise ScanError(f"LSN {lsn} is not a record boundary")
        if lsn >= self._stable_end:
            view = memoryview(self._buf)[lsn - self._stable_end :]
        else:
            head = os.pread(self._fd, FRAME_OVERHEAD, lsn)
            length, _ = _FRAME.unpack(head)
            view = memoryview(os.pread(self._fd, length + FRAME_OVERHEAD, lsn))
        length, _ = _FRAME.unpack_from(view, 0)
        return decode_payload(view[FRAME_OVERHEAD : FRAME_OVERHEAD + length], lsn)

    def find_redo_scan_start(self) -> int:
        """LSN of the bCkpt of the most recent completed checkpoint.

        Returns the log start when no checkpoint has completed.
        """
        start = HEADER_SIZE
        for rec in self.scan(kinds=(Kind.ECKPT,)):
            start = rec.bckpt_lsn
        return start

    def __enter__(self) -> "Log":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _iter_frames(data: bytes, base: int) -> Iterator[tuple[int, memoryview]]:
    view = memoryview(data)
    pos, n = 0, len(data)
    while pos + FRAME_OVERHEAD <= n:
        length, crc = _FRAME.unpack_from(view, pos)
        body_start = pos + FRAME_OVERHEAD
        if length == 0 or body_start + length > n:
            return
        payload = view[body_start : body_start + length]
        if zlib.crc32(payload) != crc:
            return
        yield base + pos, payload
        pos = body_start + length
