"""Page file, buffer pool, flush monitoring and the simulated IO clock.

Time is simulated: every IO charges the :class:`IoClock` instead of being
measured, so counters and elapsed time are reproducible run to run.
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol, Union

from .log import NULL_LSN

LEAF = 1
INDEX = 2

PAGE_HEADER = struct.Struct("<QBBH4x")  # pLsn, kind, level, count
PAGE_HEADER_SIZE = PAGE_HEADER.size
INDEX_ENTRY_SIZE = 12  # separator u64 + child u32

FILE_MAGIC = b"TCDCDB01"
_FILE_HEADER = struct.Struct("<8sIIII")  # magic, page_size, payload, table_id, root

BLOCK_PAGES = 8
ROOT_PID = 1


class PageFault(Exception):
    """Request for a page outside the file."""


class WalViolation(Exception):
    """A page would reach disk ahead of the log records that produced it."""


def leaf_capacity(page_size: int, payload: int) -> int:
    return (page_size - PAGE_HEADER_SIZE) // (8 + payload)


def index_capacity(page_size: int) -> int:
    return (page_size - PAGE_HEADER_SIZE) // INDEX_ENTRY_SIZE


@dataclass
class Page:
    """In-memory page: sorted keys plus values (leaf) or children (index).

    An index page's ``keys[i]`` is the smallest key routed to
    ``children[i]``. ``level`` is 0 for leaves and 1 for the index pages
    directly above them.
    """

    pid: int
    kind: int = LEAF
    p_lsn: int = NULL_LSN
    level: int = 0
    keys: list[int] = field(default_factory=list)
    values: list[bytes] = field(default_factory=list)
    children: list[int] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return self.kind == LEAF

    def to_bytes(self, page_size: int) -> bytes:
        n = len(self.keys)
        head = PAGE_HEADER.pack(self.p_lsn, self.kind, self.level, n)
        if self.is_leaf:
            body = struct.pack(f"<{n}Q", *self.keys) + b"".join(self.values)
        else:
            body = struct.pack(f"<{n}Q{n}I", *self.keys, *self.children)
        raw = head + body
        if len(raw) > page_size:
            raise ValueError(f"page {self.pid} overflows {page_size} bytes")
        return raw + bytes(page_size - len(raw))

    @classmethod
    def from_bytes(cls, pid: int, raw: bytes, payload: int) -> "Page":
        p_lsn, kind, level, n = PAGE_HEADER.unpack_from(raw, 0)
        if kind == 0:  # never written: allocated but lost in the crash
            return cls(pid)
        off = PAGE_HEADER_SIZE
        keys = list(struct.unpack_from(f"<{n}Q", raw, off))
        off += 8 * n
        if kind == LEAF:
            vals = [raw[off + i * payload : off + (i + 1) * payload] for i in range(n)]
            return cls(pid, LEAF, p_lsn, 0, keys, vals)
        children = list(struct.unpack_from(f"<{n}I", raw, off))
        return cls(pid, INDEX, p_lsn, level, keys, children=children)


class PageFile:
    """Single database file: header page 0, then data and index pages."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._fd = os.open(self.path, os.O_RDWR)
        head = os.pread(self._fd, _FILE_HEADER.size, 0)
        magic, self.page_size, self.payload, self.table_id, root = _FILE_HEADER.unpack(head)
        if magic != FILE_MAGIC:
            raise ValueError(f"{self.path}: not a database file")
        self._allocated = max(self.pages_on_disk, ROOT_PID + 1)

    @classmethod
    def create(cls, path: Union[str, Path], page_size: int, payload: int, table_id: int = 1) -> "PageFile":
        head = _FILE_HEADER.pack(FILE_MAGIC, page_size, payload, table_id, ROOT_PID)
        with open(path, "wb") as f:
            f.write(head + bytes(page_size - len(head)))
        return cls(path)

    @property
    def pages_on_disk(self) -> int:
        return os.fstat(self._fd).st_size // self.page_size

    @property
    def num_pages(self) -> int:
        return self._allocated

    def allocate(self) -> int:
        pid = self._allocated
        self._allocated += 1
        return pid

    def note_allocated(self, pid: int) -> None:
        self._allocated = max(self._allocated, pid + 1)

    def read(self, pid: int) -> Page:
        if pid <= 0 or pid >= self._allocated:
            raise PageFault(f"page {pid} outside file of {self._allocated} pages")
        raw = os.pread(self._fd, self.page_size, pid * self.page_size)
        if len(raw) < self.page_size:
            return Page(pid)
        return Page.from_bytes(pid, raw, self.payload)

    def read_plsn(self, pid: int) -> int:
        raw = os.pread(self._fd, 8, pid * self.page_size)
        return struct.unpack("<Q", raw)[0] if len(raw) == 8 else NULL_LSN

    def write(self, page: Page) -> None:
        os.pwrite(self._fd, page.to_bytes(self.page_size), page.pid * self.page_size)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1


@dataclass
class IoCosts:
    sync_read: int = 100
    seq_page: int = 10
    block_base: int = 100
    cpu_record: int = 1


@dataclass
class IoClock:
    """Simulated time plus IO counters.

    One device serves reads in issue order; ``device_free`` is when it
    next becomes idle.
    """

    costs: IoCosts = field(default_factory=IoCosts)
    now: int = 0
    device_free: int = 0
    data_pages_fetched: int = 0
    index_pages_fetched: int = 0
    log_pages_read: int = 0
    sync_stalls: int = 0
    index_stalls: int = 0
    prefetch_issued: int = 0
    prefetch_blocks: int = 0
    prefetch_hits: int = 0
    prefetch_waits: int = 0
    pages_written: int = 0

    def sync_read(self) -> None:
        start = max(self.now, self.device_free)
        self.now = self.device_free = start + self.costs.sync_read

    def block_read(self, n: int) -> int:
        start = max(self.now, self.device_free)
        self.device_free = start + self.costs.block_base + (n - 1) * self.costs.seq_page
        return self.device_free

    def wait_until(self, t: int) -> None:
        self.now = max(self.now, t)

    def cpu(self, units: int = 1) -> None:
        self.now += units * self.costs.cpu_record

    def read_log_pages(self, n: int) -> None:
        self.log_pages_read += n
        self.now += n * self.costs.seq_page

    def counters(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("costs", "device_free")}


class FlushMonitor:
    """Accumulates the dirty and written PIDs between two Δ records."""

    def __init__(self, track_lsns: bool = False):
        self.track_lsns = track_lsns
        self.reset()

    def reset(self) -> None:
        self.dirty_set: list[int] = []
        self.written_set: list[int] = []
        self.dirty_lsns: Optional[list[int]] = [] if self.track_lsns else None
        self.fw_lsn: Optional[int] = None
        self.first_dirty: Optional[int] = None

    def __len__(self) -> int:
        return len(self.dirty_set) + len(self.written_set)

    def on_dirty(self, pid: int, lsn: int) -> None:
        if self.fw_lsn is not None and self.first_dirty is None:
            self.first_dirty = len(self.dirty_set)
        self.dirty_set.append(pid)
        if self.dirty_lsns is not None:
            self.dirty_lsns.append(lsn)

    def on_written(self, pid: int, stable_lsn: int) -> None:
        if not self.written_set:
            self.fw_lsn = stable_lsn
        self.written_set.append(pid)

    def snapshot_first_dirty(self) -> int:
        return len(self.dirty_set) if self.first_dirty is None else self.first_dirty


class WalGate(Protocol):
    """What the pool needs from whoever owns the log."""

    e_lsn: int

    def eosl(self) -> int: ...


@dataclass
class Frame:
    page: Page
    dirty: bool = False
    ref: bool = True
    gen: int = 0
    rec_lsn: int = NULL_LSN  # first dirtying since last flush
    first_update_lsn: int = NULL_LSN
    ready_at: int = 0  # simulated completion time of a prefetch
    prefetched: bool = False
    epoch: int = -1
    pinned: bool = False


class BufferPool:
    """Fixed-capacity page cache with clock (second-chance) replacement.

    Frames touched during the current operation epoch are never chosen as
    victims, which is what lets a split hold several pages at once.
    """

    def __init__(
        self,
        pagefile: PageFile,
        capacity: int,
        clock: Optional[IoClock] = None,
        wal: Optional[WalGate] = None,
        monitor: Optional[FlushMonitor] = None,
    ):
        if capacity < 4:
            raise ValueError("buffer pool needs at least 4 frames")
        self.file = pagefile
        self.capacity = capacity
        self.clock = clock or IoClock()
        self.wal = wal
        self.monitor = monitor
        self.frames: "OrderedDict[int, Frame]" = OrderedDict()
        self.generation = 0
        self.epoch = 0
        self.on_monitor_change: Optional[Callable[[], None]] = None
        self.fetched_data: set[int] = set()
        self.record_fetches = False

    # -- lookups -------------------------------------------------------

    def begin_op(self) -> None:
        self.epoch += 1

    def __contains__(self, pid: int) -> bool:
        return pid in self.frames

    def is_dirty(self, pid: int) -> bool:
        f = self.frames.get(pid)
        return bool(f and f.dirty)

    def dirty_pids(self) -> list[int]:
        return [pid for pid, f in self.frames.items() if f.dirty]

    def get_page(self, pid: int) -> Page:
        frame = self.frames.get(pid)
        clock = self.clock
        if frame is not None:
            frame.ref = True
            frame.epoch = self.epoch
            if frame.prefetched:
                frame.prefetched = False
                clock.prefetch_hits += 1
                if frame.ready_at > clock.now:
                    clock.prefetch_waits += 1
                    clock.wait_until(frame.ready_at)
            return frame.page
        if pid <= 0 or pid >= self.file.num_pages:
            raise PageFault(f"page {pid} outside file of {self.file.num_pages} pages")
        self._make_room()
        page = self.file.read(pid)
        clock.sync_read()
        if page.kind == INDEX:
            clock.index_pages_fetched += 1
            clock.index_stalls += 1
        else:
            clock.data_pages_fetched += 1
            clock.sync_stalls += 1
            if self.record_fetches:
                self.fetched_data.add(pid)
        self.frames[pid] = Frame(page, epoch=self.epoch)
        return page

    def new_page(self, pid: int, kind: int, level: int = 0) -> Page:
        """Install a freshly allocated page without reading it."""
        self._make_room()
        page = Page(pid, kind, level=level)
        self.frames[pid] = Frame(page, epoch=self.epoch)
        return page

    def peek_plsn(self, pid: int) -> int:
        """pLSN without touching counters or cache state (audit use only)."""
        frame = self.frames.get(pid)
        return frame.page.p_lsn if frame else self.file.read_plsn(pid)

    # -- dirtying and flushing -----------------------------------------

    def mark_dirty(self, pid: int, lsn: int, update: bool = True) -> None:
        frame = self.frames[pid]
        frame.page.p_lsn = lsn
        if not frame.dirty:
            frame.dirty = True
            frame.gen = self.generation
            frame.rec_lsn = lsn
        if update and frame.first_update_lsn == NULL_LSN:
            frame.first_update_lsn = lsn
        # SMO pages are redone from images, so only updates reach a Δ
        if update and self.monitor is not None:
            self.monitor.on_dirty(pid, lsn)
            if self.on_monitor_change:
                self.on_monitor_change()

    def flush_page(self, pid: int) -> bool:
        frame = self.frames.get(pid)
        if frame is None or not frame.dirty:
            return False
        wal = self.wal
        if wal is not None:
            if frame.page.p_lsn > wal.e_lsn:
                wal.eosl()
                if frame.page.p_lsn > wal.e_lsn:
                    raise WalViolation(f"page {pid} pLSN {frame.page.p_lsn} > eLSN {wal.e_lsn}")
            if self.monitor is not None and not self.monitor.written_set:
                # FW-LSN must cover every record appended so far
                wal.eosl()
        self.file.write(frame.page)
        self.clock.pages_written += 1
        frame.dirty = False
        frame.rec_lsn = frame.first_update_lsn = NULL_LSN
        if self.monitor is not None:
            self.monitor.on_written(pid, wal.e_lsn if wal is not None else NULL_LSN)
            if self.on_monitor_change:
                self.on_monitor_change()
        return True

    def flush_all(self) -> int:
        return sum(self.flush_page(pid) for pid in list(self.frames))

    def flip_generation(self) -> list[int]:
        """Start a checkpoint sweep; return the pages dirtied before it."""
        old = self.generation
        self.generation ^= 1
        return [pid for pid, f in self.frames.items() if f.dirty and f.gen == old]

    def needs_sweep(self, pid: int) -> bool:
        f = self.frames.get(pid)
        return bool(f and f.dirty and f.gen != self.generation)

    def oldest_dirty(self, n: int) -> list[int]:
        dirty = [(f.rec_lsn, pid) for pid, f in self.frames.items() if f.dirty]
        dirty.sort()
        return [pid for _, pid in dirty[:n]]

    # -- replacement ---------------------------------------------------

    def _make_room(self) -> None:
        frames = self.frames
        spins = 0
        while len(frames) >= self.capacity:
            pid, frame = next(iter(frames.items()))
            if frame.pinned or frame.epoch == self.epoch or (frame.ref and spins < 2 * len(frames)):
                frame.ref = False
                frames.move_to_end(pid)
                spins += 1
                if spins > 4 * len(frames):
                    raise RuntimeError("buffer pool exhausted by the current operation")
                continue
            if frame.dirty:
                self.flush_page(pid)
            del frames[pid]

    def pin(self, pid: int) -> None:
        self.frames[pid].pinned = True

    def evict_all(self) -> None:
        self.frames.clear()

    # -- prefetch ------------------------------------------------------

    def prefetch(self, pids: Iterable[int]) -> int:
        """Issue asynchronous block reads; return the number of blocks."""
        limit = self.file.num_pages
        todo = sorted({p for p in pids if 0 < p < limit and p not in self.frames})
        if not todo:
            return 0
        runs: list[list[int]] = [[todo[0]]]
        for p in todo[1:]:
            run = runs[-1]
            if p == run[-1] + 1 and len(run) < BLOCK_PAGES:
                run.append(p)
            else:
                runs.append([p])
        clock = self.clock
        for run in runs:
            done = clock.block_read(len(run))
            clock.prefetch_blocks += 1
            for pid in run:
                self._make_room()
                page = self.file.read(pid)
                if page.kind == INDEX:
                    clock.index_pages_fetched += 1
                else:
                    clock.data_pages_fetched += 1
                    if self.record_fetches:
                        self.fetched_data.add(pid)
                clock.prefetch_issued += 1
                self.frames[pid] = Frame(page, ref=True, ready_at=done, prefetched=True, epoch=-1)
        return len(runs)
