"""Crash recovery: analysis passes, DPT construction, the five redo
methods, logical undo and the fetch-count cost model.

Methods:

- ``Log0``: logical redo, every record searched and its page fetched.
- ``Log1``: logical redo filtered by a DPT built from Δ records.
- ``Log2``: ``Log1`` plus read-ahead driven by the PF-list.
- ``SQL1``: physiological redo filtered by a DPT built from BW records.
- ``SQL2``: ``SQL1`` plus log-driven read-ahead.

Physiological methods read the PID annotation on update records and never
touch the B-tree during redo; logical methods never read it.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional, Union

from .btree import BTree, IntegrityError
from .engine import DATA_FILE, LOG_FILE, EngineConfig
from .log import (
    F_COMPENSATION,
    F_DELETE,
    F_PREV_ABSENT,
    NULL_LSN,
    BeginCheckpoint,
    BwRecord,
    DeltaRecord,
    Log,
    SmoRecord,
    TxnEnd,
    UpdateRecord,
)
from .storage import BufferPool, IoClock, PageFile

log = logging.getLogger(__name__)

METHODS = ("Log0", "Log1", "Log2", "SQL1", "SQL2")
DPT_MODES = ("standard", "perfect", "reduced")
DEFAULT_WINDOW = 64


class RecoveryError(Exception):
    pass


class FilterUnsound(AssertionError):
    """The DPT filter skipped a record the page had not yet absorbed."""


class SimulatedCrash(Exception):
    """Raised to abandon recovery part way, as a second crash would."""


# -- DPT ---------------------------------------------------------------


@dataclass
class DptEntry:
    r_lsn: int
    last_lsn: int


class Dpt(dict):
    """PID -> :class:`DptEntry`."""

    def add_entry(self, pid: int, lsn: int) -> None:
        e = self.get(pid)
        if e is None:
            self[pid] = DptEntry(lsn, lsn)
        elif lsn > e.last_lsn:
            e.last_lsn = lsn

    def rlsns(self) -> dict[int, int]:
        return {pid: e.r_lsn for pid, e in self.items()}


def sql_analysis(records: Iterable, scan_start: int) -> Dpt:
    """DPT from update PIDs pruned by BW records (physiological analysis).

    SMO pages are left out: their images are reinstalled before any
    record-level redo, so the table only has to cover update records.
    """
    dpt = Dpt()
    for rec in records:
        if rec.lsn < scan_start:
            continue
        if isinstance(rec, UpdateRecord):
            dpt.add_entry(rec.pid, rec.lsn)
        elif isinstance(rec, BwRecord):
            fw = rec.fw_lsn
            for pid in rec.written_set:
                e = dpt.get(pid)
                if e is None:
                    continue
                if e.last_lsn <= fw:
                    del dpt[pid]
                elif e.r_lsn < fw:
                    e.r_lsn = fw
    return dpt


@dataclass
class DcAnalysis:
    dpt: Dpt
    last_delta_tc_lsn: int
    pf_list: list[int]
    deltas_used: int


def dc_analysis(records: Iterable, after: int, mode: str = "standard") -> DcAnalysis:
    """DPT from Δ records whose TC-LSN is beyond ``after``.

    ``after`` is the LSN of the bCkpt the redo scan starts from (0 when
    no checkpoint completed). It also seeds the previous-Δ TC-LSN.
    """
    if mode not in DPT_MODES:
        raise ValueError(f"unknown DPT mode {mode!r}")
    dpt = Dpt()
    pf: list[int] = []
    prev = after
    used = 0
    for rec in records:
        if not isinstance(rec, DeltaRecord) or rec.tc_lsn <= after:
            continue
        used += 1
        fw = rec.fw_lsn
        if mode == "perfect":
            if rec.dirty_lsns is None:
                raise RecoveryError("perfect DPT mode needs Δ records with DirtyLSNs")
            for pid, lsn in zip(rec.dirty_set, rec.dirty_lsns):
                if lsn <= after:
                    continue
                if pid not in dpt:
                    pf.append(pid)
                dpt.add_entry(pid, lsn)
            for pid in rec.written_set:
                e = dpt.get(pid)
                if e is None:
                    continue
                if e.last_lsn <= fw:
                    del dpt[pid]
                elif e.r_lsn < fw:
                    e.r_lsn = fw
        elif mode == "reduced":
            for pid in rec.dirty_set:
                if pid not in dpt:
                    pf.append(pid)
                dpt.add_entry(pid, prev)
            # only entries left over from earlier Δ records may go
            for pid in rec.written_set:
                e = dpt.get(pid)
                if e is not None and e.last_lsn < prev:
                    del dpt[pid]
        else:
            first = rec.first_dirty if fw != NULL_LSN else len(rec.dirty_set)
            for i, pid in enumerate(rec.dirty_set):
                if pid not in dpt:
                    pf.append(pid)
                dpt.add_entry(pid, prev if i < first else fw)
            for pid in rec.written_set:
                e = dpt.get(pid)
                if e is None:
                    continue
                if e.last_lsn < fw:
                    del dpt[pid]
                elif e.r_lsn < fw:
                    e.r_lsn = fw
        prev = rec.tc_lsn
    return DcAnalysis(dpt, prev, pf, used)


def txn_analysis(records: Iterable, scan_start: int) -> dict[int, int]:
    """Loser transactions: txn id -> LSN of its last logged record."""
    active: dict[int, int] = {}
    for rec in records:
        if rec.lsn < scan_start:
            continue
        if isinstance(rec, BeginCheckpoint):
            if rec.lsn == scan_start:
                active.update(rec.active_txns)
        elif isinstance(rec, UpdateRecord):
            active[rec.txn_id] = rec.lsn
        elif isinstance(rec, TxnEnd):
            active.pop(rec.txn_id, None)
    return active


# -- undo --------------------------------------------------------------


def rollback(wal: Log, tree: BTree, txn_id: int, last_lsn: int) -> int:
    """Revert a transaction's updates newest first through key search.

    Each reversal is logged as a compensation update; a final abort record
    closes the transaction. Returns the number of reversals.
    """
    pool = tree.pool
    undone = 0
    tail = last_lsn
    lsn = last_lsn
    while lsn != NULL_LSN:
        rec = wal.read_at(lsn)
        if not isinstance(rec, UpdateRecord) or rec.txn_id != txn_id:
            raise IntegrityError(f"broken undo chain for txn {txn_id} at LSN {lsn}")
        lsn = rec.prev_lsn_of_txn
        if rec.is_compensation:
            continue
        restore_absent = bool(rec.flags & F_PREV_ABSENT)
        pool.begin_op()
        leaf = tree.locate_for_update(rec.key, inserting=not restore_absent)
        value = None if restore_absent else rec.prev_value
        current = BTree.lookup(leaf, rec.key)
        comp = UpdateRecord(
            txn_id,
            rec.table_id,
            rec.key,
            value if value is not None else b"",
            current if current is not None else b"",
            leaf.pid,
            tail,
            F_COMPENSATION | (F_DELETE if restore_absent else 0) | (F_PREV_ABSENT if current is None else 0),
        )
        tail = wal.append(comp)
        BTree.apply(leaf, rec.key, value)
        pool.mark_dirty(leaf.pid, tail)
        undone += 1
    wal.append(TxnEnd(txn_id, tail, committed=False))
    return undone


# -- cost model --------------------------------------------------------


def predict_cost(
    method: str,
    *,
    log_records: int = 0,
    log_pages: int = 0,
    index_pages: int = 0,
    dpt_size: int = 0,
    tail_records: int = 0,
) -> Optional[int]:
    """Predicted page fetches for a redo pass; None where no model exists."""
    if method == "Log0":
        return log_records + log_pages + index_pages
    if method == "SQL1":
        return dpt_size + log_pages
    if method == "Log1":
        return dpt_size + tail_records + log_pages + index_pages
    if method in ("Log2", "SQL2"):
        return None
    raise ValueError(f"unknown method {method!r}")


# -- recovery driver ---------------------------------------------------


@dataclass
class RecoveryStats:
    method: str
    dpt_mode: str = "standard"
    scan_start: int = 0
    records_scanned: int = 0
    redo_applied: int = 0
    skipped_by_filter: int = 0
    skipped_by_plsn: int = 0
    tail_records: int = 0
    last_delta_tc_lsn: int = 0
    dpt_size: int = 0
    pf_list_len: int = 0
    deltas_used: int = 0
    smo_pages_redone: int = 0
    index_pages_loaded: int = 0
    losers: int = 0
    undo_records: int = 0
    analysis_log_pages: int = 0
    log_pages_read: int = 0
    data_pages_fetched: int = 0
    index_pages_fetched: int = 0
    sync_stalls: int = 0
    index_stalls: int = 0
    prefetch_issued: int = 0
    prefetch_blocks: int = 0
    prefetch_hits: int = 0
    prefetch_waits: int = 0
    redo_time: int = 0
    predicted_fetches: Optional[int] = None
    digest: str = ""

    @property
    def measured_fetches(self) -> int:
        """Page fetches in the terms the cost model counts them."""
        n = self.data_pages_fetched + self.log_pages_read
        if self.method.startswith("Log"):
            n += self.index_pages_fetched
        return n

    def to_row(self) -> dict:
        row = asdict(self)
        row["measured_fetches"] = self.measured_fetches
        return row

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)] + ["measured_fetches"]


@dataclass
class RecoveryOptions:
    pool_pages: Optional[int] = None  # default: the engine's
    dpt_mode: str = "standard"
    window: int = DEFAULT_WINDOW
    refine_dpt: bool = False  # SQL only: drop entries once pLSN >= lastLSN
    audit_filter: bool = False
    audit_tree: bool = False
    record_fetches: bool = False
    crash_after: Optional[int] = None  # abandon after this many redo records
    undo: bool = True


@dataclass
class _Scan:
    start: int
    ckpt: bool  # True when start is a bCkpt
    records: list = field(default_factory=list)
    updates: list = field(default_factory=list)
    smos: list = field(default_factory=list)


def read_segment(wal: Log) -> _Scan:
    start = wal.find_redo_scan_start()
    scan = _Scan(start, False)
    for rec in wal.scan(start):
        if rec.lsn == start and isinstance(rec, BeginCheckpoint):
            scan.ckpt = True
        scan.records.append(rec)
        if isinstance(rec, UpdateRecord):
            scan.updates.append(rec)
        elif isinstance(rec, SmoRecord):
            scan.smos.append(rec)
    return scan


class Recovery:
    """One recovery run of one method over a database directory."""

    def __init__(self, directory: Union[str, Path], method: str, options: Optional[RecoveryOptions] = None):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        self.dir = Path(directory)
        self.method = method
        self.opts = options or RecoveryOptions()
        self.config = EngineConfig.load(self.dir)
        self.logical = method.startswith("Log")
        self.prefetching = method in ("Log2", "SQL2")
        self.fetched: set[int] = set()

    # the WAL gate the pool sees during recovery
    @property
    def e_lsn(self) -> int:
        return self.log.stable_lsn

    def eosl(self) -> int:
        return self.log.force()

    def run(self) -> RecoveryStats:
        cfg, opts = self.config, self.opts
        self.log = Log(self.dir / LOG_FILE, cfg.page_size)
        self.file = PageFile(self.dir / DATA_FILE)
        try:
            return self._run(cfg, opts)
        finally:
            self.log.close()
            self.file.close()

    def _run(self, cfg: EngineConfig, opts: RecoveryOptions) -> RecoveryStats:
        stats = RecoveryStats(self.method, opts.dpt_mode)
        wal = self.log
        seg = read_segment(wal)
        stats.scan_start = seg.start
        page_size = cfg.page_size

        # DC: SMO redo on its own clock so method counters stay comparable
        smo_clock = IoClock(costs=cfg.costs)
        pool = BufferPool(self.file, opts.pool_pages or cfg.pool_pages, smo_clock, wal=self)
        self.pool = pool
        tree = BTree(pool, cfg.table_id)
        for rec in seg.smos:
            pool.begin_op()
            stats.smo_pages_redone += tree.redo_smo(rec)
        # every method starts record redo from the same cold cache
        pool.flush_all()
        pool.evict_all()
        clock = IoClock(costs=cfg.costs)
        pool.clock = clock
        pool.record_fetches = opts.record_fetches

        # analysis
        stats.analysis_log_pages = _pages(seg.start, wal.stable_end, page_size)
        dpt: Optional[Dpt] = None
        pf_list: list[int] = []
        last_delta = seg.start
        if self.method in ("SQL1", "SQL2"):
            dpt = sql_analysis(seg.records, seg.start)
        elif self.method != "Log0":
            after = seg.start if seg.ckpt else NULL_LSN
            dca = dc_analysis(seg.records, after, opts.dpt_mode)
            dpt, pf_list, stats.deltas_used = dca.dpt, dca.pf_list, dca.deltas_used
            # a Δ covers records up to and including its TC-LSN
            last_delta = max(dca.last_delta_tc_lsn, after)
        if dpt is not None:
            stats.dpt_size = len(dpt)
        stats.pf_list_len = len(pf_list)
        stats.last_delta_tc_lsn = last_delta
        self.dpt = dpt

        if self.logical:
            stats.index_pages_loaded = tree.preload_index()

        self._redo(stats, seg, tree, dpt, last_delta, pf_list)
        for k, v in clock.counters().items():
            if k == "now":
                stats.redo_time = v
            elif k != "pages_written":
                setattr(stats, k, v)
        self.fetched = set(pool.fetched_data)

        if opts.audit_tree:
            tree.audit()

        losers = txn_analysis(seg.records, seg.start)
        stats.losers = len(losers)
        if opts.undo:
            for txn_id in sorted(losers, reverse=True):
                stats.undo_records += rollback(wal, tree, txn_id, losers[txn_id])
            wal.force()

        if self.method == "Log0":
            stats.predicted_fetches = predict_cost(
                "Log0",
                log_records=stats.records_scanned,
                log_pages=stats.log_pages_read,
                index_pages=stats.index_pages_loaded,
            )
        elif self.method in ("Log1", "SQL1"):
            stats.predicted_fetches = predict_cost(
                self.method,
                log_pages=stats.log_pages_read,
                index_pages=stats.index_pages_loaded,
                dpt_size=stats.dpt_size,
                tail_records=stats.tail_records,
            )
        pool.flush_all()
        stats.digest = tree_digest(tree)
        return stats

    def _redo(self, stats, seg, tree, dpt, last_delta, pf_list) -> None:
        pool, clock, opts = self.pool, self.pool.clock, self.opts
        page_size = self.config.page_size
        logical, method = self.logical, self.method
        filtered = dpt is not None
        # read-ahead deeper than a quarter of the cache evicts its own pages
        window = max(2, min(opts.window, pool.capacity // 4))
        updates = seg.updates
        n = len(updates)
        audit = opts.audit_filter
        refine = opts.refine_dpt and not logical

        # log pages are charged as the scan reaches them
        page_no = seg.start // page_size - 1
        # SQL2 read-ahead position (index into updates)
        ahead = 0
        # Log2: PF-list restricted to the final DPT, paced by demand
        pf: list[int] = []
        pf_pos = 0
        demanded = 0
        pf_pending: set[int] = set()
        if method == "Log2":
            # a pid re-enters the list each time its entry is re-created;
            # the last occurrence is the one the surviving entry came from
            last = {pid: i for i, pid in enumerate(pf_list) if pid in dpt}
            pf = sorted(last, key=last.__getitem__)
            pf_pending = set(pf)
        tail_ahead = 0  # Log2 read-ahead through the tail via the cached index

        for i, rec in enumerate(updates):
            if opts.crash_after is not None and i >= opts.crash_after:
                raise SimulatedCrash(f"recovery abandoned after {i} records")
            lsn = rec.lsn
            p = lsn // page_size
            if p > page_no:
                clock.read_log_pages(p - page_no)
                page_no = p
            clock.cpu()
            stats.records_scanned += 1

            if method == "SQL2" and ahead < i + window // 2:
                ahead = self._sql_readahead(updates, max(ahead, i), min(n, i + window), dpt)
            if logical:
                pool.begin_op()
                pid = tree.find(rec.key)
                in_tail = filtered and lsn > last_delta
                if in_tail:
                    stats.tail_records += 1
                if filtered and not in_tail:
                    e = dpt.get(pid)
                    if e is None or lsn < e.r_lsn:
                        stats.skipped_by_filter += 1
                        if audit:
                            self._audit_skip(pid, lsn)
                        continue
                if method == "Log2":
                    if pid in pf_pending:
                        pf_pending.discard(pid)
                        demanded += 1
                    if pf_pos < len(pf) and pf_pos < demanded + window:
                        end = min(len(pf), max(pf_pos + window // 2, demanded + window))
                        pool.prefetch(pf[pf_pos:end])
                        pf_pos = end
                    if in_tail and tail_ahead < i + window // 2:
                        tail_ahead = self._tail_readahead(tree, updates, max(tail_ahead, i), min(n, i + window))
            else:
                pid = rec.pid
                e = dpt.get(pid)
                if e is None or lsn < e.r_lsn:
                    stats.skipped_by_filter += 1
                    if audit:
                        self._audit_skip(pid, lsn)
                    continue
                pool.begin_op()
            page = pool.get_page(pid)
            if lsn <= page.p_lsn:
                stats.skipped_by_plsn += 1
            else:
                BTree.apply(page, rec.key, None if rec.is_delete else rec.new_value)
                pool.mark_dirty(pid, lsn)
                stats.redo_applied += 1
            if refine:
                e = dpt.get(pid)
                if e is not None and page.p_lsn >= e.last_lsn:
                    del dpt[pid]

    def _sql_readahead(self, updates, lo: int, hi: int, dpt: Dpt) -> int:
        pids = []
        for rec in updates[lo:hi]:
            e = dpt.get(rec.pid)
            # records the redo filter will let through
            if e is not None and e.r_lsn <= rec.lsn:
                pids.append(rec.pid)
        self.pool.prefetch(pids)
        return hi

    def _tail_readahead(self, tree: BTree, updates, lo: int, hi: int) -> int:
        self.pool.prefetch([tree.find(rec.key) for rec in updates[lo:hi]])
        return hi

    def _audit_skip(self, pid: int, lsn: int) -> None:
        p_lsn = self.pool.peek_plsn(pid)
        if p_lsn < lsn:
            raise FilterUnsound(f"record {lsn} skipped but page {pid} has pLSN {p_lsn}")


def _pages(start: int, end: int, page_size: int) -> int:
    if end <= start:
        return 0
    return (end - 1) // page_size - start // page_size + 1


def recover(directory: Union[str, Path], method: str, **options) -> RecoveryStats:
    """Recover ``directory`` in place with ``method``; return its stats."""
    return Recovery(directory, method, RecoveryOptions(**options)).run()


# -- state inspection --------------------------------------------------


def tree_digest(tree: BTree) -> str:
    """Hash of every leaf's bytes (pLSN included) in key order."""
    h = hashlib.sha256()
    size = tree.file.page_size
    for leaf in tree.iter_leaves():
        h.update(leaf.pid.to_bytes(4, "little"))
        h.update(leaf.to_bytes(size))
    return h.hexdigest()


def open_tree(directory: Union[str, Path], pool_pages: int = 64) -> tuple[BTree, PageFile]:
    pf = PageFile(Path(directory) / DATA_FILE)
    return BTree(BufferPool(pf, pool_pages), pf.table_id), pf


def store_digest(directory: Union[str, Path]) -> str:
    tree, pf = open_tree(directory)
    try:
        return tree_digest(tree)
    finally:
        pf.close()


def store_items(directory: Union[str, Path]) -> dict[int, bytes]:
    tree, pf = open_tree(directory)
    try:
        return dict(tree.items())
    finally:
        pf.close()


@dataclass
class SegmentProfile:
    """Shape of the redo segment, for cost-model inputs and reports."""

    scan_start: int
    records: int
    distinct_pages: int
    log_pages: int
    deltas: int
    bws: int


def segment_profile(directory: Union[str, Path]) -> SegmentProfile:
    cfg = EngineConfig.load(Path(directory))
    with Log(Path(directory) / LOG_FILE, cfg.page_size) as wal:
        seg = read_segment(wal)
        end = wal.stable_end
    ups = seg.updates
    return SegmentProfile(
        seg.start,
        len(ups),
        len({r.pid for r in ups}),
        _pages(ups[0].lsn, end, cfg.page_size) if ups else 0,
        sum(isinstance(r, DeltaRecord) for r in seg.records),
        sum(isinstance(r, BwRecord) for r in seg.records),
    )
