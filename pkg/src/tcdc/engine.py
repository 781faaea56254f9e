"""Normal execution: transactions, the TC/DC boundary, EOSL/RSSP,
penultimate checkpoints, Δ/BW emission and crash injection.

The TC only ever hands the DC a key and a value; the DC picks the page.
The PID the DC reports back is stamped on the TC's update record purely
so that the physiological (SQL-style) methods can recover from the same
log; logical recovery never reads it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from .btree import BTree, LoadReport, bulk_load, initial_value
from .log import (
    F_PREV_ABSENT,
    Kind,
    NULL_LSN,
    BeginCheckpoint,
    BwRecord,
    DeltaRecord,
    EndCheckpoint,
    Log,
    RsspMarker,
    SmoRecord,
    TxnEnd,
    UpdateRecord,
)
from .storage import BufferPool, FlushMonitor, IoClock, IoCosts, PageFile

log = logging.getLogger(__name__)

DATA_FILE = "data.db"
LOG_FILE = "wal.log"
CONFIG_FILE = "config.json"


class EngineError(Exception):
    pass


@dataclass
class EngineConfig:
    page_size: int = 8192
    payload: int = 92
    pool_pages: int = 1024
    delta_threshold: int = 100
    perfect_dpt: bool = False  # also log DirtyLSNs in Δ records
    eosl_before_delta: bool = True
    flusher_every: int = 0  # updates between background flusher passes; 0 = off
    flusher_batch: int = 1
    table_id: int = 1
    costs: IoCosts = field(default_factory=IoCosts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        d = dict(d)
        costs = IoCosts(**d.pop("costs", {}))
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(costs=costs, **known)

    def save(self, directory: Path) -> None:
        (directory / CONFIG_FILE).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: Path) -> "EngineConfig":
        return cls.from_dict(json.loads((directory / CONFIG_FILE).read_text()))


@dataclass
class Transaction:
    txn_id: int
    state: str = "active"
    last_lsn: int = NULL_LSN
    updates: int = 0


@dataclass
class CrashSnapshot:
    """Ground truth at the crash, for audits only. Recovery never sees it."""

    # pid -> (first dirtying LSN since last flush, first update LSN since last flush)
    dirty: dict[int, tuple[int, int]]
    cached: list[int]
    stable_lsn: int
    end_lsn: int
    active_txns: dict[int, int]
    checkpoints: int
    delta_records: int
    bw_records: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dirty"] = {str(k): list(v) for k, v in self.dirty.items()}
        d["active_txns"] = {str(k): v for k, v in self.active_txns.items()}
        return d


class DataComponent:
    """Owns pages, the cache, the B-tree and the flush monitor.

    Learns the TC's stable-log end only through :meth:`receive_eosl` and
    may ask for one (``request_eosl``) when the write-ahead rule blocks a
    flush.
    """

    def __init__(self, wal: Log, pagefile: PageFile, config: EngineConfig, tc: "Engine"):
        self.log = wal
        self.config = config
        self._tc = tc
        self.e_lsn = NULL_LSN
        self.rssp_lsn = NULL_LSN
        self.monitor = FlushMonitor(track_lsns=config.perfect_dpt)
        self.clock = IoClock(costs=config.costs)
        self.pool = BufferPool(pagefile, config.pool_pages, self.clock, wal=self, monitor=self.monitor)
        self.pool.on_monitor_change = self._maybe_emit
        self.tree = BTree(self.pool, config.table_id, log_smo=self._log_smo)
        self.delta_records = 0
        self.bw_records = 0
        self.updates_since_delta = 0
        self._emitting = False
        self._sweep: list[int] = []

    # EOSL ------------------------------------------------------------

    def eosl(self) -> int:
        """Ask the TC for a fresh EOSL (write-ahead rule or FW-LSN capture)."""
        return self._tc.eosl()

    def receive_eosl(self, e_lsn: int) -> None:
        if e_lsn > self.e_lsn:
            self.e_lsn = e_lsn

    # Δ / BW emission ---------------------------------------------------

    def _maybe_emit(self) -> None:
        if not self._emitting and len(self.monitor) >= self.config.delta_threshold:
            self.emit_delta(force=True)

    def emit_delta(self, force: bool = False) -> Optional[DeltaRecord]:
        m = self.monitor
        if not force and len(m) < self.config.delta_threshold:
            return None
        self._emitting = True
        try:
            if self.config.eosl_before_delta:
                self.eosl()
            rec = DeltaRecord(
                dirty_set=list(m.dirty_set),
                written_set=list(m.written_set),
                fw_lsn=m.fw_lsn if m.fw_lsn is not None else NULL_LSN,
                first_dirty=m.snapshot_first_dirty(),
                tc_lsn=self.e_lsn,
                dirty_lsns=list(m.dirty_lsns) if m.dirty_lsns is not None else None,
            )
            self.log.append(rec)
            self.delta_records += 1
            if rec.written_set:
                self.log.append(BwRecord(list(rec.written_set), rec.fw_lsn))
                self.bw_records += 1
            m.reset()
            self.updates_since_delta = 0
        finally:
            self._emitting = False
        return rec

    def _log_smo(self, rec: SmoRecord) -> int:
        return self.log.append(rec)

    # data operations -------------------------------------------------

    def prepare_update(self, key: int):
        """Fetch (and split if needed) the leaf for ``key``.

        Returns ``(leaf, previous value or None)``. All IO the update will
        need happens here, before the TC assigns the record its LSN.
        """
        self.pool.begin_op()
        leaf = self.tree.locate_for_update(key, inserting=True)
        return leaf, BTree.lookup(leaf, key)

    def apply_update(self, leaf, key: int, value: Optional[bytes], lsn: int) -> None:
        BTree.apply(leaf, key, value)
        self.updates_since_delta += 1
        self.pool.mark_dirty(leaf.pid, lsn)

    def flusher_pass(self) -> int:
        return sum(self.pool.flush_page(pid) for pid in self.pool.oldest_dirty(self.config.flusher_batch))

    # RSSP ------------------------------------------------------------

    def begin_rssp(self) -> int:
        """Flip the generation bit; pages dirtied from now on are not swept."""
        self._sweep = self.pool.flip_generation()
        return len(self._sweep)

    def rssp_step(self, n: Optional[int] = None) -> int:
        """Flush up to ``n`` pages of the sweep; return pages still pending."""
        todo = self._sweep[: len(self._sweep) if n is None else n]
        del self._sweep[: len(todo)]
        for pid in todo:
            if self.pool.needs_sweep(pid):
                self.pool.flush_page(pid)
        return len(self._sweep)

    def finish_rssp(self, rssp_lsn: int) -> int:
        self.rssp_step()
        self.emit_delta(force=True)
        marker = self.log.append(RsspMarker(rssp_lsn))
        self.rssp_lsn = rssp_lsn
        return marker

    def rssp(self, rssp_lsn: int) -> int:
        """Make every page dirtied at or before ``rssp_lsn`` durable, then ack."""
        if rssp_lsn > self.log.stable_lsn:
            raise EngineError(f"rssp({rssp_lsn}) beyond the stable log")
        self.begin_rssp()
        return self.finish_rssp(rssp_lsn)


class Engine:
    """One table, one log, one data file; the TC half lives here directly."""

    def __init__(self, directory: Union[str, Path], config: Optional[EngineConfig] = None):
        self.dir = Path(directory)
        self.config = config or EngineConfig.load(self.dir)
        self.log = Log(self.dir / LOG_FILE, self.config.page_size)
        self.pagefile = PageFile(self.dir / DATA_FILE)
        if self.pagefile.page_size != self.config.page_size or self.pagefile.payload != self.config.payload:
            raise EngineError("config does not match the data file geometry")
        self.dc = DataComponent(self.log, self.pagefile, self.config, self)
        self.txns: dict[int, Transaction] = {}
        self._next_txn = 1
        self.checkpoints = 0
        self.updates = 0
        self.updates_since_checkpoint = 0
        self._ckpt_lsn: Optional[int] = None
        self._crashed = False
        self.dc.receive_eosl(self.log.stable_lsn)
        # txn ids must stay unique across restarts
        for rec in self.log.scan(kinds=(Kind.UPDATE, Kind.COMMIT, Kind.ABORT)):
            self._next_txn = max(self._next_txn, rec.txn_id + 1)

    @classmethod
    def create(
        cls,
        directory: Union[str, Path],
        config: EngineConfig,
        rows: Union[int, Iterable[tuple[int, bytes]]] = 0,
    ) -> tuple["Engine", LoadReport]:
        """Bulk-load a fresh database and return an engine over it."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        if any(d.iterdir()):
            raise EngineError(f"{d} is not empty")
        pf = PageFile.create(d / DATA_FILE, config.page_size, config.payload, config.table_id)
        if isinstance(rows, int):
            items = ((k, initial_value(k, config.payload)) for k in range(rows))
        else:
            items = rows
        report = bulk_load(pf, items)
        pf.close()
        Log(d / LOG_FILE, config.page_size, create=True).close()
        config.save(d)
        return cls(d, config), report

    # accessors -------------------------------------------------------

    @property
    def pool(self) -> BufferPool:
        return self.dc.pool

    @property
    def tree(self) -> BTree:
        return self.dc.tree

    def read(self, key: int) -> Optional[bytes]:
        self.pool.begin_op()
        return self.tree.get(key)

    # transactions ----------------------------------------------------

    def begin(self) -> int:
        self._check()
        txn = Transaction(self._next_txn)
        self._next_txn += 1
        self.txns[txn.txn_id] = txn
        return txn.txn_id

    def update(self, txn_id: int, key: int, value: bytes) -> int:
        """Write ``value`` under ``key`` for an active transaction."""
        self._check()
        txn = self.txns[txn_id]
        if txn.state != "active":
            raise EngineError(f"transaction {txn_id} is {txn.state}")
        if len(value) != self.config.payload:
            raise ValueError(f"value must be {self.config.payload} bytes")
        leaf, prev = self.dc.prepare_update(key)
        rec = UpdateRecord(
            txn_id,
            self.config.table_id,
            key,
            value,
            prev if prev is not None else b"",
            leaf.pid,
            txn.last_lsn,
            F_PREV_ABSENT if prev is None else 0,
        )
        lsn = self.log.append(rec)
        self.dc.apply_update(leaf, key, value, lsn)
        txn.last_lsn = lsn
        txn.updates += 1
        self.updates += 1
        self.updates_since_checkpoint += 1
        every = self.config.flusher_every
        if every and self.updates % every == 0:
            self.dc.flusher_pass()
        return lsn

    def commit(self, txn_id: int) -> int:
        self._check()
        txn = self.txns.pop(txn_id)
        lsn = self.log.append(TxnEnd(txn_id, txn.last_lsn, committed=True))
        txn.state = "committed"
        self.eosl()
        return lsn

    def abort(self, txn_id: int) -> int:
        """Roll the transaction back logically and log its abort."""
        from .recovery import rollback

        self._check()
        txn = self.txns.pop(txn_id)
        rollback(self.log, self.tree, txn_id, txn.last_lsn)
        txn.state = "aborted"
        self.eosl()
        return txn.last_lsn

    # control operations ----------------------------------------------

    def eosl(self) -> int:
        """Force the log and hand the stable end to the DC."""
        e_lsn = self.log.force()
        self.dc.receive_eosl(e_lsn)
        return e_lsn

    def begin_checkpoint(self) -> int:
        if self._ckpt_lsn is not None:
            raise EngineError("checkpoint already in progress")
        active = {t.txn_id: t.last_lsn for t in self.txns.values()}
        b = self.log.append(BeginCheckpoint(active))
        self.eosl()
        self.dc.begin_rssp()
        self._ckpt_lsn = b
        return b

    def checkpoint_step(self, pages: Optional[int] = None) -> int:
        return self.dc.rssp_step(pages)

    def finish_checkpoint(self) -> tuple[int, int]:
        b = self._ckpt_lsn
        if b is None:
            raise EngineError("no checkpoint in progress")
        self.dc.finish_rssp(b)  # ack: sweep done, forced Δ and marker logged
        e = self.log.append(EndCheckpoint(b))
        self.eosl()
        self._ckpt_lsn = None
        self.checkpoints += 1
        self.updates_since_checkpoint = 0
        return b, e

    def checkpoint(self) -> tuple[int, int]:
        self.begin_checkpoint()
        return self.finish_checkpoint()

    @property
    def checkpoint_in_progress(self) -> bool:
        return self._ckpt_lsn is not None

    # shutdown and crash ----------------------------------------------

    def crash(self) -> CrashSnapshot:
        """Discard all volatile state; keep only what reached storage."""
        self._check()
        frames = self.pool.frames
        snap = CrashSnapshot(
            dirty={pid: (f.rec_lsn, f.first_update_lsn) for pid, f in frames.items() if f.dirty},
            cached=sorted(frames),
            stable_lsn=self.log.stable_lsn,
            end_lsn=self.log.last_lsn,
            active_txns={t.txn_id: t.last_lsn for t in self.txns.values()},
            checkpoints=self.checkpoints,
            delta_records=self.dc.delta_records,
            bw_records=self.dc.bw_records,
        )
        self.log.crash()
        self.pagefile.close()
        self.pool.evict_all()
        self._crashed = True
        log.debug("crash at stable LSN %d with %d dirty pages", snap.stable_lsn, len(snap.dirty))
        return snap

    def close(self) -> None:
        """Clean shutdown: everything forced and flushed."""
        if self._crashed:
            return
        self.eosl()
        self.pool.flush_all()
        self.log.close()
        self.pagefile.close()
        self._crashed = True

    def _check(self) -> None:
        if self._crashed:
            raise EngineError("engine is closed")

    def __enter__(self) -> "Engine":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
