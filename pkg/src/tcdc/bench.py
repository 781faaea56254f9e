"""Benchmark harness: workload generation, run-to-crash, per-method
recovery over copied file sets, and CSV sweeps over cache size and
checkpoint interval.

All timings are simulated IO time units, not wall-clock milliseconds.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import random
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

from .btree import LoadReport, initial_value
from .engine import LOG_FILE, CrashSnapshot, Engine, EngineConfig
from .log import Log, TxnEnd, UpdateRecord
from .recovery import METHODS, RecoveryOptions, RecoveryStats, Recovery, segment_profile, store_items
from .storage import IoCosts, leaf_capacity

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
SNAPSHOT = "crash.json"


class BenchError(Exception):
    pass


class DigestMismatch(BenchError):
    pass


class PredicateTimeout(BenchError):
    pass


@dataclass
class WorkloadSpec:
    rows: int = 400_000
    payload: int = 92
    updates_per_txn: int = 10
    distribution: str = "uniform"  # or "distinct": consecutive updates hit distinct leaves
    key_stride: int = 1  # loaded keys are 0, stride, 2*stride, ...
    insert_fraction: float = 0.0  # share of updates aimed at keys not loaded
    abort_fraction: float = 0.0
    max_updates: int = 5_000_000
    seed: int = 1


@dataclass
class CrashPredicate:
    """Crash at the first transaction boundary where all three hold."""

    checkpoints: int = 10
    since_checkpoint: int = 1600
    since_delta: int = 50
    losers: int = 0  # uncommitted transactions opened just before the crash
    loser_updates: int = 3
    mid_checkpoint_pages: Optional[int] = None  # crash inside a checkpoint after this many sweep pages


@dataclass
class ExperimentSpec:
    engine: EngineConfig = field(default_factory=EngineConfig)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    checkpoint_interval: int = 2000
    crash: CrashPredicate = field(default_factory=CrashPredicate)
    methods: tuple = METHODS
    cache_fractions: tuple = (0.02, 0.05, 0.10, 0.25, 0.60)
    ci_multipliers: tuple = (1, 5, 10)
    flusher_fraction: float = 0.0  # share of the cache each flusher pass cleans

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["cache_fractions"] = list(self.cache_fractions)
        d["ci_multipliers"] = list(self.ci_multipliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        return cls(
            engine=EngineConfig.from_dict(d.get("engine", {})),
            workload=WorkloadSpec(**d.get("workload", {})),
            checkpoint_interval=d.get("checkpoint_interval", 2000),
            crash=CrashPredicate(**d.get("crash", {})),
            methods=tuple(d.get("methods", METHODS)),
            cache_fractions=tuple(d.get("cache_fractions", (0.02, 0.05, 0.10, 0.25, 0.60))),
            ci_multipliers=tuple(d.get("ci_multipliers", (1, 5, 10))),
            flusher_fraction=d.get("flusher_fraction", 0.0),
        )

    def scaled(self, ci: float) -> "ExperimentSpec":
        """Same experiment with the checkpoint interval (and crash point) scaled."""
        return replace(
            self,
            checkpoint_interval=int(self.checkpoint_interval * ci),
            crash=replace(self.crash, since_checkpoint=int(self.crash.since_checkpoint * ci)),
        )


# -- workload ----------------------------------------------------------


class Workload:
    """Deterministic stream of transactions (lists of key/value pairs)."""

    def __init__(self, spec: WorkloadSpec, leaf_rows: int):
        self.spec = spec
        self.rng = random.Random(spec.seed)
        self.leaf_rows = leaf_rows
        self._i = 0
        if spec.distribution == "distinct":
            leaves = max(1, -(-spec.rows // leaf_rows))
            self._order = list(range(leaves))
            self.rng.shuffle(self._order)
        elif spec.distribution != "uniform":
            raise ValueError(f"unknown distribution {spec.distribution!r}")

    def _key(self) -> int:
        s, rng = self.spec, self.rng
        if s.insert_fraction and rng.random() < s.insert_fraction:
            return rng.randrange(s.rows * s.key_stride)
        if s.distribution == "distinct":
            leaf = self._order[self._i % len(self._order)]
            self._i += 1
            row = min(s.rows - 1, leaf * self.leaf_rows + rng.randrange(self.leaf_rows))
        else:
            row = rng.randrange(s.rows)
        return row * s.key_stride

    def next_txn(self) -> list[tuple[int, bytes]]:
        n = self.spec.updates_per_txn
        return [(self._key(), self.rng.randbytes(self.spec.payload)) for _ in range(n)]

    def aborts(self) -> bool:
        return bool(self.spec.abort_fraction) and self.rng.random() < self.spec.abort_fraction


def load_rows(spec: WorkloadSpec) -> Iterator[tuple[int, bytes]]:
    for i in range(spec.rows):
        k = i * spec.key_stride
        yield k, initial_value(k, spec.payload)


def load_table(directory: Union[str, Path], config: EngineConfig, workload: WorkloadSpec) -> LoadReport:
    """Bulk-load a fresh table and write a manifest describing it."""
    if config.payload != workload.payload:
        config = replace(config, payload=workload.payload)
    eng, report = Engine.create(directory, config, load_rows(workload))
    eng.close()
    manifest = {"schema_version": SCHEMA_VERSION, "workload": asdict(workload), "load": asdict(report)}
    (Path(directory) / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return report


# -- run to crash ------------------------------------------------------


@dataclass
class RunResult:
    snapshot: CrashSnapshot
    updates: int
    txns: int
    committed: dict[int, bytes]  # oracle: key -> last committed value
    loser_keys: list[int]


def run_to_crash(
    directory: Union[str, Path],
    spec: ExperimentSpec,
    crash_after_updates: Optional[int] = None,
) -> RunResult:
    """Drive the workload until the crash predicate fires, then crash.

    ``crash_after_updates`` replaces the predicate with a plain update
    count (used for randomized crash points).
    """
    d = Path(directory)
    wl = spec.workload
    cfg = EngineConfig.load(d)
    eng = Engine(d, cfg)
    workload = Workload(wl, leaf_capacity(cfg.page_size, cfg.payload))
    oracle = {k: v for k, v in load_rows(wl)}
    pred = spec.crash
    txns = 0
    while True:
        if crash_after_updates is not None:
            if eng.updates >= crash_after_updates:
                break
        elif (
            eng.checkpoints >= pred.checkpoints
            and eng.updates_since_checkpoint >= pred.since_checkpoint
            and eng.dc.updates_since_delta >= pred.since_delta
        ):
            break
        if eng.updates >= wl.max_updates:
            eng.crash()
            raise PredicateTimeout(f"crash predicate not reached after {eng.updates} updates")
        tx = eng.begin()
        pending = {}
        for key, value in workload.next_txn():
            eng.update(tx, key, value)
            pending[key] = value
        if workload.aborts():
            eng.abort(tx)
        else:
            eng.commit(tx)
            oracle.update(pending)
        txns += 1
        if eng.updates_since_checkpoint >= spec.checkpoint_interval:
            if pred.mid_checkpoint_pages is not None and eng.checkpoints >= pred.checkpoints:
                eng.begin_checkpoint()
                eng.checkpoint_step(pred.mid_checkpoint_pages)
                break
            eng.checkpoint()
    loser_keys = []
    for _ in range(pred.losers):
        tx = eng.begin()
        for key, value in workload.next_txn()[: pred.loser_updates]:
            eng.update(tx, key, value)
            loser_keys.append(key)
    if pred.losers:
        eng.eosl()  # make the losers' records durable so undo has work
    updates = eng.updates
    snap = eng.crash()
    (d / SNAPSHOT).write_text(json.dumps(snap.to_dict()))
    return RunResult(snap, updates, txns, oracle, loser_keys)


# -- oracle by log replay ----------------------------------------------


def replay_oracle(directory: Union[str, Path]) -> dict[int, bytes]:
    """Committed state rebuilt from the manifest's load plus committed
    updates replayed in LSN order; shares no code with redo."""
    d = Path(directory)
    manifest = json.loads((d / MANIFEST).read_text())
    wl = WorkloadSpec(**manifest["workload"])
    state = dict(load_rows(wl))
    cfg = EngineConfig.load(d)
    pending: dict[int, list[UpdateRecord]] = {}
    with Log(d / LOG_FILE, cfg.page_size) as wal:
        for rec in wal.scan():
            if isinstance(rec, UpdateRecord):
                if not rec.is_compensation:
                    pending.setdefault(rec.txn_id, []).append(rec)
            elif isinstance(rec, TxnEnd):
                ups = pending.pop(rec.txn_id, [])
                if rec.committed:
                    for u in ups:
                        state[u.key] = u.new_value
    return state


# -- recovery over copies ----------------------------------------------


def copy_files(src: Path, dst: Path) -> Path:
    if dst.exists():
        shutil.rmtree(dst)
    shutil.copytree(src, dst)
    return dst


def recover_all(
    crashed: Union[str, Path],
    work: Union[str, Path],
    methods: Sequence[str] = METHODS,
    options: Optional[RecoveryOptions] = None,
    check_digests: bool = True,
) -> list[RecoveryStats]:
    """Recover an independent copy of ``crashed`` with each method."""
    crashed, work = Path(crashed), Path(work)
    work.mkdir(parents=True, exist_ok=True)
    rows = []
    for m in methods:
        target = copy_files(crashed, work / m)
        rows.append(Recovery(target, m, options).run())
    if check_digests:
        digests = {r.method: r.digest for r in rows}
        if len(set(digests.values())) > 1:
            raise DigestMismatch("recovered states differ: " + ", ".join(f"{m}={d[:12]}" for m, d in digests.items()))
    return rows


def verify(directory: Union[str, Path]) -> list[int]:
    """Keys whose stored value differs from the replayed committed state."""
    got = store_items(directory)
    want = replay_oracle(directory)
    return sorted(k for k in set(got) | set(want) if got.get(k) != want.get(k))


# -- sweeps ------------------------------------------------------------


CELL_COLUMNS = [
    "schema_version",
    "seed",
    "cache_fraction",
    "pool_pages",
    "ci_multiplier",
    "checkpoint_interval",
    "db_pages",
    "segment_records",
    "segment_distinct_pages",
    "dirty_at_crash",
    "dirty_pct_of_cache",
    "delta_records",
    "bw_records",
    "prediction_error",
]


def run_cell(
    spec: ExperimentSpec,
    template: Path,
    work: Path,
    cache_fraction: float,
    ci: float,
    options: Optional[RecoveryOptions] = None,
) -> list[dict]:
    """One sweep cell: run a copy of the loaded table to a crash and
    recover it with every method."""
    manifest = json.loads((template / MANIFEST).read_text())
    db_pages = manifest["load"]["leaf_pages"] + manifest["load"]["index_pages"]
    pool_pages = max(8, round(db_pages * cache_fraction))
    cell_spec = spec.scaled(ci)
    cfg = replace(EngineConfig.load(template), pool_pages=pool_pages)
    if spec.flusher_fraction:
        cfg.flusher_batch = max(1, round(pool_pages * spec.flusher_fraction))
    run_dir = copy_files(template, work / "crashed")
    cfg.save(run_dir)
    result = run_to_crash(run_dir, cell_spec)
    prof = segment_profile(run_dir)
    stats = recover_all(run_dir, work / "rec", spec.methods, options)
    rows = []
    for st in stats:
        row = {
            "schema_version": SCHEMA_VERSION,
            "seed": spec.workload.seed,
            "cache_fraction": cache_fraction,
            "pool_pages": pool_pages,
            "ci_multiplier": ci,
            "checkpoint_interval": cell_spec.checkpoint_interval,
            "db_pages": db_pages,
            "segment_records": prof.records,
            "segment_distinct_pages": prof.distinct_pages,
            "dirty_at_crash": len(result.snapshot.dirty),
            "dirty_pct_of_cache": round(100.0 * st.dpt_size / pool_pages, 2) if st.dpt_size else 0.0,
            "delta_records": result.snapshot.delta_records,
            "bw_records": result.snapshot.bw_records,
        }
        row.update(st.to_row())
        p = st.predicted_fetches
        row["prediction_error"] = round((st.measured_fetches - p) / p, 4) if p else ""
        rows.append(row)
    shutil.rmtree(work / "rec", ignore_errors=True)
    shutil.rmtree(run_dir, ignore_errors=True)
    return rows


def sweep(
    spec: ExperimentSpec,
    work: Union[str, Path],
    out: Optional[Union[str, Path]] = None,
    cache_fractions: Optional[Sequence[float]] = None,
    ci_multipliers: Optional[Sequence[float]] = None,
) -> list[dict]:
    """Cache-fraction sweep at each checkpoint-interval multiplier."""
    work = Path(work)
    work.mkdir(parents=True, exist_ok=True)
    template = work / "template"
    if not (template / MANIFEST).exists():
        load_table(template, spec.engine, spec.workload)
    rows = []
    for ci in ci_multipliers or spec.ci_multipliers:
        for cf in cache_fractions or spec.cache_fractions:
            log.info("cell cache=%.2f ci=%s", cf, ci)
            rows.extend(run_cell(spec, template, work / "cell", cf, ci))
    if out is not None:
        write_csv(rows, Path(out), spec)
    return rows


def columns() -> list[str]:
    return CELL_COLUMNS + [c for c in RecoveryStats.columns() if c not in CELL_COLUMNS]


def write_csv(rows: list[dict], path: Path, spec: ExperimentSpec) -> None:
    """CSV preceded by one ``#`` line holding the experiment spec."""
    buf = io.StringIO()
    buf.write("# spec: " + json.dumps(spec.to_dict(), sort_keys=True) + "\n")
    w = csv.DictWriter(buf, fieldnames=columns(), extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    path.write_text(buf.getvalue())


def read_csv(path: Union[str, Path]) -> tuple[ExperimentSpec, list[dict]]:
    text = Path(path).read_text().splitlines()
    spec = ExperimentSpec.from_dict(json.loads(text[0].removeprefix("# spec: ")))
    return spec, list(csv.DictReader(text[1:]))


def desk_spec(**overrides) -> ExperimentSpec:
    """Default desk-scale experiment."""
    spec = ExperimentSpec(engine=EngineConfig(costs=IoCosts()))
    return replace(spec, **overrides)
