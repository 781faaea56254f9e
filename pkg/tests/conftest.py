from pathlib import Path

import pytest

from tcdc.engine import Engine, EngineConfig


def small_config(**kw) -> EngineConfig:
    base = dict(page_size=1024, payload=24, pool_pages=16, delta_threshold=20)
    base.update(kw)
    return EngineConfig(**base)


@pytest.fixture
def make_engine(tmp_path: Path):
    """Factory for small engines in fresh directories."""
    made = []

    def make(rows: int = 500, name: str = "db", **kw) -> Engine:
        eng, _ = Engine.create(tmp_path / name, small_config(**kw), rows)
        made.append(eng)
        return eng

    yield make
    for eng in made:
        if not eng._crashed:
            eng.close()


def tiny_spec(seed: int = 1, **kw):
    """Small, fast experiment that still splits pages, aborts and leaves losers."""
    from tcdc.bench import CrashPredicate, ExperimentSpec, WorkloadSpec

    crash = kw.pop("crash", CrashPredicate(checkpoints=2, since_checkpoint=60, since_delta=4, losers=1))
    workload = kw.pop(
        "workload",
        WorkloadSpec(
            rows=1200,
            payload=24,
            updates_per_txn=5,
            key_stride=2,
            insert_fraction=0.05,
            abort_fraction=0.05,
            seed=seed,
        ),
    )
    engine = kw.pop("engine", small_config(pool_pages=12, delta_threshold=16, flusher_every=5))
    return ExperimentSpec(engine=engine, workload=workload, checkpoint_interval=120, crash=crash, **kw)


def build_crash(root: Path, spec, crash_after=None):
    """Load, run to a crash, and return (crashed dir, RunResult)."""
    from tcdc.bench import load_table, run_to_crash

    d = root / "crashed"
    load_table(d, spec.engine, spec.workload)
    return d, run_to_crash(d, spec, crash_after_updates=crash_after)


def random_case(root: Path, seed: int, inserts: bool = True):
    """One seeded crash history with randomized engine and crash settings.

    Returns (crashed dir, RunResult). Δ records carry exact dirtying LSNs
    so the same history serves both standard and perfect analysis.
    """
    import random

    from tcdc.bench import CrashPredicate, ExperimentSpec, WorkloadSpec

    rng = random.Random(seed)
    threshold = rng.choice([6, 16, 40])
    engine = small_config(
        pool_pages=rng.choice([8, 12, 24, 64]),
        delta_threshold=threshold,
        flusher_every=rng.choice([0, 3, 7]),
        perfect_dpt=True,
    )
    workload = WorkloadSpec(
        rows=2000,
        payload=24,
        updates_per_txn=rng.randint(1, 8),
        key_stride=2,
        insert_fraction=0.05 if inserts else 0.0,
        abort_fraction=0.05,
        max_updates=20_000,
        seed=seed,
    )
    interval = rng.choice([60, 150, 300])
    crash = CrashPredicate(
        checkpoints=rng.randint(0, 3),
        since_checkpoint=rng.randint(0, interval - 10),
        # a small Δ threshold resets the counter every transaction
        since_delta=rng.randint(0, 5) if threshold == 40 else 0,
        losers=rng.randint(0, 2),
        mid_checkpoint_pages=rng.choice([None, None, None, 0, 2, 5]),
    )
    spec = ExperimentSpec(engine=engine, workload=workload, checkpoint_interval=interval, crash=crash)
    crash_after = rng.randint(0, 1200) if rng.random() < 0.5 else None
    return build_crash(root / f"case{seed}-{int(inserts)}", spec, crash_after)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
