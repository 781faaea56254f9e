import shutil
import tempfile
from pathlib import Path

import pytest
from conftest import build_crash, random_case, tiny_spec
from hypothesis import given, settings
from hypothesis import strategies as st

from tcdc.bench import CrashPredicate, copy_files, recover_all, replay_oracle
from tcdc.log import NULL_LSN, BwRecord, DeltaRecord, SmoRecord, UpdateRecord
from tcdc.recovery import (
    METHODS,
    Dpt,
    Recovery,
    RecoveryOptions,
    SimulatedCrash,
    dc_analysis,
    predict_cost,
    read_segment,
    sql_analysis,
    store_items,
    txn_analysis,
)
from tcdc.engine import EngineConfig
from tcdc.log import Log


def up(lsn, pid, key=None, txn=1):
    r = UpdateRecord(txn, 1, key if key is not None else pid, b"v", b"p", pid)
    r.lsn = lsn
    return r


def bw(lsn, written, fw):
    r = BwRecord(written, fw)
    r.lsn = lsn
    return r


def delta(lsn, dirty, written, fw, first, tc, lsns=None):
    r = DeltaRecord(dirty, written, fw, first, tc, lsns)
    r.lsn = lsn
    return r


def entries(dpt):
    return {pid: (e.r_lsn, e.last_lsn) for pid, e in dpt.items()}


# -- DPT construction, hand traces -------------------------------------


def test_add_entry_keeps_first_rlsn():
    d = Dpt()
    d.add_entry(7, 100)
    d.add_entry(7, 150)
    d.add_entry(7, 120)
    assert entries(d) == {7: (100, 150)}


def test_sql_analysis_prunes_written_page():
    recs = [up(100, 1), up(110, 2), bw(125, [1], 120)]
    assert entries(sql_analysis(recs, 50)) == {2: (110, 110)}


def test_sql_analysis_raises_rlsn_of_survivor():
    recs = [up(100, 1), up(130, 1), bw(140, [1], 120)]
    assert entries(sql_analysis(recs, 50)) == {1: (120, 130)}


def test_sql_analysis_empty_segment():
    assert sql_analysis([], 50) == {}


def test_sql_analysis_ignores_records_before_start():
    assert entries(sql_analysis([up(40, 1), up(60, 2)], 50)) == {2: (60, 60)}


def test_sql_analysis_leaves_out_smo_pages():
    from tcdc.log import PageImage

    smo = SmoRecord([PageImage(9, True, [1], values=[b"v"])])
    smo.lsn = 70
    assert entries(sql_analysis([smo, up(80, 3)], 50)) == {3: (80, 80)}


def test_dc_analysis_split_at_first_dirty():
    got = dc_analysis([delta(200, [1, 2], [], 100, 1, 150)], 50)
    assert entries(got.dpt) == {1: (50, 50), 2: (100, 100)}
    assert got.last_delta_tc_lsn == 150
    assert got.pf_list == [1, 2]


def test_dc_analysis_written_prunes_before_first_write():
    got = dc_analysis([delta(200, [1, 2], [1], 100, 1, 150)], 50)
    assert entries(got.dpt) == {2: (100, 100)}


def test_dc_analysis_null_fw_means_all_before_first_write():
    got = dc_analysis([delta(200, [1, 2], [], NULL_LSN, 0, 150)], 50)
    assert entries(got.dpt) == {1: (50, 50), 2: (50, 50)}


def test_dc_analysis_prev_delta_chains():
    recs = [delta(200, [1], [], NULL_LSN, 1, 150), delta(300, [2, 1], [], NULL_LSN, 2, 250)]
    got = dc_analysis(recs, 50)
    assert entries(got.dpt) == {1: (50, 150), 2: (150, 150)}
    assert got.pf_list == [1, 2]
    assert got.last_delta_tc_lsn == 250


def test_dc_analysis_raises_rlsn_of_redirtied_page():
    # P1 dirtied before and after the first write, and written
    got = dc_analysis([delta(200, [1, 1], [1], 100, 1, 150)], 50)
    assert entries(got.dpt) == {1: (100, 100)}


def test_dc_analysis_skips_deltas_before_start():
    recs = [delta(40, [9], [], NULL_LSN, 1, 30), delta(200, [1], [], NULL_LSN, 1, 150)]
    got = dc_analysis(recs, 50)
    assert entries(got.dpt) == {1: (50, 50)}
    assert got.deltas_used == 1


def test_dc_analysis_no_deltas():
    got = dc_analysis([up(60, 1)], 50)
    assert got.dpt == {} and got.last_delta_tc_lsn == 50


def test_pruning_boundary_differs_between_passes():
    # page last dirtied exactly at the FW-LSN: physiological pass prunes
    # (lastLSN <= FW-LSN), logical pass keeps it (lastLSN < FW-LSN fails)
    assert sql_analysis([up(120, 1), bw(130, [1], 120)], 50) == {}
    got = dc_analysis([delta(130, [1], [1], 120, 0, 125)], 50)
    assert entries(got.dpt) == {1: (120, 120)}


def test_perfect_mode_example():
    got = dc_analysis([delta(200, [1, 2], [], 100, 1, 150, [60, 130])], 50, "perfect")
    assert entries(got.dpt) == {1: (60, 60), 2: (130, 130)}
    assert entries(sql_analysis([up(60, 1), up(130, 2)], 50)) == {1: (60, 60), 2: (130, 130)}


def test_perfect_mode_needs_lsns():
    from tcdc.recovery import RecoveryError

    with pytest.raises(RecoveryError):
        dc_analysis([delta(200, [1], [], 100, 1, 150)], 50, "perfect")


def test_reduced_mode_uses_prev_tc_lsn():
    recs = [delta(200, [1, 2], [], 100, 1, 150), delta(300, [3], [1, 3], 220, 0, 250)]
    got = dc_analysis(recs, 50, "reduced")
    # 1 came from the earlier Δ and was written: pruned; 3 is in the current Δ: kept
    assert entries(got.dpt) == {2: (50, 50), 3: (150, 150)}


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        dc_analysis([], 0, "bogus")


def test_txn_analysis_finds_losers():
    from tcdc.log import BeginCheckpoint, TxnEnd

    b = BeginCheckpoint({5: 40})
    b.lsn = 50
    c = TxnEnd(1, 60)
    c.lsn = 70
    recs = [b, up(60, 1, txn=1), c, up(80, 2, txn=2)]
    assert txn_analysis(recs, 50) == {5: 40, 2: 80}


# -- cost model ----------------------------------------------------------


def test_cost_model_values():
    assert predict_cost("Log0", log_records=1000, log_pages=10, index_pages=5) == 1015
    assert predict_cost("SQL1", dpt_size=300, log_pages=10) == 310
    assert predict_cost("Log1", dpt_size=300, tail_records=20, log_pages=10, index_pages=5) == 335


def test_cost_model_has_no_prefetch_model():
    assert predict_cost("Log2", dpt_size=1) is None
    assert predict_cost("SQL2", dpt_size=1) is None
    with pytest.raises(ValueError):
        predict_cost("Log9")


# -- end-to-end on small crashed databases -------------------------------


@pytest.fixture(scope="module")
def crashed(tmp_path_factory):
    root = tmp_path_factory.mktemp("crash")
    d, res = build_crash(root, tiny_spec(seed=3))
    return d, res


def test_all_methods_match_oracle(crashed, tmp_path):
    d, res = crashed
    rows = recover_all(d, tmp_path, METHODS, RecoveryOptions(audit_filter=True, audit_tree=True))
    want = replay_oracle(d)
    assert want == res.committed
    for m in METHODS:
        assert store_items(tmp_path / m) == want
    assert len({r.digest for r in rows}) == 1
    assert all(r.losers == 1 and r.undo_records == len(res.loser_keys) for r in rows)


def test_second_redo_applies_nothing(crashed, tmp_path):
    d, _ = crashed
    for m in METHODS:
        target = copy_files(d, tmp_path / m)
        first = Recovery(target, m, RecoveryOptions()).run()
        again = Recovery(target, m, RecoveryOptions()).run()
        assert again.redo_applied == 0 and again.undo_records == 0
        assert again.digest == first.digest


def test_interrupted_redo_rerun_same_state(crashed, tmp_path):
    d, _ = crashed
    ref = Recovery(copy_files(d, tmp_path / "ref"), "Log0").run()
    for m in METHODS:
        for cut in (0, 7, ref.records_scanned // 2):
            target = copy_files(d, tmp_path / f"{m}{cut}")
            with pytest.raises(SimulatedCrash):
                Recovery(target, m, RecoveryOptions(crash_after=cut, pool_pages=6)).run()
            assert Recovery(target, m).run().digest == ref.digest


def test_clean_crash_is_noop(tmp_path):
    spec = tiny_spec(crash=CrashPredicate(checkpoints=1, since_checkpoint=0, since_delta=0))
    d, _ = build_crash(tmp_path, spec)
    from tcdc.engine import Engine

    # finish with a checkpoint and crash on a clean cache
    shutil.rmtree(d)
    from tcdc.bench import load_table

    load_table(d, spec.engine, spec.workload)
    eng = Engine(d)
    tx = eng.begin()
    eng.update(tx, 2, bytes(24))
    eng.commit(tx)
    eng.checkpoint()
    snap = eng.crash()
    assert snap.dirty == {}
    rows = recover_all(d, tmp_path / "rec")
    assert all(r.redo_applied == 0 for r in rows)


def test_log0_fetches_every_distinct_page(tmp_path):
    from tcdc.bench import WorkloadSpec
    from conftest import small_config

    wl = WorkloadSpec(rows=3000, payload=24, updates_per_txn=5, distribution="distinct", seed=2)
    spec = tiny_spec(
        workload=wl,
        engine=small_config(pool_pages=200, delta_threshold=16),
        crash=CrashPredicate(checkpoints=1, since_checkpoint=40, since_delta=0),
    )
    spec.checkpoint_interval = 100
    d, _ = build_crash(tmp_path, spec)
    st = Recovery(copy_files(d, tmp_path / "r"), "Log0").run()
    assert st.records_scanned == 40
    assert st.data_pages_fetched == 40


def test_preload_avoids_index_stalls_during_redo(crashed, tmp_path):
    d, _ = crashed
    st = Recovery(copy_files(d, tmp_path / "r"), "Log1", RecoveryOptions(pool_pages=6)).run()
    # nothing beyond the preload itself; the root may already be resident
    assert st.index_pages_fetched <= st.index_pages_loaded


def test_refined_dpt_same_state(crashed, tmp_path):
    d, _ = crashed
    a = Recovery(copy_files(d, tmp_path / "a"), "SQL1").run()
    b = Recovery(copy_files(d, tmp_path / "b"), "SQL1", RecoveryOptions(refine_dpt=True)).run()
    assert a.digest == b.digest
    assert b.data_pages_fetched <= a.data_pages_fetched


def test_reduced_mode_recovers(crashed, tmp_path):
    d, _ = crashed
    a = Recovery(copy_files(d, tmp_path / "a"), "Log1").run()
    b = Recovery(copy_files(d, tmp_path / "b"), "Log1", RecoveryOptions(dpt_mode="reduced", audit_filter=True)).run()
    assert a.digest == b.digest
    assert b.dpt_size >= a.dpt_size


def test_unknown_method_rejected(crashed):
    with pytest.raises(ValueError):
        Recovery(crashed[0], "ARIES")


def test_undo_restores_pre_transaction_values(tmp_path):
    from tcdc.bench import load_table
    from tcdc.engine import Engine

    spec = tiny_spec()
    d = tmp_path / "db"
    load_table(d, spec.engine, spec.workload)
    eng = Engine(d)
    keys = [2 * i for i in range(0, 400, 40)]
    before = {k: eng.read(k) for k in keys}
    tx = eng.begin()
    for k in keys:
        eng.update(tx, k, b"L" * 24)
    eng.eosl()
    eng.pool.flush_all()  # the loser's effects reach disk
    eng.crash()
    for m in METHODS:
        st = Recovery(copy_files(d, tmp_path / m), m).run()
        assert st.losers == 1 and st.undo_records == 10
        got = store_items(tmp_path / m)
        assert {k: got[k] for k in keys} == before


def test_undo_of_unflushed_loser_still_logged(tmp_path):
    from tcdc.bench import load_table
    from tcdc.engine import Engine

    spec = tiny_spec()
    d = tmp_path / "db"
    load_table(d, spec.engine, spec.workload)
    eng = Engine(d)
    before = eng.read(10)
    tx = eng.begin()
    eng.update(tx, 10, b"L" * 24)
    eng.eosl()
    eng.crash()
    st = Recovery(d, "SQL1").run()
    assert st.undo_records == 1
    assert store_items(d)[10] == before
    with Log(d / "wal.log", 1024) as wal:
        comp = [r for r in wal.scan() if isinstance(r, UpdateRecord) and r.is_compensation]
    assert len(comp) == 1 and comp[0].new_value == before


# -- properties over seeded histories --------------------------------------

@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=30))
def test_add_entry_first_and_max(lsns):
    d = Dpt()
    for lsn in lsns:
        d.add_entry(1, lsn)
    assert (d[1].r_lsn, d[1].last_lsn) == (lsns[0], max(lsns))


def analyses(d):
    with Log(d / "wal.log", EngineConfig.load(d).page_size) as wal:
        seg = read_segment(wal)
    after = seg.start if seg.ckpt else NULL_LSN
    return {m: dc_analysis(seg.records, after, m).dpt for m in ("standard", "reduced", "perfect")}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_dpt_modes_nest(seed):
    with tempfile.TemporaryDirectory() as tmp:
        d, _ = random_case(Path(tmp), seed)
        dpts = analyses(d)
    std, red, per = dpts["standard"], dpts["reduced"], dpts["perfect"]
    # coarser information can only widen the table and lower rLSNs
    for pid, e in std.items():
        assert pid in red and red[pid].r_lsn <= e.r_lsn
    for pid, e in per.items():
        assert pid in std and std[pid].r_lsn <= e.r_lsn
