import pytest

from tcdc.engine import Engine, EngineError
from tcdc.log import (
    NULL_LSN,
    BeginCheckpoint,
    BwRecord,
    DeltaRecord,
    EndCheckpoint,
    Kind,
    RsspMarker,
    SmoRecord,
    TxnEnd,
    UpdateRecord,
)

VAL = bytes(range(24))


def records(eng, *kinds):
    eng.log.force()
    return list(eng.log.scan(kinds=kinds or None))


def commit_updates(eng, keys, value=VAL):
    tx = eng.begin()
    for k in keys:
        eng.update(tx, k, value)
    eng.commit(tx)
    return tx


def test_update_replaces_value_and_sets_plsn(make_engine):
    eng = make_engine()
    tx = eng.begin()
    lsn = eng.update(tx, 42, VAL)
    assert eng.read(42) == VAL
    pid = eng.tree.find(42)
    assert eng.pool.frames[pid].page.p_lsn == lsn


def test_update_record_carries_leaf_pid(make_engine):
    eng = make_engine()
    commit_updates(eng, [7, 300])
    for rec in records(eng, Kind.UPDATE):
        assert eng.tree.find(rec.key) == rec.pid


def test_ten_updates_chain_backward_to_commit(make_engine):
    eng = make_engine()
    tx = eng.begin()
    lsns = [eng.update(tx, k, VAL) for k in range(0, 100, 10)]
    eng.commit(tx)
    commit = [r for r in records(eng, Kind.COMMIT) if r.txn_id == tx][0]
    chain, lsn = [], commit.prev_lsn_of_txn
    while lsn != NULL_LSN:
        chain.append(lsn)
        lsn = eng.log.read_at(lsn).prev_lsn_of_txn
    assert chain == lsns[::-1] and len(chain) == 10


def test_value_length_checked(make_engine):
    eng = make_engine()
    tx = eng.begin()
    with pytest.raises(ValueError):
        eng.update(tx, 1, b"short")


def test_abort_restores_values(make_engine):
    eng = make_engine()
    before = eng.read(5)
    tx = eng.begin()
    eng.update(tx, 5, VAL)
    eng.update(tx, 5, bytes(24))
    eng.update(tx, 10_001, VAL)  # insert of a new key
    eng.abort(tx)
    assert eng.read(5) == before
    assert eng.read(10_001) is None
    assert records(eng, Kind.ABORT)[-1].txn_id == tx


def test_commit_makes_log_stable(make_engine):
    eng = make_engine()
    commit_updates(eng, [1])
    assert eng.log.stable_lsn == eng.log.last_lsn
    assert eng.dc.e_lsn == eng.log.stable_lsn


def test_eosl_with_nothing_buffered(make_engine):
    eng = make_engine()
    commit_updates(eng, [1])
    e = eng.eosl()
    assert eng.eosl() == e


# -- Δ emission --------------------------------------------------------


def test_forced_delta_on_empty_monitor(make_engine):
    eng = make_engine()
    rec = eng.dc.emit_delta(force=True)
    assert rec.dirty_set == [] and rec.written_set == []
    assert rec.first_dirty == 0 and rec.fw_lsn == NULL_LSN
    assert not [r for r in records(eng) if isinstance(r, BwRecord)]


def test_delta_below_threshold_not_emitted(make_engine):
    eng = make_engine()
    assert eng.dc.emit_delta(force=False) is None


def test_delta_without_flush_first_dirty_is_length(make_engine):
    eng = make_engine(delta_threshold=1000)
    tx = eng.begin()
    eng.update(tx, 1, VAL)
    eng.update(tx, 400, VAL)
    rec = eng.dc.emit_delta(force=True)
    assert rec.fw_lsn == NULL_LSN
    assert rec.first_dirty == len(rec.dirty_set) == 2


def test_delta_flush_after_first_page(make_engine):
    eng = make_engine(delta_threshold=1000)
    p1, p2, p3 = (eng.tree.find(k) for k in (1, 200, 400))
    assert len({p1, p2, p3}) == 3
    tx = eng.begin()
    eng.update(tx, 1, VAL)
    eng.pool.flush_page(p1)
    stable_at_flush = eng.log.stable_lsn
    eng.update(tx, 200, VAL)
    eng.update(tx, 400, VAL)
    rec = eng.dc.emit_delta(force=True)
    assert rec.dirty_set == [p1, p2, p3]
    assert rec.first_dirty == 1
    assert rec.fw_lsn == stable_at_flush
    assert [r for r in records(eng, Kind.BW)][-1].written_set == [p1]


def test_delta_threshold_triggers_emission(make_engine):
    eng = make_engine(delta_threshold=5)
    commit_updates(eng, range(0, 60, 10))
    assert eng.dc.delta_records >= 1
    assert len(eng.dc.monitor) < 5


def test_delta_tc_lsn_is_last_stable(make_engine):
    eng = make_engine(delta_threshold=1000)
    tx = eng.begin()
    lsn = eng.update(tx, 3, VAL)
    rec = eng.dc.emit_delta(force=True)
    assert rec.tc_lsn == lsn


def test_delta_between_eosls_carries_earlier_elsn(make_engine):
    eng = make_engine(delta_threshold=1000, eosl_before_delta=False)
    commit_updates(eng, [1])
    e1 = eng.dc.e_lsn
    tx = eng.begin()
    eng.update(tx, 2, VAL)
    rec = eng.dc.emit_delta(force=True)
    assert rec.tc_lsn == e1 < eng.log.last_lsn


def test_monitor_completeness(make_engine):
    eng = make_engine(rows=2000, pool_pages=8, delta_threshold=7, flusher_every=3)
    calls = []
    orig = eng.pool.mark_dirty

    def spy(pid, lsn, update=True):
        if update:
            calls.append(pid)
        orig(pid, lsn, update)

    eng.pool.mark_dirty = spy
    for t in range(20):
        commit_updates(eng, [(t * 37 + i * 101) % 2000 for i in range(5)])
    logged = []
    for r in records(eng, Kind.DELTA):
        logged += r.dirty_set
    assert sorted(logged + eng.dc.monitor.dirty_set) == sorted(calls)


# -- WAL / flush interplay ---------------------------------------------


def test_blocked_flush_unblocked_by_eosl(make_engine):
    eng = make_engine()
    tx = eng.begin()
    lsn = eng.update(tx, 9, VAL)
    pid = eng.tree.find(9)
    assert eng.dc.e_lsn < lsn  # not yet stable
    eng.pool.flush_page(pid)  # requests EOSL itself
    assert eng.dc.e_lsn >= lsn
    assert eng.pagefile.read(pid).p_lsn == lsn


def test_no_stable_page_ahead_of_log(make_engine):
    eng = make_engine(rows=3000, pool_pages=6, flusher_every=2)
    for t in range(40):
        tx = eng.begin()
        for i in range(5):
            eng.update(tx, (t * 613 + i * 97) % 3000, VAL)
        if t % 2:
            eng.commit(tx)
        else:
            eng.abort(tx)
        stable = eng.log.stable_lsn
        for pid in range(1, eng.pagefile.num_pages):
            assert eng.pagefile.read_plsn(pid) <= stable


# -- checkpoints ---------------------------------------------------------


def test_checkpoint_clean_cache(make_engine):
    eng = make_engine()
    written = eng.pool.clock.pages_written
    b, e = eng.checkpoint()
    assert eng.pool.clock.pages_written == written
    kinds = [type(r) for r in records(eng)]
    assert kinds == [BeginCheckpoint, DeltaRecord, RsspMarker, EndCheckpoint]
    assert records(eng, Kind.ECKPT)[0].bckpt_lsn == b
    assert eng.log.find_redo_scan_start() == b


def test_checkpoint_flushes_earlier_dirty_pages(make_engine):
    eng = make_engine()
    commit_updates(eng, [1, 200, 400])
    dirty = set(eng.pool.dirty_pids())
    assert dirty
    eng.checkpoint()
    assert eng.pool.dirty_pids() == []
    delta = [r for r in records(eng, Kind.DELTA)][-1]
    assert dirty <= set(delta.written_set)


def test_page_dirtied_during_checkpoint_stays_dirty(make_engine):
    eng = make_engine(delta_threshold=1000)
    commit_updates(eng, [1, 400])
    p1, p2 = eng.tree.find(1), eng.tree.find(400)
    eng.begin_checkpoint()
    commit_updates(eng, [200])  # p3: first dirtied after bCkpt
    p3 = eng.tree.find(200)
    assert eng.checkpoint_step() == 0
    commit_updates(eng, [1])  # p1 dirtied again after the sweep wrote it
    eng.finish_checkpoint()
    writes = [pid for r in records(eng, Kind.BW) for pid in r.written_set]
    assert writes.count(p1) == 1 and p2 in writes
    assert p3 not in writes
    assert eng.pool.is_dirty(p1) and eng.pool.is_dirty(p3)


def test_rssp_zero_acks_with_marker(make_engine):
    eng = make_engine()
    eng.dc.rssp(0)
    assert records(eng, Kind.RSSP)[0].rssp_lsn == 0


def test_rssp_beyond_stable_rejected(make_engine):
    eng = make_engine()
    tx = eng.begin()
    lsn = eng.update(tx, 1, VAL)
    with pytest.raises(EngineError):
        eng.dc.rssp(lsn + 100)


def test_nested_checkpoint_rejected(make_engine):
    eng = make_engine()
    eng.begin_checkpoint()
    with pytest.raises(EngineError):
        eng.begin_checkpoint()


def test_bckpt_records_active_transactions(make_engine):
    eng = make_engine()
    tx = eng.begin()
    lsn = eng.update(tx, 1, VAL)
    eng.checkpoint()
    assert records(eng, Kind.BCKPT)[0].active_txns == {tx: lsn}


def test_crash_mid_checkpoint_uses_previous(make_engine, tmp_path):
    eng = make_engine()
    b1, _ = eng.checkpoint()
    commit_updates(eng, [5, 300])
    eng.begin_checkpoint()
    eng.checkpoint_step(1)
    eng.eosl()
    eng.crash()
    eng2 = Engine(tmp_path / "db")
    assert eng2.log.find_redo_scan_start() == b1
    eng2.close()


def test_crash_after_ack_before_eckpt(make_engine, tmp_path):
    eng = make_engine()
    b1, _ = eng.checkpoint()
    commit_updates(eng, [5])
    b2 = eng.begin_checkpoint()
    eng.dc.finish_rssp(b2)
    eng.eosl()
    eng.crash()
    eng2 = Engine(tmp_path / "db")
    assert eng2.log.find_redo_scan_start() == b1
    eng2.close()


# -- crash -------------------------------------------------------------


def test_crash_snapshot_clean(make_engine):
    eng = make_engine()
    snap = eng.crash()
    assert snap.dirty == {} and snap.active_txns == {}
    with pytest.raises(EngineError):
        eng.begin()


def test_crash_snapshot_ground_truth(make_engine):
    eng = make_engine(delta_threshold=1000)
    tx = eng.begin()
    a = eng.update(tx, 1, VAL)
    b = eng.update(tx, 1, bytes(24))
    pid = eng.tree.find(1)
    snap = eng.crash()
    assert snap.dirty == {pid: (a, a)}
    assert snap.active_txns == {tx: b}
    assert pid in snap.cached


def test_crash_drops_unforced_tail(make_engine, tmp_path):
    eng = make_engine()
    commit_updates(eng, [1])
    stable = eng.log.stable_lsn
    tx = eng.begin()
    eng.update(tx, 2, VAL)
    eng.crash()
    eng2 = Engine(tmp_path / "db")
    assert eng2.log.last_lsn == stable
    eng2.close()


def test_txn_ids_unique_across_restart(make_engine, tmp_path):
    eng = make_engine()
    t1 = commit_updates(eng, [1])
    eng.crash()
    eng2 = Engine(tmp_path / "db")
    assert eng2.begin() > t1
    eng2.close()


def test_split_during_update_is_logged_before_update(make_engine):
    eng = make_engine(rows=200)
    tx = eng.begin()
    keys = range(10_000, 10_040)
    for k in keys:
        eng.update(tx, k, VAL)
    eng.commit(tx)
    recs = records(eng)
    smo_idx = [i for i, r in enumerate(recs) if isinstance(r, SmoRecord)]
    assert smo_idx
    for i in smo_idx:
        # a Δ record may slip in between; the next TC record is the update
        nxt = next(r for r in recs[i + 1 :] if not isinstance(r, (DeltaRecord, BwRecord)))
        assert isinstance(nxt, UpdateRecord) and nxt.pid in recs[i].pids
    eng.tree.audit()


def test_create_refuses_non_empty_dir(tmp_path):
    from conftest import small_config

    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "junk").write_text("x")
    with pytest.raises(EngineError):
        Engine.create(tmp_path / "x", small_config(), 10)


def test_close_flushes_everything(make_engine, tmp_path):
    eng = make_engine()
    commit_updates(eng, [1, 2, 3])
    eng.close()
    eng2 = Engine(tmp_path / "db")
    assert eng2.read(1) == VAL
    assert TxnEnd  # the commit survived
    eng2.close()
