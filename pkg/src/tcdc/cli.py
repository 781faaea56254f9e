"""Command line: ``tcdc-bench {load,run,recover,sweep,verify}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

from . import bench
from .engine import EngineConfig
from .recovery import DPT_MODES, METHODS, Recovery, RecoveryOptions, RecoveryStats


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x)


def _spec(args) -> bench.ExperimentSpec:
    spec = bench.desk_spec()
    if getattr(args, "spec", None):
        spec = bench.ExperimentSpec.from_dict(json.loads(Path(args.spec).read_text()))
    eng, wl, crash = spec.engine, spec.workload, spec.crash
    for name, target in (
        ("page_size", "eng"),
        ("pool_pages", "eng"),
        ("delta_threshold", "eng"),
        ("flusher_every", "eng"),
        ("perfect_dpt", "eng"),
        ("rows", "wl"),
        ("payload", "wl"),
        ("seed", "wl"),
        ("key_stride", "wl"),
        ("distribution", "wl"),
        ("checkpoints", "crash"),
        ("since_checkpoint", "crash"),
        ("since_delta", "crash"),
        ("losers", "crash"),
    ):
        v = getattr(args, name, None)
        if v is None:
            continue
        if target == "eng":
            eng = replace(eng, **{name: v})
        elif target == "wl":
            wl = replace(wl, **{name: v})
        else:
            crash = replace(crash, **{name: v})
    eng = replace(eng, payload=wl.payload)
    spec = replace(spec, engine=eng, workload=wl, crash=crash)
    if getattr(args, "checkpoint_interval", None):
        spec = replace(spec, checkpoint_interval=args.checkpoint_interval)
    if getattr(args, "flusher_fraction", None) is not None:
        spec = replace(spec, flusher_fraction=args.flusher_fraction)
    if getattr(args, "cache_fractions", None):
        spec = replace(spec, cache_fractions=_floats(args.cache_fractions))
    if getattr(args, "ci", None):
        spec = replace(spec, ci_multipliers=_floats(args.ci))
    if getattr(args, "methods", None):
        spec = replace(spec, methods=tuple(args.methods.split(",")))
    return spec


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment")
    g.add_argument("--spec", help="experiment spec JSON (flags below override it)")
    g.add_argument("--rows", type=int)
    g.add_argument("--payload", type=int)
    g.add_argument("--page-size", type=int)
    g.add_argument("--pool-pages", type=int)
    g.add_argument("--key-stride", type=int)
    g.add_argument("--distribution", choices=("uniform", "distinct"))
    g.add_argument("--seed", type=int)
    g.add_argument("--delta-threshold", type=int)
    g.add_argument("--flusher-every", type=int)
    g.add_argument("--flusher-fraction", type=float)
    g.add_argument("--perfect-dpt", action="store_true", default=None)
    g.add_argument("--checkpoint-interval", type=int)
    g.add_argument("--checkpoints", type=int, help="crash after this many checkpoints ...")
    g.add_argument("--since-checkpoint", type=int, help="... and this many updates since the last one ...")
    g.add_argument("--since-delta", type=int, help="... and this many since the last Δ record")
    g.add_argument("--losers", type=int)


def _print_rows(rows: list[dict], cols: Sequence[str], out=None) -> None:
    w = csv.DictWriter(out or sys.stdout, fieldnames=list(cols), extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)


def cmd_load(args) -> int:
    spec = _spec(args)
    report = bench.load_table(args.dir, spec.engine, spec.workload)
    print(json.dumps(asdict(report)))
    return 0


def cmd_run(args) -> int:
    spec = _spec(args)
    d = Path(args.dir)
    if args.pool_pages is not None:
        cfg = EngineConfig.load(d)
        cfg.pool_pages = args.pool_pages
        cfg.save(d)
    res = bench.run_to_crash(d, spec)
    s = res.snapshot
    print(
        json.dumps(
            {
                "updates": res.updates,
                "txns": res.txns,
                "checkpoints": s.checkpoints,
                "dirty_at_crash": len(s.dirty),
                "stable_lsn": s.stable_lsn,
                "delta_records": s.delta_records,
                "bw_records": s.bw_records,
            }
        )
    )
    return 0


def cmd_recover(args) -> int:
    opts = RecoveryOptions(
        pool_pages=args.pool_pages,
        dpt_mode=args.dpt_mode,
        window=args.window,
        refine_dpt=args.refine_dpt,
        audit_filter=args.audit,
        audit_tree=args.audit,
    )
    if args.method == "all":
        work = Path(args.work or Path(args.dir).with_name(Path(args.dir).name + ".recovered"))
        try:
            rows = bench.recover_all(args.dir, work, METHODS, opts)
        except bench.DigestMismatch as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        _print_rows([r.to_row() for r in rows], RecoveryStats.columns())
        bad = bench.verify(work / METHODS[0])
    else:
        stats = Recovery(args.dir, args.method, opts).run()
        _print_rows([stats.to_row()], RecoveryStats.columns())
        bad = bench.verify(args.dir)
    if bad:
        print(f"error: {len(bad)} keys differ from the committed state, e.g. {bad[:5]}", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args) -> int:
    spec = _spec(args)
    rows = bench.sweep(spec, args.work, args.out)
    if not args.out:
        _print_rows(rows, bench.columns())
    print(f"{len(rows)} rows; times are simulated IO units, not milliseconds", file=sys.stderr)
    return 0


def cmd_verify(args) -> int:
    bad = bench.verify(args.dir)
    if bad:
        print(f"{len(bad)} keys differ from the committed state, e.g. {bad[:5]}")
        return 1
    print("ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tcdc-bench", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("load", help="bulk-load a fresh table")
    p.add_argument("--dir", required=True)
    _add_spec_flags(p)
    p.set_defaults(fn=cmd_load)

    p = sub.add_parser("run", help="run the workload until the crash predicate fires")
    p.add_argument("--dir", required=True)
    _add_spec_flags(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("recover", help="recover a crashed directory")
    p.add_argument("--dir", required=True)
    p.add_argument("--method", choices=METHODS + ("all",), default="all")
    p.add_argument("--work", help="where per-method copies go with --method all")
    p.add_argument("--pool-pages", type=int)
    p.add_argument("--dpt-mode", choices=DPT_MODES, default="standard")
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--refine-dpt", action="store_true")
    p.add_argument("--audit", action="store_true", help="check filter soundness and tree structure")
    p.set_defaults(fn=cmd_recover)

    p = sub.add_parser("sweep", help="cache-fraction x checkpoint-interval sweep to CSV")
    p.add_argument("--work", required=True)
    p.add_argument("--out")
    p.add_argument("--cache-fractions", help="comma list, e.g. 0.02,0.1")
    p.add_argument("--ci", help="checkpoint interval multipliers, e.g. 1,5,10")
    p.add_argument("--methods", help="comma list of methods")
    _add_spec_flags(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("verify", help="compare stored state with the committed log replay")
    p.add_argument("--dir", required=True)
    p.set_defaults(fn=cmd_verify)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
