"""Command-line entry point: ``ddhinf {excite,synth,run,audit,reproduce-example}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import experiment as ex
from .datagen import DataSet, InformativityError, SlaterPointError
from .synth import InfeasibleError, synthesize

EXIT_OK, EXIT_AUDIT, EXIT_INFEASIBLE, EXIT_CONFIG = 0, 1, 2, 1


def _config(args) -> ex.ScenarioConfig:
    cfg = ex.load_config(args.config)
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.simulation.disturbance.seed = args.seed + 1
    if args.headroom is not None:
        if not args.headroom > 0:
            raise ex.ConfigError("--headroom must be positive")
        cfg.simulation.headroom = args.headroom
    if args.out is not None:
        cfg.outputs.directory = args.out
    return cfg


def _table(rows) -> None:
    w = max(len(r[0]) for r in rows)
    for name, status, detail in rows:
        print(f"{name:<{w}}  {status:<4}  {detail}")


def cmd_excite(args) -> int:
    cfg = _config(args)
    data = ex.collect_data(cfg)
    out = Path(cfg.outputs.directory) / "dataset"
    data.save(out)
    print(f"wrote {data.J} samples to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config(args)
    root = Path(cfg.outputs.directory)
    data = DataSet.load(root / "dataset") if (root / "dataset" / "dataset.json").exists() else ex.collect_data(cfg)
    spec = ex.make_spec(cfg, data)
    ctrl, rep = synthesize(spec, ex.solver_settings())
    (root / "controllers").mkdir(parents=True, exist_ok=True)
    ctrl.to_json(root / "controllers" / "static.json")
    print(f"gamma = {ctrl.gamma:.6g}  K = {np.array2string(ctrl.K, precision=6)}  ({rep.solve_time:.3f}s)")
    return EXIT_OK


def _print_report(report: ex.ComparisonReport) -> None:
    for name, run in report.runs.items():
        print(f"[{name}]")
        if run.audit is None:
            print("  infeasible")
            continue
        _table([(f"  {a}", s, d) for a, s, d in run.audit.rows()])


def cmd_run(args) -> int:
    cfg = _config(args)
    report, path = ex.run_scenario(cfg)
    _print_report(report)
    print(f"artifacts in {path}")
    return EXIT_OK if report.audits_ok else EXIT_AUDIT


def cmd_audit(args) -> int:
    directory = Path(args.out or ex.load_config(args.config).outputs.directory)
    results = ex.reaudit(directory)
    if not results:
        print(f"no certificates under {directory / 'audits'}", file=sys.stderr)
        return EXIT_CONFIG
    ok = True
    for name, (fresh, stored) in results.items():
        print(f"[{name}]")
        _table([(f"  {a}", s, d) for a, s, d in fresh.rows()])
        if fresh.ok != stored.ok:
            print(f"  stored verdict {stored.ok} differs from recomputed {fresh.ok}")
        ok &= fresh.ok
    return EXIT_OK if ok else EXIT_AUDIT


def cmd_reproduce(args) -> int:
    report = ex.reproduce_example(args.out)
    _print_report(report)
    _table([(k, "PASS" if v else "FAIL", "") for k, v in report.claims.items()])
    return EXIT_OK if not report.failed_claims and report.audits_ok else EXIT_AUDIT


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddhinf", description="Data-driven constrained H-infinity control")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, help_ in [
        ("excite", cmd_excite, "collect an excitation data set"),
        ("synth", cmd_synth, "synthesize the static controller"),
        ("run", cmd_run, "run the full controller comparison"),
        ("audit", cmd_audit, "re-audit stored trajectories"),
        ("reproduce-example", cmd_reproduce, "benchmark comparison with claim checks"),
    ]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--seed", type=int, metavar="N")
        sp.add_argument("--headroom", type=float, metavar="H")
        sp.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ex.ConfigError, FileNotFoundError, json.JSONDecodeError, yaml.YAMLError, InformativityError, SlaterPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
