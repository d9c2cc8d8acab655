"""``neatlab`` command line: run, verify, gradcheck, inspect.

Exit codes: 0 success, 2 usage or config error, 3 failed assertion,
4 numerical divergence, 5 file or checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, records, theory
from .checkpoint import checkpoint_load, checkpoint_save
from .config import ExperimentConfig, load_config
from .errors import CheckpointError, ConfigError, ContractError, NumericalError
from .gradcheck import GraphSize, run_gradcheck
from .training import compare_budget, finetune, make_task, pretrain, run_sweep

EXIT_OK, EXIT_USAGE, EXIT_ASSERT, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4, 5

REVERSE_TOL = 1e-12


def _err(msg: str) -> None:
    print(f"neatlab: {msg}", file=sys.stderr)


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _sizes(text: str) -> GraphSize:
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"sizes must be comma-separated integers, got {text!r}") from None
    if len(parts) != 4 or min(parts) < 1:
        raise argparse.ArgumentTypeError("sizes must be four positive integers: d1,d2,r,batch")
    return GraphSize(*parts)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neatlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"neatlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train per a config file and write a run record")
    run.add_argument("--config", required=True, help="TOML or JSON experiment config")
    run.add_argument("--seed", type=int, help="override experiment.seeds with a single seed")
    run.add_argument("--out", help="output directory (default: config, then $NEATLAB_OUT_DIR, then ./runs)")

    ver = sub.add_parser("verify", help="run the construction and search batteries")
    ver.add_argument("--suite", choices=("prop1", "prop2", "all"), default="all")
    ver.add_argument("--trials", type=_positive_int, default=200)
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--prop2-mode", choices=("random", "planted"), default="random")
    ver.add_argument("--prop2-trials", type=_positive_int, help="trials for the sine search (default: --trials)")
    ver.add_argument("--c-max", type=float, default=1e4)
    ver.add_argument("--grid-step", type=float, default=1e-4)
    ver.add_argument("--out", help="write the JSON report here")

    gc = sub.add_parser("gradcheck", help="compare autodiff with finite differences")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--graphs", type=_positive_int, default=100, help="random draws per case")
    gc.add_argument("--sizes", type=_sizes, default=GraphSize(), help="d1,d2,r,batch (default 5,4,3,3)")
    gc.add_argument("--out", help="write the JSON report here")

    ins = sub.add_parser("inspect", help="print a checkpoint summary")
    ins.add_argument("path")
    return p


# -- run --------------------------------------------------------------------


def _checksums(model) -> dict:
    return {str(layer.layer_index): layer.base.checksum() for layer in model.layers}


def execute(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Run one configured experiment and write its outputs into ``out_dir``."""
    start = time.perf_counter()
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    artifacts = {"config.resolved.json": records.write_text(out_dir / "config.resolved.json", records.dumps(resolved))}

    data = make_task(cfg.task)
    base, pre = pretrain(data, cfg.model.hidden, cfg.model.pretrain_epochs, cfg.task.seed, cfg.model.pretrain_config())
    before = _checksums(base)
    seeds = list(cfg.experiment.seeds)
    mode = cfg.experiment.mode
    results: dict = {"mode": mode, "pretrain": pre.to_dict()}
    theory_report: dict = {}

    if mode == "finetune":
        runs = []
        for seed in seeds:
            model, metrics = finetune(base, data, cfg.optim, cfg.adapter, seed)
            runs.append(metrics)
            if cfg.experiment.checkpoint:
                name = f"model_seed{seed}.ckpt"
                artifacts[name] = checkpoint_save(model, out_dir / name, seed, {"arm": metrics.arm})
        results["runs"] = [m.to_dict() for m in runs]
    elif mode == "compare":
        cmp = compare_budget(base, data, cfg.adapter.r, cfg.optim, seeds, cfg.adapter, cfg.experiment.workers)
        runs = cmp.runs
        results["comparison"] = cmp.to_dict()
        theory_report["constructed_gap"] = {
            "max": cmp.max_constructed_gap(),
            "tolerance": 1e-9,
            "asserted": cmp.mode == "invariant",
        }
    else:
        sw = run_sweep(base, data, cfg.sweep.axis, cfg.sweep.values, cfg.adapter, cfg.optim, seeds, cfg.experiment.workers)
        runs = sw.runs
        results["sweep"] = sw.to_dict()

    if _checksums(base) != before:
        raise ContractError("frozen base weights changed during the run")
    artifacts["metrics.csv"] = records.write_text(out_dir / "metrics.csv", records.metrics_csv(runs))
    record = records.run_record(
        "run", resolved, results, theory_report, artifacts, before, time.perf_counter() - start,
    )
    records.write_text(out_dir / "record.json", records.dumps(record))
    if theory_report.get("constructed_gap", {}).get("asserted") and theory_report["constructed_gap"]["max"] > 1e-9:
        raise AssertionError(f"constructed NEAT loss differs from LoRA loss by {theory_report['constructed_gap']['max']:.3e}")
    return record


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, experiment=replace(cfg.experiment, seeds=(args.seed,)))
    out = Path(args.out) if args.out else cfg.out_dir()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        record = execute(cfg, out)
    for msg in dict.fromkeys(str(w.message) for w in caught):
        _err(f"warning: {msg}")
    res = record["results"]
    runs = res.get("runs") or res.get("comparison", {}).get("runs") or res.get("sweep", {}).get("runs") or []
    for m in runs:
        print(f"{m['arm']:<24} seed={m['seed']:<4} params={m['param_budget']:<7} "
              f"train {m['train_loss'][0]:.6g} -> {m['train_loss'][-1]:.6g}  val {m['val_loss'][-1]:.6g}")
    if "constructed_gap" in record["theory"]:
        print(f"constructed NEAT vs LoRA max loss gap: {record['theory']['constructed_gap']['max']:.3e}")
    print(f"wrote {out}")
    return EXIT_OK


# -- verify -----------------------------------------------------------------


def _verify_prop1(trials: int, seed: int) -> tuple[dict, list[str]]:
    rows = theory.prop1_battery(trials, seed)
    failures = []
    for row in rows:
        if not row["passed"]:
            failures.append(f"prop1 seed={seed} trial={row['trial']}: residual={row['residual']:.3e} "
                            f"loss_gap={row['loss_gap']:.3e} tol={row['tolerance']:.3e}")
        if row["reverse_residual"] > REVERSE_TOL:
            failures.append(f"prop1-reverse seed={seed} trial={row['trial']}: residual={row['reverse_residual']:.3e}")
    summary = {
        "trials": trials,
        "max_residual": max(r["residual"] for r in rows),
        "max_loss_gap": max(r["loss_gap"] for r in rows),
        "max_reverse_residual": max(r["reverse_residual"] for r in rows),
        "deficient_trials": sum(r["deficient"] for r in rows),
        "passed": not failures,
    }
    return {"summary": summary, "trials": rows}, failures


def _verify_prop2(trials: int, seed: int, mode: str, c_max: float, grid_step: float) -> tuple[dict, list[str], list[str]]:
    rows = theory.prop2_battery(trials, seed, mode, c_max, grid_step)
    failures = [
        f"prop2 seed={seed} trial={r['trial']}: achieved={r['achieved_error']:.3e} exceeds bound={r['bound']:.3e}"
        for r in rows if not r["bound_ok"]
    ]
    notes = [
        f"prop2 trial={r['trial']}: not converged, relative error {r['relative_error']:.3f} (target eps {r['eps']:.3e})"
        for r in rows if not r["converged"]
    ]
    summary = {
        "trials": trials,
        "mode": mode,
        "bound_ok": all(r["bound_ok"] for r in rows),
        "converged": sum(r["converged"] for r in rows),
        "max_relative_error": max(r["relative_error"] for r in rows),
        "passed": not failures,
    }
    return {"summary": summary, "trials": rows}, failures, notes


def cmd_verify(args) -> int:
    report, failures = {"seed": args.seed}, []
    if args.suite in ("prop1", "all"):
        report["prop1"], f1 = _verify_prop1(args.trials, args.seed)
        failures += f1
        s = report["prop1"]["summary"]
        print(f"prop1: {args.trials} trials, max residual {s['max_residual']:.3e}, max loss gap {s['max_loss_gap']:.3e}, "
              f"max reverse residual {s['max_reverse_residual']:.3e}")
    if args.suite in ("prop2", "all"):
        n = args.prop2_trials or args.trials
        report["prop2"], f2, notes = _verify_prop2(n, args.seed, args.prop2_mode, args.c_max, args.grid_step)
        failures += f2
        for note in notes:
            _err(f"warning: {note}")
        s = report["prop2"]["summary"]
        print(f"prop2 ({args.prop2_mode}): {n} trials, bound holds on all: {s['bound_ok']}, "
              f"converged {s['converged']}/{n}, max relative error {s['max_relative_error']:.3g}")
    report["failures"] = failures
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        records.write_text(args.out, records.dumps(report))
    for f in failures:
        _err(f"FAIL {f}")
    return EXIT_ASSERT if failures else EXIT_OK


# -- gradcheck / inspect ----------------------------------------------------


def cmd_gradcheck(args) -> int:
    rep = run_gradcheck(args.seed, args.graphs, args.sizes)
    d = rep.to_dict()
    print(f"gradcheck: {d['cases']} checks over {args.graphs} graphs in {rep.seconds:.1f}s, "
          f"max rel err {d['max_rel_error']:.3e} (tol {d['tolerance']:g})")
    if args.out:
        records.write_text(args.out, records.dumps(d))
    for f in d["failures"]:
        _err(f"FAIL {f}")
    return EXIT_OK if rep.passed else EXIT_ASSERT


def cmd_inspect(args) -> int:
    ck = checkpoint_load(args.path)
    print(json.dumps(ck.summary(), indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "gradcheck": cmd_gradcheck, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    np.seterr(all="ignore")  # non-finite results are detected and reported explicitly
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_USAGE
    except NumericalError as exc:
        _err(f"numerical divergence: {exc}")
        return EXIT_DIVERGED
    except (CheckpointError, FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        _err(f"file error: {exc}")
        return EXIT_IO
    except (AssertionError, ContractError) as exc:
        _err(f"assertion failed: {exc}")
        return EXIT_ASSERT


if __name__ == "__main__":
    sys.exit(main())
