"""Shared plumbing for the experiment scripts: load a config, apply overrides, run."""

import argparse
import warnings
from dataclasses import replace
from pathlib import Path

from neatlab.cli import execute
from neatlab.config import load_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def parser(description, config_name):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", default=str(CONFIGS / config_name))
    p.add_argument("--seeds", type=int, nargs="+", help="override experiment.seeds")
    p.add_argument("--epochs", type=int, help="override optim.epochs")
    p.add_argument("--workers", type=int, help="override experiment.workers")
    p.add_argument("--out", default=None, help="output directory")
    return p


def run(args, default_out):
    cfg = load_config(args.config)
    exp = cfg.experiment
    if args.seeds:
        exp = replace(exp, seeds=tuple(args.seeds))
    if args.workers:
        exp = replace(exp, workers=args.workers)
    cfg = replace(cfg, experiment=exp)
    if args.epochs is not None:
        cfg = replace(cfg, optim=replace(cfg.optim, epochs=args.epochs))
    out = Path(args.out or default_out)
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        record = execute(cfg, out)
    return record, out
