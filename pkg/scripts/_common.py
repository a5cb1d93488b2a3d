"""Shared setup for the experiment scripts: build or reuse a data directory."""

import argparse
import os

from disenbooth.experiments import Bench
from disenbooth.pipeline import DataDir, generate_data
from disenbooth.storage import load_config

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def parser(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", help="run config file (defaults apply otherwise)")
    p.add_argument("--data", default=os.path.join(ROOT, "runs", "data"), help="gen-data directory")
    p.add_argument("--base-cache", default=os.path.join(ROOT, ".cache", "base-default.ckpt"))
    return p


def bench(args) -> Bench:
    cfg = load_config(args.config)
    if not os.path.exists(os.path.join(args.data, "base.ckpt")):
        generate_data(cfg, args.data, base_cache=args.base_cache)
    return Bench(cfg, DataDir(args.data))
