"""Run the 200-sample adaptation benchmark and print the comparison.

    python3 scripts/benchmark.py --out /tmp/bench [--samples 200] [--seed 0] [--set key=value ...]
"""

import argparse
import sys
from pathlib import Path

import torch

from nightflow.benchmark import run_benchmark
from nightflow.trainer import TrainConfig


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args(argv)
    torch.set_num_threads(1)
    cfg = TrainConfig(seed=args.seed).override(args.overrides)
    result = run_benchmark(args.out, n=args.samples, seed=args.seed, cfg=cfg)
    print(result.summary())
    return 0 if result.passed() else 1


if __name__ == "__main__":
    sys.exit(main())
