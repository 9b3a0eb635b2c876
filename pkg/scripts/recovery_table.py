"""Train OFM on the synthetic ground-truth tasks and print L2-UVP / cosine.

    python scripts/recovery_table.py --dims 2 4 8 --iterations 4000
"""
from __future__ import annotations

import argparse
import time

from ofm import TrainConfig, evaluate_map, make_convex_task, make_gaussian_task, train

TASKS = {"gaussian": make_gaussian_task, "convex": make_convex_task}


def recovery_config(dim: int, iterations: int, seed: int = 0) -> TrainConfig:
    return TrainConfig(iterations=iterations, batch_size=256, lr=3e-3, hidden=(64, 64),
                       activation="celu", quad_rank=dim, seed=seed, log_interval=500)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, nargs="+", default=[2, 4, 8])
    ap.add_argument("--tasks", nargs="+", default=list(TASKS), choices=list(TASKS))
    ap.add_argument("--iterations", type=int, default=4000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    print(f"{'task':<10}{'D':>3}{'L2-UVP %':>11}{'cosine':>9}{'seconds':>9}")
    for kind in args.tasks:
        for dim in args.dims:
            task = TASKS[kind](dim, args.seed)
            start = time.perf_counter()
            res = train(recovery_config(dim, args.iterations, args.seed), task)
            rep = evaluate_map(res.potential.grad, task, seed=args.seed)
            print(f"{kind:<10}{dim:>3}{rep.l2_uvp:>11.3f}{rep.cosine:>9.4f}"
                  f"{time.perf_counter() - start:>9.1f}", flush=True)


if __name__ == "__main__":
    main()
