"""Train OFM on 8-Gaussians under three couplings and compare the maps.

Writes one transport SVG per plan into --out and prints the pairwise
100 * |T_a - T_b|^2 / Var(p1) table.
"""
from __future__ import annotations

import argparse
import itertools
from pathlib import Path

import numpy as np

from ofm import TrainConfig, make_eight_gaussians_task, train
from ofm.plans import sample
from ofm.svg import transport_figure

PLANS = ("independent", "minibatch", "antiminibatch")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--batch-size", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/plan_invariance")
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    task = make_eight_gaussians_task()
    x0 = sample(task.p0, 2 ** 14, np.random.default_rng(args.seed + 7))
    var_p1 = float(np.sum(np.var(sample(task.p1, 2 ** 14, np.random.default_rng(args.seed + 8)), axis=0)))
    maps = {}
    for plan in PLANS:
        cfg = TrainConfig(iterations=args.iterations, batch_size=args.batch_size, lr=1e-2,
                          hidden=(64, 64), activation="softplus", plan=plan, seed=args.seed,
                          log_interval=500)
        maps[plan] = train(cfg, task).potential.grad(x0)
        transport_figure(x0[:2048], maps[plan][:2048], title=f"OFM, {plan} plan").save(
            out / f"{plan}.svg")
        print(f"trained {plan}", flush=True)
    for a, b in itertools.combinations(PLANS, 2):
        diff = 100 * np.mean(np.sum((maps[a] - maps[b]) ** 2, axis=1)) / var_p1
        print(f"{a:>13} vs {b:<13} {diff:.4f}%")


if __name__ == "__main__":
    main()
