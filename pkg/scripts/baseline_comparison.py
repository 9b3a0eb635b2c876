"""OFM vs OT-CFM vs FM at a matched budget on a convex ground-truth task."""
from __future__ import annotations

import argparse
import time

from ofm import TrainConfig, evaluate_map, make_convex_task, train
from ofm.baselines import FmConfig, field_map, train_fm
from ofm.ode import OdeOptions


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dim", type=int, default=8)
    ap.add_argument("--iterations", type=int, default=4000)
    ap.add_argument("--batch-size", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    task = make_convex_task(args.dim, args.seed)
    ode = OdeOptions(method="dopri5", atol=1e-6, rtol=1e-6)

    def ofm_map():
        cfg = TrainConfig(iterations=args.iterations, batch_size=args.batch_size, lr=3e-3,
                          hidden=(64, 64), quad_rank=args.dim, seed=args.seed, log_interval=500)
        return train(cfg, task).potential.grad

    def fm_map(plan):
        cfg = FmConfig(iterations=args.iterations, batch_size=args.batch_size, plan=plan,
                       seed=args.seed, log_interval=500, ode=ode)
        return field_map(train_fm(cfg, task), ode)

    runs = {"OFM": ofm_map, "OT-CFM": lambda: fm_map("minibatch"),
            "FM": lambda: fm_map("independent")}
    print(f"{'method':<8}{'L2-UVP %':>10}{'cosine':>9}{'seconds':>9}")
    for name, make in runs.items():
        start = time.perf_counter()
        rep = evaluate_map(make(), task, seed=args.seed + 1)
        print(f"{name:<8}{rep.l2_uvp:>10.3f}{rep.cosine:>9.4f}{time.perf_counter() - start:>9.1f}",
              flush=True)


if __name__ == "__main__":
    main()
