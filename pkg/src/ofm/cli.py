"""Command-line front end: ``ofm {train,eval,check,plot}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import baselines
from .benchmark import (BenchmarkTask, UndefinedMetricError, cosine_metric, l2_uvp,
                        task_from_dict)
from .checks import SUITES, run_suite
from .config import PLOT_KINDS, ConfigError, ExperimentConfig, load_config, write_snapshot
from .ode import OdeOptions, integrate
from .plans import PlanSampler, sample
from .potential import potential_from_dict
from .svg import Figure, Layer, PALETTE, loss_figure, transport_figure
from .trainer import LossReport, TrainingAborted, ofm_distance, sample_times, train

log = logging.getLogger("ofm")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
METRICS_COLUMNS = ("iteration", "method", "round", "loss", "surrogate", "dual_ot_loss",
                   "sub_iters", "sub_failures")
CHECKPOINT_VERSION = 1


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# run artifacts
# ----------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def trace_rows(method: str, trace) -> list[dict]:
    rows = []
    for r in trace:
        if isinstance(r, LossReport):
            rows.append({"iteration": r.iteration, "method": method, "round": 0,
                         "loss": r.ofm_loss, "surrogate": r.surrogate,
                         "dual_ot_loss": r.dual_ot_loss, "sub_iters": r.sub_iterations,
                         "sub_failures": r.sub_failures})
        else:
            rows.append({"iteration": r.iteration, "method": method, "round": r.round,
                         "loss": r.loss, "surrogate": None, "dual_ot_loss": None,
                         "sub_iters": None, "sub_failures": None})
    return rows


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for row in rows:
            w.writerow([row["method"] if c == "method" else _fmt(row[c]) for c in METRICS_COLUMNS])


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_timings(path, timings) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iteration", "wall_seconds"))
        w.writerows((it, f"{sec:.3f}") for it, sec in timings)


def save_checkpoint(path, method: str, model, task: BenchmarkTask, iteration: int | None = None):
    payload = {"format_version": CHECKPOINT_VERSION, "method": method,
               "task": task.to_dict(), "model": model.to_dict()}
    if iteration is not None:
        payload["iteration"] = iteration
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        if "model" not in data:
            # a bare potential file is accepted as an OFM checkpoint
            data = {"format_version": CHECKPOINT_VERSION, "method": "ofm", "model": data}
        if data.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('format_version')!r}")
        if data["method"] == "ofm":
            data["model"] = potential_from_dict(data["model"])
        else:
            data["model"] = baselines.field_from_dict(data["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from None
    return data


def model_map(method: str, model, ode: OdeOptions | None = None):
    if method == "ofm":
        return model.grad
    return baselines.field_map(model, ode)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig) -> Path:
    """Train, then write metrics.csv, timing.csv, checkpoints and the config snapshot."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out / "config.json")
    task = cfg.build_task()
    if cfg.method == "ofm":
        res = train(cfg.train, task, checkpoint_every=cfg.checkpoint_every or None)
        trace, timings, model = res.trace, res.timings, res.potential
        for it, theta in res.checkpoints:
            snap = res.potential.copy()
            snap.set_theta(theta)
            save_checkpoint(out / f"checkpoint_{it:06d}.json", "ofm", snap, task, it)
    else:
        trace, timings = [], []
        model, _ = baselines.train_rectified(cfg.train, task, trace, timings)
    save_checkpoint(out / "checkpoint.json", cfg.method, model, task)
    write_metrics(out / "metrics.csv", trace_rows(cfg.method, trace))
    write_timings(out / "timing.csv", timings)
    for kind in cfg.plots:
        make_plot(out, kind)
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config, seed=args.seed, out=args.out)
    start = time.perf_counter()
    out = run_experiment(cfg)
    print(f"wrote {out} ({time.perf_counter() - start:.1f}s)")
    return EXIT_OK


def _resolve_task(args, ckpt) -> BenchmarkTask:
    if args.task:
        src = Path(args.task)
        if not src.is_file():
            raise FileNotFoundError(f"task descriptor not found: {src}")
        return task_from_dict(json.loads(src.read_text(encoding="utf-8")))
    if args.config:
        return load_config(args.config).build_task()
    if "task" not in ckpt:
        raise UsageError("checkpoint carries no task; pass --task or --config")
    return task_from_dict(ckpt["task"])


def evaluate_checkpoint(ckpt: dict, task: BenchmarkTask, seed: int = 0) -> dict:
    model, method = ckpt["model"], ckpt["method"]
    if model.dim != task.dim:
        raise UsageError(f"dimension mismatch: model D={model.dim}, task D={task.dim}")
    T = model_map(method, model)
    rng = np.random.default_rng(seed)
    x0 = sample(task.p0, task.n_eval, rng)
    report = {"l2_uvp": l2_uvp(T, task, rng, x0), "n_samples": len(x0), "seed": seed}
    try:
        report["cosine"] = cosine_metric(T, task, rng, x0)
    except UndefinedMetricError as exc:
        report["cosine"] = None
        report["cosine_undefined"] = str(exc)
    if method == "ofm" and task.ground_truth is not None:
        rng = np.random.default_rng([seed, 1])
        n = min(task.n_eval, 4096)
        batch = PlanSampler(task.p0, task.p1, "independent").sample(n, rng)
        terms = ofm_distance(model, task.ground_truth, batch, sample_times(n, rng),
                             return_terms=True)
        report["ofm_distance"] = float(terms.mean())
        report["ofm_distance_se"] = float(terms.std(ddof=1) / np.sqrt(n))
    return report


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    task = _resolve_task(args, ckpt)
    report = evaluate_checkpoint(ckpt, task, args.seed or 0)
    text = json.dumps(report, indent=2)
    print(text)
    dest = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.json")
    dest.write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_check(args) -> int:
    if args.suite not in SUITES:
        print(f"unknown suite {args.suite!r}; available: {', '.join(SUITES)}", file=sys.stderr)
        return EXIT_USAGE
    cases = run_suite(args.suite, workers=args.workers)
    width = max(len(c.name) for c in cases)
    print(f"{'case':<{width}}  {'residual':>10}  {'tol':>8}  status")
    for c in cases:
        print(f"{c.name:<{width}}  {c.residual:10.3e}  {c.tol:8.1e}  {'ok' if c.ok else 'FAIL'}")
    failed = [c for c in cases if not c.ok]
    if failed:
        print(f"{len(failed)} case(s) out of tolerance: " + ", ".join(c.name for c in failed),
              file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(cases)} cases within tolerance")
    return EXIT_OK


def make_plot(target, kind: str, n: int = 1024, seed: int = 0) -> Path:
    """Write ``<kind>.svg`` next to the run's checkpoint (or metrics)."""
    target = Path(target)
    run_dir = target if target.is_dir() else target.parent
    if kind == "loss":
        rows = read_metrics(run_dir / "metrics.csv")
        fig = loss_figure([float(r["iteration"]) for r in rows], [float(r["loss"]) for r in rows])
        dest = run_dir / "loss.svg"
        fig.save(dest)
        return dest
    ckpt = load_checkpoint(target if target.is_file() else run_dir / "checkpoint.json")
    task = task_from_dict(ckpt["task"])
    if task.dim != 2:
        raise UsageError(f"plot kind {kind!r} needs a 2D task, got D={task.dim}")
    rng = np.random.default_rng(seed)
    x0 = sample(task.p0, n, rng)
    method, model = ckpt["method"], ckpt["model"]
    if kind == "scatter":
        x1 = model_map(method, model)(x0)
        fig = Figure(title=f"{method}: samples")
        fig.add(Layer("p0", "points", x0, PALETTE[0]))
        fig.add(Layer("p1", "points", sample(task.p1, n, rng), PALETTE[3]))
        fig.add(Layer("pushforward", "points", x1, PALETTE[1]))
    else:
        if method == "ofm":
            fig = transport_figure(x0, model.grad(x0), title="ofm: trajectories")
        else:
            times = np.linspace(0, 1, 11)
            path = integrate(model, x0[:64], t_eval=times).states
            x1 = baselines.field_map(model)(x0)
            fig = Figure(title=f"{method}: trajectories")
            fig.add(Layer("p0", "points", x0, PALETTE[0]))
            fig.add(Layer("pushforward", "points", x1, PALETTE[1]))
            segs = np.stack([path[:-1], path[1:]], axis=2).reshape(-1, 2, 2)
            fig.add(Layer("trajectories", "segments", segs, PALETTE[2], size=1.0, opacity=0.5))
    dest = run_dir / f"{kind}.svg"
    fig.save(dest)
    return dest


def cmd_plot(args) -> int:
    if args.kind not in PLOT_KINDS:
        raise UsageError(f"unknown plot kind {args.kind!r}")
    target = Path(args.target)
    if not target.exists():
        raise FileNotFoundError(f"no such run directory or checkpoint: {target}")
    print(make_plot(target, args.kind, seed=args.seed or 0))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ofm", description="Optimal Flow Matching experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", default=None)

    p = sub.add_parser("train", help="run one experiment from a config file")
    p.add_argument("--config", required=True)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="L2-UVP and cosine of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--task", default=None, help="JSON task descriptor")
    p.add_argument("--config", default=None)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run a numerical identity suite")
    p.add_argument("--suite", required=True)
    common(p)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("plot", help="SVG plots of a run")
    p.add_argument("target", help="run directory or checkpoint file")
    p.add_argument("--kind", default="traj", help="scatter | traj | loss")
    common(p)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("--workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, UsageError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
