"""Optimal Flow Matching: loss estimates, explicit gradient step, training loop."""
from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .benchmark import BenchmarkTask, integrated_ofm_terms
from .inversion import (AmortizerNet, InversionResult, SolverOptions, conjugate,
                        invert_flow_map, train_amortizer)
from .optim import Adam, EmaShadow
from .plans import PairedBatch, PlanSampler
from .potential import IcnnPotential, ScalarNet, hessian

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Optimal Flow Matching hyper-parameters.

    ``eps`` clamps sampled times to [eps, 1 - eps].  ``hessian_mode`` is
    ``dense``, ``cg`` or ``auto`` (dense up to ``dense_limit`` dims).
    """

    iterations: int = 2000
    batch_size: int = 1024
    lr: float = 1e-3
    ema_decay: float = 0.999
    eps: float = 1e-3
    plan: str = "independent"
    mb_size: int = 64
    hidden: tuple = (128, 128, 64)
    activation: str = "celu"
    quad_rank: int = 0
    potential: str = "icnn"
    solver: SolverOptions = field(default_factory=SolverOptions)
    hessian_mode: str = "auto"
    dense_limit: int = 512
    seed: int = 0
    log_interval: int = 50
    log_dual: bool = False
    amortize: bool = False
    amortizer_hidden: tuple = (64, 64)
    amortizer_lr: float = 1e-3
    abort_failure_rate: float = 0.1
    abort_window: int = 20

    def __post_init__(self):
        if isinstance(self.solver, dict):
            self.solver = SolverOptions(**self.solver)
        self.hidden = tuple(self.hidden)
        self.amortizer_hidden = tuple(self.amortizer_hidden)
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if not 0.0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        if self.hessian_mode not in ("dense", "cg", "auto"):
            raise ValueError(f"unknown hessian_mode {self.hessian_mode!r}")
        if self.potential not in ("icnn", "mlp"):
            raise ValueError(f"unknown potential {self.potential!r}")
        self.solver.eps = self.eps

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        out["amortizer_hidden"] = list(self.amortizer_hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config field(s): {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossReport:
    iteration: int
    ofm_loss: float
    surrogate: float
    dual_ot_loss: float | None = None
    sub_iterations: float = 0.0
    sub_failures: int = 0


def make_potential(dim: int, config: TrainConfig, rng: np.random.Generator):
    if config.potential == "mlp":
        net = ScalarNet(dim, config.hidden, "softplus", convex=False, inject=True, skip=True,
                        quad_rank=config.quad_rank)
    else:
        net = IcnnPotential(dim, config.hidden, config.activation, quad_rank=config.quad_rank)
    return net.init_params(rng)


def sample_times(n: int, rng: np.random.Generator, eps: float = 1e-3) -> np.ndarray:
    return rng.uniform(eps, 1.0 - eps, n)


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------

def ofm_loss_terms(psi, batch: PairedBatch, times, opts: SolverOptions | None = None,
                   z_init=None) -> tuple[np.ndarray, InversionResult]:
    """Per-pair |(z0 - x0) / t|^2 with z0 the inverted flow map at x_t."""
    times = np.asarray(times, dtype=np.float64)
    res = invert_flow_map(psi, batch.interpolate(times), times, opts, z_init=z_init)
    terms = np.sum(((res.z0 - batch.x0) / times[:, None]) ** 2, axis=1)
    return terms, res


def ofm_loss(psi, batch: PairedBatch, times, opts: SolverOptions | None = None) -> float:
    terms, res = ofm_loss_terms(psi, batch, times, opts)
    if res.failures:
        log.warning("%d of %d inversion subproblems did not converge", res.failures, len(batch))
    return float(terms.mean())


def ofm_loss_quadrature(psi, batch: PairedBatch, n: int = 256, rule: str = "gauss",
                        opts: SolverOptions | None = None) -> float:
    """Batch mean of the exact-in-time OFM loss (time integral by quadrature)."""
    return float(integrated_ofm_terms(psi, batch.x0, batch.x1, n, rule, opts).mean())


def dual_ot_loss(psi, batch: PairedBatch, opts: SolverOptions | None = None) -> tuple[float, int]:
    """Monte-Carlo E[psi(x0)] + E[psi_bar(x1)]; returns (estimate, excluded count)."""
    res = conjugate(psi, batch.x1, opts)
    keep = ~res.diverged
    val = float(np.mean(psi.value(batch.x0)) + np.mean(res.value[keep]))
    return val, int(np.count_nonzero(~keep))


def loss_identity_residual(psi, batch: PairedBatch, n: int = 256,
                      opts: SolverOptions | None = None) -> float:
    """|L_OFM - 2 L_OT + 2 E<x0, x1>| / (|L_OFM| + 1e-9) on a fixed batch."""
    from .benchmark import identity_solver_options
    opts = opts or identity_solver_options()
    l_ofm = ofm_loss_quadrature(psi, batch, n, opts=opts)
    l_ot, excluded = dual_ot_loss(psi, batch, opts)
    if excluded:
        raise RuntimeError(f"{excluded} conjugate solves diverged")
    cross = float(np.mean(np.einsum("ij,ij->i", batch.x0, batch.x1)))
    return abs(l_ofm - 2 * l_ot + 2 * cross) / (abs(l_ofm) + 1e-9)


def ofm_distance(psi, psi_star, batch: PairedBatch, times, opts: SolverOptions | None = None,
                 return_terms: bool = False):
    """L_OFM(psi) - L_OFM(psi*) on shared pairs and times."""
    a, _ = ofm_loss_terms(psi, batch, times, opts)
    b, _ = ofm_loss_terms(psi_star, batch, times, opts)
    diff = a - b
    return diff if return_terms else float(diff.mean())


def transport(psi, x0) -> np.ndarray:
    """One-step inference: z1 = grad psi(z0)."""
    return psi.grad(x0)


def trajectory(psi, x0, times) -> np.ndarray:
    """Points (1-t) x0 + t grad psi(x0), shape (len(times), B, D)."""
    x0 = np.atleast_2d(x0)
    x1 = psi.grad(x0)
    t = np.asarray(times, dtype=np.float64)[:, None, None]
    return (1 - t) * x0 + t * x1


# ----------------------------------------------------------------------------
# gradient
# ----------------------------------------------------------------------------

def _solve_dense(psi, z0, times, rhs):
    d = z0.shape[1]
    t = times[:, None, None]
    M = t * hessian(psi, z0) + (1 - t) * np.eye(d)
    lam, vec = np.linalg.eigh(M)
    floor = (1.0 - times) - 1e-8
    if np.any(lam[:, 0] < floor):
        raise FloatingPointError("inversion system has eigenvalue below 1 - t; potential not convex")
    coef = np.einsum("bji,bj->bi", vec, rhs) / lam
    return np.einsum("bij,bj->bi", vec, coef)


def _solve_cg(psi, z0, times, rhs, tol: float = 1e-10, max_iter: int | None = None):
    """Batched conjugate gradient for (t H + (1-t) I) v = rhs."""
    t = times[:, None]

    def matvec(v):
        return t * psi.hvp(z0, v) + (1 - t) * v

    max_iter = max_iter or 4 * z0.shape[1]
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rr = np.einsum("ij,ij->i", r, r)
    stop = tol ** 2 * np.maximum(rr, 1e-300)
    for _ in range(max_iter):
        if np.all(rr <= stop):
            break
        Ap = matvec(p)
        alpha = rr / np.maximum(np.einsum("ij,ij->i", p, Ap), 1e-300)
        alpha = np.where(rr <= stop, 0.0, alpha)
        x += alpha[:, None] * p
        r -= alpha[:, None] * Ap
        rr_new = np.einsum("ij,ij->i", r, r)
        p = r + (rr_new / np.maximum(rr, 1e-300))[:, None] * p
        rr = rr_new
    return x


def ofm_direction(psi, batch: PairedBatch, z0, times, mode: str = "dense") -> np.ndarray:
    """v_i = 2 (t H(z0) + (1-t) I)^{-1} (x0 - z0) / t, held constant downstream."""
    times = np.asarray(times, dtype=np.float64)
    rhs = 2.0 * (batch.x0 - z0) / times[:, None]
    if mode == "cg":
        return _solve_cg(psi, z0, times, rhs)
    return _solve_dense(psi, z0, times, rhs)


def ofm_gradient(psi, batch: PairedBatch, times, opts: SolverOptions | None = None,
                 mode: str = "dense", z_init=None):
    """Explicit parameter gradient of the OFM loss estimate.

    Returns (gradient, loss terms, surrogate value, inversion result).
    """
    terms, res = ofm_loss_terms(psi, batch, times, opts, z_init)
    v = ofm_direction(psi, batch, res.z0, times, mode)
    n = len(batch)
    grad = psi.param_grad_directional(res.z0, v / n)
    surrogate = float(np.mean(psi.directional(res.z0, v)))
    return grad, terms, surrogate, res


class OfmState:
    """Optimizer, EMA shadow and optional amortizer around one potential."""

    def __init__(self, psi, config: TrainConfig, rng: np.random.Generator | None = None):
        self.psi = psi
        self.config = config
        self.opt = Adam(lr=config.lr)
        self.ema = EmaShadow(psi.theta, config.ema_decay)
        self.amortizer = None
        if config.amortize:
            self.amortizer = AmortizerNet(psi.dim, config.amortizer_hidden, config.amortizer_lr,
                                          rng or np.random.default_rng(config.seed + 1))
        self.amortizer_losses: list[float] = []

    def hessian_mode(self) -> str:
        mode = self.config.hessian_mode
        if mode == "auto":
            return "dense" if self.psi.dim <= self.config.dense_limit else "cg"
        return mode

    def ema_potential(self):
        out = self.psi.copy()
        out.set_theta(self.ema.theta)
        return out


def ofm_grad_step(state: OfmState, batch: PairedBatch, times) -> tuple[LossReport, InversionResult]:
    """One Adam step on the explicit OFM gradient, then convexity projection and EMA."""
    psi, cfg = state.psi, state.config
    times = np.asarray(times, dtype=np.float64)
    z_init = None
    if state.amortizer is not None:
        z_init = state.amortizer(batch.interpolate(times), times)
    grad, terms, surrogate, res = ofm_gradient(psi, batch, times, cfg.solver,
                                               state.hessian_mode(), z_init)
    state.opt.step(psi.theta, grad)
    psi.project_convex()
    state.ema.update(psi.theta)
    if state.amortizer is not None:
        state.amortizer_losses.append(
            train_amortizer(state.amortizer, batch.interpolate(times), times, res.z0))
    report = LossReport(iteration=-1, ofm_loss=float(terms.mean()), surrogate=surrogate,
                        sub_iterations=float(res.iterations.mean()), sub_failures=res.failures)
    return report, res


@dataclass
class TrainResult:
    potential: object          # EMA-weighted potential
    raw_potential: object
    trace: list
    timings: list
    checkpoints: list = field(default_factory=list)


def train(config: TrainConfig, task: BenchmarkTask, callback=None,
          checkpoint_every: int | None = None) -> TrainResult:
    """Run the OFM loop; returns the EMA-weighted potential and the metric trace.

    ``callback(iteration, state)`` is invoked after every step.
    """
    rng = np.random.default_rng(config.seed)
    psi = make_potential(task.dim, config, rng)
    state = OfmState(psi, config, np.random.default_rng(config.seed + 1))
    sampler = PlanSampler(task.p0, task.p1, config.plan, config.mb_size)
    trace, timings, checkpoints = [], [], []
    failures = deque(maxlen=config.abort_window)
    start = time.perf_counter()
    for it in range(1, config.iterations + 1):
        batch = sampler.sample(config.batch_size, rng)
        times = sample_times(config.batch_size, rng, config.eps)
        report, res = ofm_grad_step(state, batch, times)
        failures.append(res.failures / len(batch))
        if len(failures) == failures.maxlen and np.mean(failures) > config.abort_failure_rate:
            raise TrainingAborted(
                f"inversion failure rate {np.mean(failures):.1%} over last {len(failures)} steps")
        if callback is not None:
            callback(it, state)
        if it % config.log_interval == 0 or it == config.iterations:
            report.iteration = it
            if config.log_dual:
                report.dual_ot_loss, _ = dual_ot_loss(psi, batch, config.solver)
            trace.append(report)
            timings.append((it, time.perf_counter() - start))
            log.info("iter %d  ofm_loss %.5f  sub_iters %.1f  failures %d", it, report.ofm_loss,
                     report.sub_iterations, report.sub_failures)
        if checkpoint_every and it % checkpoint_every == 0:
            checkpoints.append((it, state.ema.theta.copy()))
    return TrainResult(state.ema_potential(), psi, trace, timings, checkpoints)


class OfmField:
    """Velocity u_t(x) = grad psi(z0) - z0 with z0 the inverted flow map at (x, t).

    Lets the one-step map be cross-checked against ODE integration.
    """

    def __init__(self, psi, opts: SolverOptions | None = None):
        self.psi = psi
        self.opts = opts or SolverOptions(tol_grad=1e-10, max_iter=200, eps=0.0)
        self._last = None

    def __call__(self, t, x):
        x = np.atleast_2d(x)
        z_init = self._last if self._last is not None and self._last.shape == x.shape else None
        z0 = invert_flow_map(self.psi, x, float(t), self.opts, z_init=z_init).z0
        self._last = z0
        return self.psi.grad(z0) - z0
