"""Ground-truth transport tasks and map-quality metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import sqrtm

from .inversion import SolverOptions, conjugate, invert_flow_map
from .plans import DistributionSpec, eight_gaussians, sample, standard_gaussian
from .potential import QuadraticPotential, SoftplusRidgePotential

DEFAULT_EVAL_SAMPLES = 2 ** 14


class UndefinedMetricError(ValueError):
    pass


@dataclass
class BenchmarkTask:
    """Source, target and (when known) the Brenier potential between them."""

    p0: DistributionSpec
    p1: DistributionSpec
    ground_truth: object | None = None
    n_eval: int = DEFAULT_EVAL_SAMPLES
    descriptor: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.p0.dim

    def true_map(self, x):
        if self.ground_truth is None:
            raise UndefinedMetricError("task has no ground-truth map")
        return self.ground_truth.grad(x)

    def to_dict(self) -> dict:
        return dict(self.descriptor)


def gaussian_task(mean, cov, descriptor: dict | None = None) -> BenchmarkTask:
    """N(0, I) -> N(mean, cov); the OT map is x -> mean + cov^{1/2} x."""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    root = np.real(sqrtm(cov))
    root = 0.5 * (root + root.T)
    psi = QuadraticPotential(root, mean)
    d = mean.size
    desc = descriptor or {"kind": "gaussian-explicit", "mean": mean.tolist(), "cov": cov.tolist()}
    return BenchmarkTask(standard_gaussian(d), DistributionSpec("gaussian", {"mean": mean, "cov": cov}),
                         psi, descriptor=desc)


def make_gaussian_task(dim: int, seed: int, max_condition: float = 16.0) -> BenchmarkTask:
    """Random N(m, Sigma) target with cond(Sigma) <= ``max_condition``."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    half = np.sqrt(max_condition)
    # eigenvalues of Sigma^{1/2} in [1/half^{1/2}, half^{1/2}]
    lam = np.exp(rng.uniform(-0.5, 0.5, dim) * np.log(half))
    root = (q * lam) @ q.T
    mean = rng.standard_normal(dim)
    cov = root @ root
    task = gaussian_task(mean, cov, {"kind": "gaussian", "dim": dim, "seed": seed})
    task.ground_truth = QuadraticPotential(0.5 * (root + root.T), mean)
    return task


def make_convex_task(dim: int, seed: int, complexity: int = 4,
                     ridge_scale: float = 2.0) -> BenchmarkTask:
    """Target = grad Psi* # N(0, I) with Psi* = |x|^2/2 + sum of softplus ridges."""
    if complexity < 0:
        raise ValueError("complexity must be >= 0")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((complexity, dim))
    w /= np.linalg.norm(w, axis=1, keepdims=True) + 1e-300
    w *= ridge_scale
    offsets = rng.normal(0.0, 1.0, complexity)
    scales = rng.uniform(0.5, 2.0, complexity)
    psi = SoftplusRidgePotential(w.reshape(complexity, dim), offsets, scales)
    p0 = standard_gaussian(dim)
    p1 = DistributionSpec("pushforward", {"base": p0, "potential": psi})
    return BenchmarkTask(p0, p1, psi, descriptor={"kind": "convex", "dim": dim, "seed": seed,
                                                  "complexity": complexity})


def make_eight_gaussians_task(radius: float = 4.0, sigma: float = 0.3) -> BenchmarkTask:
    return BenchmarkTask(standard_gaussian(2), eight_gaussians(radius, sigma),
                         descriptor={"kind": "eight-gaussians", "radius": radius, "sigma": sigma})


def task_from_dict(data: dict) -> BenchmarkTask:
    kind = data.get("kind")
    n_eval = int(data.get("n_eval", DEFAULT_EVAL_SAMPLES))
    if kind == "gaussian":
        task = make_gaussian_task(int(data["dim"]), int(data["seed"]))
    elif kind == "gaussian-explicit":
        task = gaussian_task(data["mean"], data["cov"])
    elif kind == "convex":
        task = make_convex_task(int(data["dim"]), int(data["seed"]), int(data.get("complexity", 4)))
    elif kind == "eight-gaussians":
        task = make_eight_gaussians_task(float(data.get("radius", 4.0)), float(data.get("sigma", 0.3)))
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    task.n_eval = n_eval
    if n_eval != DEFAULT_EVAL_SAMPLES:
        task.descriptor["n_eval"] = n_eval
    return task


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------

@dataclass
class MetricsReport:
    l2_uvp: float
    cosine: float
    n_samples: int
    seed: int | None = None

    def to_dict(self) -> dict:
        return {"l2_uvp": self.l2_uvp, "cosine": self.cosine, "n_samples": self.n_samples,
                "seed": self.seed}


def _eval_points(task: BenchmarkTask, rng, x0=None):
    if x0 is None:
        x0 = sample(task.p0, task.n_eval, rng)
    return x0, task.true_map(x0)


def l2_uvp(T: Callable, task: BenchmarkTask, rng: np.random.Generator, x0=None) -> float:
    """100 * |T - T*|^2_{L2(p0)} / Var(p1), Var as total variance."""
    x0, t_star = _eval_points(task, rng, x0)
    var = float(np.var(t_star, axis=0).sum())
    if var < 1e-12:
        raise UndefinedMetricError("target variance is (numerically) zero")
    diff = T(x0) - t_star
    return 100.0 * float(np.mean(np.einsum("ij,ij->i", diff, diff))) / var


def cosine_metric(T: Callable, task: BenchmarkTask, rng: np.random.Generator, x0=None) -> float:
    x0, t_star = _eval_points(task, rng, x0)
    a = T(x0) - x0
    b = t_star - x0
    na, nb = np.sqrt(np.mean(np.sum(a * a, 1))), np.sqrt(np.mean(np.sum(b * b, 1)))
    if na < 1e-12 or nb < 1e-12:
        raise UndefinedMetricError("zero displacement: cosine undefined")
    return float(np.clip(np.mean(np.sum(a * b, 1)) / (na * nb), -1.0, 1.0))


def evaluate_map(T: Callable, task: BenchmarkTask, seed: int = 0) -> MetricsReport:
    rng = np.random.default_rng(seed)
    x0 = sample(task.p0, task.n_eval, rng)
    return MetricsReport(l2_uvp(T, task, rng, x0), cosine_metric(T, task, rng, x0), len(x0), seed)


def linear_baseline_map(task: BenchmarkTask, rng: np.random.Generator, n: int | None = None):
    """Affine map matching the empirical mean and covariance of p0 and p1."""
    n = n or task.n_eval
    x0 = sample(task.p0, n, rng)
    x1 = sample(task.p1, n, rng)
    m0, m1 = x0.mean(0), x1.mean(0)
    c0 = np.atleast_2d(np.cov(x0, rowvar=False))
    c1 = np.atleast_2d(np.cov(x1, rowvar=False))
    r0 = np.real(sqrtm(c0))
    r0i = np.linalg.inv(r0)
    mid = np.real(sqrtm(r0 @ c1 @ r0))
    A = r0i @ mid @ r0i
    A = 0.5 * (A + A.T)
    return lambda x: m1 + (np.asarray(x) - m0) @ A


# ----------------------------------------------------------------------------
# integration identity
# ----------------------------------------------------------------------------

def quadrature_rule(n: int, rule: str = "gauss") -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on (0, 1)."""
    if rule == "gauss":
        x, w = np.polynomial.legendre.leggauss(n)
        return 0.5 * (x + 1.0), 0.5 * w
    if rule == "midpoint":
        return (np.arange(n) + 0.5) / n, np.full(n, 1.0 / n)
    raise ValueError(f"unknown quadrature rule {rule!r}")


def identity_solver_options(max_iter: int = 500) -> SolverOptions:
    return SolverOptions(tol_grad=1e-11, max_iter=max_iter, eps=1e-12, newton_polish=3)


def integrated_ofm_terms(psi, x0, x1, n: int = 256, rule: str = "gauss",
                         opts: SolverOptions | None = None) -> np.ndarray:
    """Per-pair time integral of |(z0(t) - x0) / t|^2 over (0, 1)."""
    opts = opts or identity_solver_options()
    x0, x1 = np.atleast_2d(x0), np.atleast_2d(x1)
    nodes, weights = quadrature_rule(n, rule)
    b, d = x0.shape
    t = np.repeat(nodes, b)
    X0 = np.tile(x0, (n, 1))
    xt = (1 - t)[:, None] * X0 + t[:, None] * np.tile(x1, (n, 1))
    res = invert_flow_map(psi, xt, t, opts)
    if res.failures:
        raise RuntimeError(f"{res.failures} inversion subproblems did not converge")
    integrand = np.sum(((res.z0 - X0) / t[:, None]) ** 2, axis=1).reshape(n, b)
    return weights @ integrand


def lemma2_sides(psi, x0, x1, n: int = 256, rule: str = "gauss",
                 opts: SolverOptions | None = None) -> tuple[np.ndarray, np.ndarray]:
    opts = opts or identity_solver_options()
    x0, x1 = np.atleast_2d(x0), np.atleast_2d(x1)
    lhs = integrated_ofm_terms(psi, x0, x1, n, rule, opts)
    conj = conjugate(psi, x1, opts)
    if not np.all(conj.converged):
        raise RuntimeError("conjugate subproblem did not converge")
    rhs = 2.0 * (psi.value(x0) + conj.value - np.einsum("ij,ij->i", x0, x1))
    return lhs, rhs


def lemma2_check(psi, x0, x1, n: int = 256, rule: str = "gauss",
                 opts: SolverOptions | None = None) -> np.ndarray:
    """Relative residual between the time integral of the flow-matching
    error of psi's straight field and twice the Fenchel-Young gap."""
    lhs, rhs = lemma2_sides(psi, x0, x1, n, rule, opts)
    return np.abs(lhs - rhs) / np.maximum(np.abs(rhs), 1e-12)
