"""Numerical identity suites: each returns a list of :class:`CheckCase` rows."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .benchmark import identity_solver_options, lemma2_check
from .inversion import SolverOptions, conjugate
from .plans import PairedBatch, PlanSampler, eight_gaussians, standard_gaussian
from .potential import IcnnPotential, QuadraticPotential
from .trainer import ofm_gradient, ofm_loss_terms, loss_identity_residual


@dataclass
class CheckCase:
    name: str
    residual: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.residual) and self.residual < self.tol)


def random_quadratic(dim: int, rng: np.random.Generator, cond: float = 20.0) -> QuadraticPotential:
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    lam = np.exp(rng.uniform(0.0, np.log(cond), dim)) / np.sqrt(cond)
    return QuadraticPotential((q * lam) @ q.T, rng.standard_normal(dim), float(rng.normal()))


def random_icnn(dim: int, rng: np.random.Generator, hidden=(16, 16), activation: str = "softplus",
                readout_scale: float = 2.0) -> IcnnPotential:
    return IcnnPotential(dim, hidden, activation).init_params(rng, readout_scale=readout_scale)


def _lemma2_quadratic(i: int) -> CheckCase:
    rng = np.random.default_rng([1, i])
    dim = (1, 2, 8)[i % 3]
    psi = random_quadratic(dim, rng)
    x0, x1 = rng.standard_normal((2, 1, dim))
    res = lemma2_check(psi, x0, x1, n=256)[0]
    return CheckCase(f"quadratic#{i} D={dim}", float(res), 1e-6)


def _lemma2_icnn(i: int) -> CheckCase:
    rng = np.random.default_rng([2, i])
    act = ("softplus", "celu")[i % 2]
    psi = random_icnn(2, rng, activation=act)
    x0, x1 = rng.standard_normal((2, 1, 2))
    res = lemma2_check(psi, x0, 1.5 * x1, n=256)[0]
    return CheckCase(f"icnn#{i} {act}", float(res), 1e-3)


def _thm1(i: int) -> CheckCase:
    rng = np.random.default_rng([3, i])
    plan = ("independent", "minibatch", "antiminibatch")[i % 3]
    if i % 2:
        psi, dim, label = random_quadratic(2, rng), 2, "quadratic"
    else:
        psi, dim, label = random_icnn(2, rng, hidden=(8, 8)), 2, "icnn"
    p1 = eight_gaussians(2.0, 0.3) if i % 4 < 2 else standard_gaussian(dim)
    batch = PlanSampler(standard_gaussian(dim), p1, plan).sample(1024, rng)
    res = loss_identity_residual(psi, batch, n=32, opts=_thm1_options())
    return CheckCase(f"thm1#{i} {label} {plan}", float(res), 1e-3)


def _thm1_options() -> SolverOptions:
    return SolverOptions(tol_grad=1e-9, max_iter=200, eps=1e-12)


def _fenchel_young(i: int) -> CheckCase:
    rng = np.random.default_rng([4, i])
    act = ("softplus", "celu")[i % 2]
    psi = random_icnn(2, rng, activation=act)
    x = rng.standard_normal((64, 2))
    y = psi.grad(x)
    conj = conjugate(psi, y, identity_solver_options())
    gap = psi.value(x) + conj.value - np.einsum("ij,ij->i", x, y)
    scale = np.maximum(np.abs(np.einsum("ij,ij->i", x, y)), 1.0)
    return CheckCase(f"fenchel-young#{i} {act}", float(np.max(np.abs(gap) / scale)), 1e-8)


def gradient_check(psi, batch: PairedBatch, times, h: float = 1e-6,
                   opts: SolverOptions | None = None) -> float:
    """max |g - g_fd| / max |g_fd| between the explicit gradient and central
    differences of the loss estimate, on a fixed batch and times."""
    opts = opts or SolverOptions(tol_grad=1e-12, max_iter=200, newton_polish=3)
    grad, _, _, _ = ofm_gradient(psi, batch, times, opts)
    fd = np.zeros_like(grad)
    work = psi.copy()
    for k in range(grad.size):
        base = work.theta[k]
        work.theta[k] = base + h
        up = ofm_loss_terms(work, batch, times, opts)[0].mean()
        work.theta[k] = base - h
        down = ofm_loss_terms(work, batch, times, opts)[0].mean()
        work.theta[k] = base
        fd[k] = (up - down) / (2 * h)
    return float(np.max(np.abs(grad - fd)) / max(np.max(np.abs(fd)), 1e-300))


def _gradcheck(i: int) -> CheckCase:
    rng = np.random.default_rng([5, i])
    act = ("softplus", "celu")[i % 2]
    psi = random_icnn(2, rng, hidden=(8, 4), activation=act)
    assert psi.n_params <= 100
    x0 = rng.standard_normal((16, 2))
    x1 = 1.5 * rng.standard_normal((16, 2)) + 1.0
    times = rng.uniform(0.05, 0.95, 16)
    res = gradient_check(psi, PairedBatch(x0, x1, "independent"), times)
    return CheckCase(f"gradcheck#{i} {act} P={psi.n_params}", res, 1e-4)


SUITES = {
    "lemma2-quadratic": (_lemma2_quadratic, 100),
    "lemma2-icnn": (_lemma2_icnn, 30),
    "thm1-identity": (_thm1, 20),
    "fenchel-young": (_fenchel_young, 20),
    "gradcheck": (_gradcheck, 20),
}


def run_suite(name: str, workers: int = 1, n_cases: int | None = None) -> list[CheckCase]:
    if name not in SUITES:
        raise KeyError(name)
    fn, default_n = SUITES[name]
    idx = range(n_cases if n_cases is not None else default_n)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, idx))
    return [fn(i) for i in idx]
