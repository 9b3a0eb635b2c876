"""Flow-map inversion and convex conjugation via batched L-BFGS.

Both subproblems are smooth convex minimizations, one per batch row.  The
solver below runs an independent limited-memory quasi-Newton iteration for
every row in lock-step, evaluating only rows that have not converged yet.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .nets import MLP
from .optim import Adam
from .potential import hessian

log = logging.getLogger(__name__)

_FEPS = 4.0 * np.finfo(np.float64).eps


@dataclass
class SolverOptions:
    """Inner-solver settings.

    ``tol_grad=None`` means ``1e-8 * sqrt(D)``.  ``newton_polish`` adds that
    many exact-Hessian Newton steps after L-BFGS on rows above tolerance;
    only used where solutions are needed near machine precision.
    """

    tol_grad: float | None = None
    max_iter: int = 50
    memory: int = 10
    eps: float = 1e-3
    divergence_bound: float = 1e6
    max_backtracks: int = 40
    newton_polish: int = 0

    def tolerance(self, dim: int) -> float:
        return 1e-8 * np.sqrt(dim) if self.tol_grad is None else float(self.tol_grad)


@dataclass
class InversionResult:
    """Batched solution of the inversion subproblem (arrays over rows)."""

    z0: np.ndarray
    grad_norm_final: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray

    @property
    def failures(self) -> int:
        return int(np.count_nonzero(~self.converged))


@dataclass
class ConjugateResult:
    value: np.ndarray
    argmax: np.ndarray
    converged: np.ndarray
    diverged: np.ndarray


FunGrad = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def lbfgs_batched(fg: FunGrad, z_init: np.ndarray, tol: float, max_iter: int,
                  memory: int = 10, max_backtracks: int = 40,
                  divergence_bound: float | None = None):
    """Minimize ``n`` independent functions with L-BFGS + Armijo backtracking.

    ``fg(z, idx)`` returns values ``(k,)`` and gradients ``(k, D)`` of the
    functions indexed by ``idx`` at rows ``z``.  Returns ``(z, grad_norm,
    iterations, diverged)``.
    """
    z = np.array(z_init, dtype=np.float64, copy=True)
    n, d = z.shape
    all_idx = np.arange(n)
    f, g = fg(z, all_idx)
    gnorm = np.linalg.norm(g, axis=1)
    iters = np.zeros(n, dtype=int)
    diverged = np.zeros(n, dtype=bool)
    stalled = np.zeros(n, dtype=bool)

    S = np.zeros((memory, n, d))
    Y = np.zeros((memory, n, d))
    rho = np.zeros((memory, n))
    gamma = np.ones(n)
    slot = 0

    for _ in range(max_iter):
        active = np.flatnonzero((gnorm > tol) & ~diverged & ~stalled)
        if active.size == 0:
            break
        ga = g[active]

        # two-loop recursion, newest pair first
        q = ga.copy()
        alphas = []
        for j in range(memory):
            k = (slot - 1 - j) % memory
            a = rho[k, active] * np.einsum("ij,ij->i", S[k, active], q)
            q -= a[:, None] * Y[k, active]
            alphas.append((k, a))
        r = gamma[active, None] * q
        for k, a in reversed(alphas):
            b = rho[k, active] * np.einsum("ij,ij->i", Y[k, active], r)
            r += S[k, active] * (a - b)[:, None]
        direction = -r
        slope = np.einsum("ij,ij->i", direction, ga)
        bad = ~(slope < 0)
        if np.any(bad):
            direction[bad] = -ga[bad]
            slope[bad] = -np.einsum("ij,ij->i", ga[bad], ga[bad])

        # backtracking on the rows that still need it
        step = np.ones(active.size)
        z_new = np.empty((active.size, d))
        f_new = np.empty(active.size)
        g_new = np.empty((active.size, d))
        pending = np.arange(active.size)
        accepted = np.zeros(active.size, dtype=bool)
        for _bt in range(max_backtracks):
            rows = active[pending]
            zt = z[rows] + step[pending, None] * direction[pending]
            ft, gt = fg(zt, rows)
            f0 = f[rows]
            armijo = ft <= f0 + 1e-4 * step[pending] * slope[pending]
            # below roundoff in f, accept unless the gradient blows up
            flat = (np.abs(ft - f0) <= _FEPS * np.maximum(1.0, np.abs(f0))) & (
                np.linalg.norm(gt, axis=1) < 2.0 * gnorm[rows])
            ok = (armijo | flat) & np.all(np.isfinite(gt), axis=1)
            done = pending[ok]
            z_new[done], f_new[done], g_new[done] = zt[ok], ft[ok], gt[ok]
            accepted[done] = True
            pending = pending[~ok]
            if pending.size == 0:
                break
            step[pending] *= 0.5

        stalled[active[~accepted]] = True
        acc = active[accepted]
        loc = np.flatnonzero(accepted)
        s = z_new[loc] - z[acc]
        y = g_new[loc] - g[acc]
        sy = np.einsum("ij,ij->i", s, y)
        yy = np.einsum("ij,ij->i", y, y)
        good = sy > 1e-12 * np.sqrt(np.einsum("ij,ij->i", s, s) * yy)
        S[slot, acc] = s
        Y[slot, acc] = y
        rho[slot, acc] = np.where(good, 1.0 / np.where(good, sy, 1.0), 0.0)
        gamma[acc] = np.where(good, sy / np.where(good, yy, 1.0), gamma[acc])
        # rows that did not move keep a zero pair in this slot
        not_acc = active[~accepted]
        rho[slot, not_acc] = 0.0
        slot = (slot + 1) % memory

        z[acc], f[acc], g[acc] = z_new[loc], f_new[loc], g_new[loc]
        gnorm[acc] = np.linalg.norm(g_new[loc], axis=1)
        iters[active] += 1
        if divergence_bound is not None:
            diverged |= np.linalg.norm(z, axis=1) > divergence_bound
    return z, gnorm, iters, diverged


def _newton_polish(fg, hess, z, g, gnorm, tol, steps):
    for _ in range(steps):
        rows = np.flatnonzero(gnorm > tol)
        if rows.size == 0:
            break
        try:
            dz = np.linalg.solve(hess(z[rows], rows), g[rows][..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        zt = z[rows] - dz
        _, gt = fg(zt, rows)
        gn = np.linalg.norm(gt, axis=1)
        better = gn < gnorm[rows]
        keep = rows[better]
        z[keep], g[keep], gnorm[keep] = zt[better], gt[better], gn[better]
    return z, gnorm


def _rowwise_t(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.full(n, float(t)) if t.ndim == 0 else t.reshape(n)


def _as_rows(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _squeeze(res: InversionResult, single: bool) -> InversionResult:
    if not single:
        return res
    return InversionResult(res.z0[0], res.grad_norm_final[0], res.iterations[0], res.converged[0])


def invert_flow_map(psi, x_t, t, opts: SolverOptions | None = None,
                    z_init=None) -> InversionResult:
    """Recover z0 with (1-t) z0 + t grad psi(z0) = x_t.

    Minimizes F(z) = (1-t)/2 |z|^2 + t psi(z) - <x_t, z>, which is
    (1-t)-strongly convex, starting from ``z_init`` (default ``x_t``).
    """
    opts = opts or SolverOptions()
    x_t, single = _as_rows(x_t)
    n, d = x_t.shape
    t = _rowwise_t(t, n)
    if np.any(t < 0) or np.any(t > 1.0 - opts.eps):
        raise ValueError(f"times must lie in [0, 1 - eps] with eps={opts.eps}")
    if d != psi.dim:
        raise ValueError(f"dimension mismatch: potential has D={psi.dim}, input has {d}")

    def fg(z, idx):
        tt = t[idx, None]
        val, gpsi = psi.value_and_grad(z)
        xi = x_t[idx]
        f = 0.5 * (1 - tt[:, 0]) * np.einsum("ij,ij->i", z, z) + tt[:, 0] * val - np.einsum("ij,ij->i", xi, z)
        return f, (1 - tt) * z + tt * gpsi - xi

    start = x_t if z_init is None else np.asarray(z_init, dtype=np.float64).reshape(n, d)
    tol = opts.tolerance(d)
    z, gn, it, _ = lbfgs_batched(fg, start, tol, opts.max_iter, opts.memory, opts.max_backtracks)
    if opts.newton_polish:
        def hess(z, idx):
            tt = t[idx, None, None]
            return (1 - tt) * np.eye(d) + tt * hessian(psi, z)
        _, g = fg(z, np.arange(n))
        z, gn = _newton_polish(fg, hess, z, g, gn, tol, opts.newton_polish)
    return _squeeze(InversionResult(z, gn, it, gn <= tol), single)


def conjugate(psi, y, opts: SolverOptions | None = None, z_init=None) -> ConjugateResult:
    """Convex conjugate psi_bar(y) = sup_x <y, x> - psi(x) and its maximizer."""
    opts = opts or SolverOptions()
    y, single = _as_rows(y)
    n, d = y.shape
    if d != psi.dim:
        raise ValueError(f"dimension mismatch: potential has D={psi.dim}, input has {d}")

    def fg(z, idx):
        val, gpsi = psi.value_and_grad(z)
        yi = y[idx]
        return val - np.einsum("ij,ij->i", yi, z), gpsi - yi

    start = y if z_init is None else np.asarray(z_init, dtype=np.float64).reshape(n, d)
    tol = opts.tolerance(d)
    z, gn, _, div = lbfgs_batched(fg, start, tol, opts.max_iter, opts.memory,
                                  opts.max_backtracks, opts.divergence_bound)
    if opts.newton_polish:
        _, g = fg(z, np.arange(n))
        z, gn = _newton_polish(fg, lambda z, idx: hessian(psi, z), z, g, gn, tol, opts.newton_polish)
    value = np.einsum("ij,ij->i", y, z) - psi.value(z)
    value = np.where(div, np.inf, value)
    conv = (gn <= tol) & ~div
    if single:
        return ConjugateResult(value[0], z[0], conv[0], div[0])
    return ConjugateResult(value, z, conv, div)


class AmortizerNet:
    """Learned initializer A_phi(x_t, t) ~ z0 for the inversion subproblem."""

    def __init__(self, dim: int, hidden: Sequence[int] = (64, 64), lr: float = 1e-3,
                 rng: np.random.Generator | None = None, activation: str = "relu"):
        self.dim = dim
        self.net = MLP(dim + 1, dim, hidden, activation)
        if rng is not None:
            self.net.init_params(rng)
        self.opt = Adam(lr=lr)

    def __call__(self, x_t, t) -> np.ndarray:
        x_t, single = _as_rows(x_t)
        out = self.net(np.column_stack([x_t, _rowwise_t(t, x_t.shape[0])]))
        return out[0] if single else out

    def loss_and_grad(self, x_t, t, z0):
        x_t = np.atleast_2d(x_t)
        inp = np.column_stack([x_t, _rowwise_t(t, x_t.shape[0])])
        pred, cache = self.net.forward(inp, cache=True)
        r = pred - np.atleast_2d(z0)
        n = r.shape[0]
        loss = float(np.einsum("ij,ij->", r, r) / n)
        return loss, self.net.backward(cache, 2.0 * r / n)


def train_amortizer(amortizer: AmortizerNet, x_t, t, z0) -> float:
    """One optimizer step on the mean squared error to detached solutions z0."""
    loss, grad = amortizer.loss_and_grad(x_t, t, z0)
    amortizer.opt.step(amortizer.net.theta, grad)
    return loss


def amortized_invert(psi, amortizer: AmortizerNet, x_t, t,
                     opts: SolverOptions | None = None) -> InversionResult:
    return invert_flow_map(psi, x_t, t, opts, z_init=amortizer(x_t, t))
