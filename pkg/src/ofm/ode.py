"""Batched explicit Runge-Kutta integrators for dz/dt = u(t, z) on [0, 1]."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

Field = Callable[[float, np.ndarray], np.ndarray]

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


class IntegrationError(RuntimeError):
    pass


@dataclass
class OdeOptions:
    """``rk4`` uses ``steps`` fixed steps; ``dopri5`` adapts to atol/rtol."""

    method: str = "dopri5"
    steps: int = 100
    atol: float = 1e-5
    rtol: float = 1e-5
    max_steps: int = 100_000
    min_step: float = 1e-12

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ValueError(f"unknown ODE method {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        for name in ("atol", "rtol"):
            val = getattr(self, name)
            if not 1e-8 <= val <= 1e-3:
                raise ValueError(f"{name}={val} outside [1e-8, 1e-3]")


@dataclass
class OdeSolution:
    final: np.ndarray
    times: np.ndarray          # requested output times
    states: np.ndarray         # (len(times), B, D)
    n_steps: int
    n_rejected: int = 0


def _rk4(u: Field, z, t0, t1, n):
    h = (t1 - t0) / n
    t = t0
    for _ in range(n):
        k1 = u(t, z)
        k2 = u(t + h / 2, z + h / 2 * k1)
        k3 = u(t + h / 2, z + h / 2 * k2)
        k4 = u(t + h, z + h * k3)
        z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return z


def _initial_step(u, t, z, f0, atol, rtol):
    """Starting step heuristic from Hairer, Norsett & Wanner (II.4)."""
    scale = atol + rtol * np.abs(z)
    d0 = np.sqrt(np.mean((z / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = u(t + h0, z + h0 * f0)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def _dopri5(u: Field, z, t0, t1, opts: OdeOptions, h=None):
    """Integrate all rows with one shared adaptive step; returns (z, steps, rejected, h)."""
    t = t0
    k = [None] * 7
    k[0] = u(t, z)
    if h is None:
        h = _initial_step(u, t, z, k[0], opts.atol, opts.rtol)
    n_steps = n_rej = 0
    while t < t1 - 1e-15:
        if n_steps + n_rej >= opts.max_steps:
            raise IntegrationError(f"exceeded {opts.max_steps} steps at t={t:.6g}")
        if h < opts.min_step:
            raise IntegrationError(f"step size underflow (h={h:.3g}) at t={t:.6g}")
        h = min(h, t1 - t)
        for s in range(1, 7):
            zs = z + h * sum(a * k[j] for j, a in enumerate(_A[s]) if a != 0.0)
            k[s] = u(t + _C[s] * h, zs)
        z_new = zs  # stage 7 evaluates at the 5th-order solution (FSAL)
        err = h * sum(e * k[j] for j, e in enumerate(_E) if e != 0.0)
        scale = opts.atol + opts.rtol * np.maximum(np.abs(z), np.abs(z_new))
        err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if not np.isfinite(err_norm):
            raise IntegrationError(f"non-finite state at t={t:.6g}")
        if err_norm <= 1.0:
            t += h
            z = z_new
            k[0] = k[6]
            n_steps += 1
            factor = 5.0 if err_norm == 0 else min(5.0, 0.9 * err_norm ** -0.2)
        else:
            n_rej += 1
            factor = max(0.2, 0.9 * err_norm ** -0.2)
        h *= factor
    return z, n_steps, n_rej, h


def integrate(u: Field, x0, opts: OdeOptions | None = None, t_eval=None) -> OdeSolution:
    """Solve dz/dt = u(t, z) from t=0 to 1 for a batch of initial points."""
    opts = opts or OdeOptions()
    z = np.array(np.atleast_2d(x0), dtype=np.float64)
    t_eval = np.array([0.0, 1.0]) if t_eval is None else np.asarray(t_eval, dtype=np.float64)
    if np.any(np.diff(t_eval) < 0) or t_eval[0] < 0 or t_eval[-1] > 1:
        raise ValueError("t_eval must be sorted within [0, 1]")
    states = []
    t_prev, n_steps, n_rej, h = 0.0, 0, 0, None
    for te in t_eval:
        if te > t_prev:
            if opts.method == "rk4":
                n = max(1, int(round(opts.steps * (te - t_prev))))
                z = _rk4(u, z, t_prev, te, n)
                n_steps += n
            else:
                z, ns, nr, h = _dopri5(u, z, t_prev, te, opts, h)
                n_steps, n_rej = n_steps + ns, n_rej + nr
            t_prev = te
        states.append(z.copy())
    if t_prev < 1.0:
        if opts.method == "rk4":
            z = _rk4(u, z, t_prev, 1.0, max(1, int(round(opts.steps * (1 - t_prev)))))
        else:
            z, ns, nr, h = _dopri5(u, z, t_prev, 1.0, opts, h)
            n_steps, n_rej = n_steps + ns, n_rej + nr
    return OdeSolution(z, t_eval, np.stack(states), n_steps, n_rej)
