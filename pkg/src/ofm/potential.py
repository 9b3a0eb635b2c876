"""Convex potentials with exact derivative oracles.

Every potential works on batches: ``x`` has shape ``(B, D)`` (a single
``(D,)`` vector is promoted and the result squeezed back).  The three
implementations share a duck-typed surface::

    value(x)             -> (B,)
    value_and_grad(x)    -> (B,), (B, D)
    grad(x)              -> (B, D)
    hvp(x, v)            -> (B, D)

``ScalarNet`` additionally exposes a flat parameter vector ``theta`` and the
parameter gradient of the directional derivative ``<v, grad f(x)>``, which is
what the flow-matching losses differentiate.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

CHECKPOINT_FORMAT = 1
DENSE_HESSIAN_LIMIT = 512


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ValueError(f"expected a vector or a (B, D) batch, got shape {x.shape}")
    return x, False


def _check_dim(x: np.ndarray, dim: int) -> None:
    if x.shape[-1] != dim:
        raise ValueError(f"dimension mismatch: potential has D={dim}, input has {x.shape[-1]}")


# ----------------------------------------------------------------------------
# activations: value, first and second derivative
# ----------------------------------------------------------------------------

def _softplus(h):
    s = expit(h)
    return np.logaddexp(0.0, h), s, s * (1.0 - s)


def _celu(h):
    # alpha = 1; second derivative is taken as 0 on the linear branch
    e = np.exp(np.minimum(h, 0.0))
    pos = h > 0
    return np.where(pos, h, e - 1.0), np.where(pos, 1.0, e), np.where(pos, 0.0, e)


def _relu(h):
    pos = h > 0
    return np.where(pos, h, 0.0), pos.astype(np.float64), np.zeros_like(h)


ACTIVATIONS = {"softplus": _softplus, "celu": _celu, "relu": _relu}
CONVEX_ACTIVATIONS = ("softplus", "celu")


# ----------------------------------------------------------------------------
# analytic potentials
# ----------------------------------------------------------------------------

@dataclass
class QuadraticPotential:
    """Psi(x) = 0.5 x^T A x + b^T x + c with A symmetric PSD."""

    A: np.ndarray
    b: np.ndarray | None = None
    c: float = 0.0

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        d = self.A.shape[0]
        if self.A.shape != (d, d):
            raise ValueError("A must be square")
        if not np.allclose(self.A, self.A.T, atol=1e-12, rtol=0):
            raise ValueError("A must be symmetric")
        if np.linalg.eigvalsh(self.A).min() < -1e-10:
            raise ValueError("A must be positive semidefinite")
        self.b = np.zeros(d) if self.b is None else np.asarray(self.b, dtype=np.float64).reshape(d)
        self.c = float(self.c)

    @classmethod
    def identity(cls, dim: int) -> "QuadraticPotential":
        return cls(np.eye(dim))

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def value_and_grad(self, x):
        x, single = _as_batch(x)
        _check_dim(x, self.dim)
        g = x @ self.A + self.b
        val = 0.5 * np.einsum("bi,bi->b", x @ self.A, x) + x @ self.b + self.c
        return (val[0], g[0]) if single else (val, g)

    def value(self, x):
        return self.value_and_grad(x)[0]

    def __call__(self, x):
        return self.value(x)

    def grad(self, x):
        return self.value_and_grad(x)[1]

    def hvp(self, x, v):
        x, single = _as_batch(x)
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape)
        _check_dim(x, self.dim)
        out = v @ self.A
        return out[0] if single else out

    def conjugate_value(self, y):
        """Closed form 0.5 (y-b)^T A^{-1} (y-b) - c; requires A positive definite."""
        y, single = _as_batch(y)
        r = y - self.b
        s = np.linalg.solve(self.A, r.T).T
        val = 0.5 * np.einsum("bi,bi->b", r, s) - self.c
        return val[0] if single else val

    def to_dict(self) -> dict:
        return {"kind": "quadratic", "A": self.A.tolist(), "b": self.b.tolist(), "c": self.c}


@dataclass
class SoftplusRidgePotential:
    """Psi(x) = 0.5 |x|^2 + sum_k a_k softplus(<w_k, x> + c_k), a_k >= 0.

    Convex by composition; used as a manufactured Brenier potential.
    """

    weights: np.ndarray      # (K, D)
    offsets: np.ndarray      # (K,)
    scales: np.ndarray       # (K,), nonnegative

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        if np.any(self.scales < 0):
            raise ValueError("ridge scales must be nonnegative")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def value_and_grad(self, x):
        x, single = _as_batch(x)
        _check_dim(x, self.dim)
        h = x @ self.weights.T + self.offsets
        sp, s, _ = _softplus(h)
        val = 0.5 * np.einsum("bi,bi->b", x, x) + sp @ self.scales
        g = x + (s * self.scales) @ self.weights
        return (val[0], g[0]) if single else (val, g)

    def value(self, x):
        return self.value_and_grad(x)[0]

    def __call__(self, x):
        return self.value(x)

    def grad(self, x):
        return self.value_and_grad(x)[1]

    def hvp(self, x, v):
        x, single = _as_batch(x)
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape)
        _check_dim(x, self.dim)
        h = x @ self.weights.T + self.offsets
        _, _, s2 = _softplus(h)
        out = v + ((v @ self.weights.T) * s2 * self.scales) @ self.weights
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {"kind": "softplus-ridge", "weights": self.weights.tolist(),
                "offsets": self.offsets.tolist(), "scales": self.scales.tolist()}


# ----------------------------------------------------------------------------
# networks
# ----------------------------------------------------------------------------

class TangentState(NamedTuple):
    """Primal and tangent channel of the forward pass along a direction v."""

    h: list            # pre-activations per hidden layer
    z: list            # activations
    dh: list           # tangent of pre-activations
    dz: list           # tangent of activations
    s1: list           # activation first derivative at h
    s2: list           # activation second derivative at h


@dataclass
class ScalarNet:
    """Fully connected scalar network with optional input injection.

    Layer recursion (row-vector convention)::

        h_0 = x W_0^T + b_0
        h_l = z_{l-1} U_{l-1}^T + [x W_l^T] + b_l       l = 1..L-1
        z_l = act(h_l)
        f(x) = z_{L-1} . u + x . w + c + skip/2 |x|^2 + 1/2 |x Q^T|^2

    With ``convex=True`` the hidden-to-hidden weights U, the readout u and the
    skip coefficient are kept nonnegative by :meth:`project_convex`, which
    together with a convex non-decreasing activation makes f convex in x.
    """

    dim: int
    hidden: Sequence[int] = (128, 128, 64)
    activation: str = "celu"
    convex: bool = True
    inject: bool = True
    skip: bool = True
    quad_rank: int = 0
    theta: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.convex and self.activation not in CONVEX_ACTIVATIONS:
            raise ValueError(f"activation {self.activation!r} is not allowed in a convex network")
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.hidden:
            raise ValueError("at least one hidden layer is required")
        self._act = ACTIVATIONS[self.activation]
        self._layout = self._build_layout()
        size = sum(int(np.prod(s)) for _, s in self._layout)
        if self.theta is None:
            self.theta = np.zeros(size)
        else:
            self.theta = np.asarray(self.theta, dtype=np.float64).copy()
            if self.theta.shape != (size,):
                raise ValueError(f"theta has {self.theta.size} entries, layout needs {size}")
        self._bind()

    # -- parameter bookkeeping ---------------------------------------------

    def _build_layout(self):
        d, hs = self.dim, self.hidden
        layout = [("W0", (hs[0], d)), ("b0", (hs[0],))]
        for l in range(1, len(hs)):
            layout.append((f"U{l - 1}", (hs[l], hs[l - 1])))
            if self.inject:
                layout.append((f"W{l}", (hs[l], d)))
            layout.append((f"b{l}", (hs[l],)))
        layout += [("u", (hs[-1],)), ("w", (d,)), ("c", (1,))]
        if self.skip:
            layout.append(("skip", (1,)))
        if self.quad_rank:
            layout.append(("Q", (self.quad_rank, d)))
        return layout

    def _bind(self):
        self.p = {}
        off = 0
        for name, shape in self._layout:
            n = int(np.prod(shape))
            self.p[name] = self.theta[off:off + n].reshape(shape)
            off += n

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def constrained_names(self) -> list[str]:
        if not self.convex:
            return []
        names = [f"U{l}" for l in range(len(self.hidden) - 1)] + ["u"]
        return names + (["skip"] if self.skip else [])

    def slices(self) -> dict[str, slice]:
        out, off = {}, 0
        for name, shape in self._layout:
            n = int(np.prod(shape))
            out[name] = slice(off, off + n)
            off += n
        return out

    def set_theta(self, theta) -> None:
        self.theta[:] = theta

    def copy(self) -> "ScalarNet":
        return type(self)(**self.config(), theta=self.theta)

    def config(self) -> dict:
        return dict(dim=self.dim, hidden=list(self.hidden), activation=self.activation,
                    convex=self.convex, inject=self.inject, skip=self.skip,
                    quad_rank=self.quad_rank)

    def init_params(self, rng: np.random.Generator, skip_init: float = 1.0,
                    quad_scale: float = 0.1, readout_scale: float = 0.1) -> "ScalarNet":
        p = self.p
        d = self.dim
        for name, shape in self._layout:
            if name.startswith("W"):
                p[name][...] = rng.normal(0.0, 1.0 / np.sqrt(d), shape)
            elif name.startswith("U"):
                fan_in = shape[1]
                if self.convex:
                    p[name][...] = rng.uniform(0.0, 2.0 / fan_in, shape)
                else:
                    p[name][...] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape)
            elif name.startswith("b"):
                p[name][...] = rng.normal(0.0, 0.1, shape)
        h = self.hidden[-1]
        if self.convex:
            p["u"][...] = rng.uniform(0.0, readout_scale / h, h)
        else:
            p["u"][...] = rng.normal(0.0, 1.0 / np.sqrt(h), h)
        p["w"][...] = 0.0
        p["c"][...] = 0.0
        if self.skip:
            p["skip"][...] = skip_init
        if self.quad_rank:
            p["Q"][...] = rng.normal(0.0, quad_scale / np.sqrt(d), p["Q"].shape)
        return self

    def project_convex(self) -> None:
        for name in self.constrained_names:
            np.maximum(self.p[name], 0.0, out=self.p[name])

    # -- forward and derivatives --------------------------------------------

    def _forward(self, x, v=None) -> TangentState:
        p = self.p
        h_list, z_list, dh_list, dz_list, s1_list, s2_list = [], [], [], [], [], []
        z = dz = None
        for l in range(len(self.hidden)):
            if l == 0:
                h = x @ p["W0"].T + p["b0"]
                dh = None if v is None else v @ p["W0"].T
            else:
                U = p[f"U{l - 1}"]
                h = z @ U.T + p[f"b{l}"]
                dh = None if v is None else dz @ U.T
                if self.inject:
                    W = p[f"W{l}"]
                    h = h + x @ W.T
                    if v is not None:
                        dh = dh + v @ W.T
            z, s1, s2 = self._act(h)
            dz = None if v is None else s1 * dh
            h_list.append(h); z_list.append(z); s1_list.append(s1); s2_list.append(s2)
            dh_list.append(dh); dz_list.append(dz)
        return TangentState(h_list, z_list, dh_list, dz_list, s1_list, s2_list)

    def _quad_value(self, x):
        out = x @ self.p["w"] + self.p["c"][0]
        if self.skip:
            out = out + 0.5 * self.p["skip"][0] * np.einsum("bi,bi->b", x, x)
        if self.quad_rank:
            px = x @ self.p["Q"].T
            out = out + 0.5 * np.einsum("bi,bi->b", px, px)
        return out

    def _quad_grad(self, x):
        g = np.broadcast_to(self.p["w"], x.shape).copy()
        if self.skip:
            g += self.p["skip"][0] * x
        if self.quad_rank:
            g += (x @ self.p["Q"].T) @ self.p["Q"]
        return g

    def _quad_hvp(self, v):
        out = np.zeros_like(v)
        if self.skip:
            out += self.p["skip"][0] * v
        if self.quad_rank:
            out += (v @ self.p["Q"].T) @ self.p["Q"]
        return out

    def _reverse(self, st: TangentState, x, tangent: bool):
        """Reverse sweep for grad_x; with ``tangent`` also its forward tangent."""
        p = self.p
        L = len(self.hidden)
        delta = p["u"] * st.s1[-1]
        ddelta = p["u"] * st.s2[-1] * st.dh[-1] if tangent else None
        g = np.zeros_like(x)
        hv = np.zeros_like(x) if tangent else None
        for l in range(L - 1, -1, -1):
            if l == 0 or self.inject:
                W = p[f"W{l}"]
                g += delta @ W
                if tangent:
                    hv += ddelta @ W
            if l == 0:
                break
            U = p[f"U{l - 1}"]
            m = delta @ U
            if tangent:
                dm = ddelta @ U
                ddelta = dm * st.s1[l - 1] + m * st.s2[l - 1] * st.dh[l - 1]
            delta = m * st.s1[l - 1]
        return g, hv

    def value(self, x):
        x, single = _as_batch(x)
        _check_dim(x, self.dim)
        st = self._forward(x)
        val = st.z[-1] @ self.p["u"] + self._quad_value(x)
        return val[0] if single else val

    __call__ = value

    def value_and_grad(self, x):
        x, single = _as_batch(x)
        _check_dim(x, self.dim)
        st = self._forward(x)
        val = st.z[-1] @ self.p["u"] + self._quad_value(x)
        g, _ = self._reverse(st, x, tangent=False)
        g += self._quad_grad(x)
        return (val[0], g[0]) if single else (val, g)

    def grad(self, x):
        return self.value_and_grad(x)[1]

    def hvp(self, x, v):
        """Hessian-vector product, forward-over-reverse."""
        x, single = _as_batch(x)
        _check_dim(x, self.dim)
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape)
        st = self._forward(x, v)
        _, hv = self._reverse(st, x, tangent=True)
        hv += self._quad_hvp(v)
        return hv[0] if single else hv

    def directional(self, x, v):
        """<v, grad f(x)> per row, computed as the forward tangent of f."""
        x, _ = _as_batch(x)
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape)
        st = self._forward(x, v)
        return st.dz[-1] @ self.p["u"] + np.einsum("bi,bi->b", v, self._quad_grad(x))

    def param_grad_directional(self, x, v) -> np.ndarray:
        """d/dtheta of sum_i <v_i, grad_x f(x_i)> with x, v held constant.

        Reverse sweep over the forward-tangent pass.  Returns a flat vector
        aligned with ``theta``.
        """
        x, _ = _as_batch(x)
        _check_dim(x, self.dim)
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape)
        p = self.p
        st = self._forward(x, v)
        grads = {name: np.zeros(shape) for name, shape in self._layout}

        L = len(self.hidden)
        grads["u"] = st.dz[-1].sum(axis=0)
        grads["w"] = v.sum(axis=0)
        if self.skip:
            grads["skip"][0] = np.einsum("bi,bi->", x, v)
        if self.quad_rank:
            Q = p["Q"]
            grads["Q"] = (v @ Q.T).T @ x + (x @ Q.T).T @ v

        adz = np.broadcast_to(p["u"], st.dz[-1].shape)   # adjoint of dz_{L-1}
        az = np.zeros_like(st.z[-1])                      # adjoint of z_{L-1}
        for l in range(L - 1, -1, -1):
            adh = st.s1[l] * adz
            ah = st.s2[l] * st.dh[l] * adz + st.s1[l] * az
            if l == 0 or self.inject:
                grads[f"W{l}"] = adh.T @ v + ah.T @ x
            grads[f"b{l}"] = ah.sum(axis=0)
            if l == 0:
                break
            U = p[f"U{l - 1}"]
            grads[f"U{l - 1}"] = adh.T @ st.dz[l - 1] + ah.T @ st.z[l - 1]
            adz = adh @ U
            az = ah @ U
        return np.concatenate([grads[name].ravel() for name, _ in self._layout])

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {"kind": "scalar-net", "format_version": CHECKPOINT_FORMAT,
                **self.config(), "theta": self.theta.tolist()}


class IcnnPotential(ScalarNet):
    """Input-convex network potential (convex, input injection, quadratic skip)."""

    def __init__(self, dim: int, hidden: Sequence[int] = (128, 128, 64),
                 activation: str = "celu", quad_rank: int = 0, theta=None, **_ignored):
        super().__init__(dim=dim, hidden=hidden, activation=activation, convex=True,
                         inject=True, skip=True, quad_rank=quad_rank, theta=theta)

    def copy(self) -> "IcnnPotential":
        return IcnnPotential(self.dim, self.hidden, self.activation, self.quad_rank, theta=self.theta)

    def config(self) -> dict:
        return dict(dim=self.dim, hidden=list(self.hidden), activation=self.activation,
                    quad_rank=self.quad_rank)

    def to_dict(self) -> dict:
        return {"kind": "icnn", "format_version": CHECKPOINT_FORMAT,
                **self.config(), "theta": self.theta.tolist()}


def hessian(psi, x, max_dim: int = DENSE_HESSIAN_LIMIT) -> np.ndarray:
    """Dense Hessian from D Hessian-vector products, symmetrized."""
    x, single = _as_batch(x)
    d = x.shape[1]
    if d > max_dim:
        raise ValueError(f"dense Hessian limited to D <= {max_dim}, got {d}")
    H = np.empty((x.shape[0], d, d))
    for j in range(d):
        e = np.zeros_like(x)
        e[:, j] = 1.0
        H[:, :, j] = psi.hvp(x, e)
    H = 0.5 * (H + np.swapaxes(H, 1, 2))
    return H[0] if single else H


def potential_from_dict(data: dict):
    kind = data.get("kind")
    if kind == "quadratic":
        return QuadraticPotential(np.array(data["A"]), np.array(data["b"]), data.get("c", 0.0))
    if kind == "softplus-ridge":
        return SoftplusRidgePotential(np.array(data["weights"]), np.array(data["offsets"]),
                                      np.array(data["scales"]))
    if kind in ("icnn", "scalar-net"):
        version = data.get("format_version")
        if version != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format version {version!r}")
        theta = np.array(data["theta"], dtype=np.float64)
        if kind == "icnn":
            return IcnnPotential(data["dim"], data["hidden"], data["activation"],
                                 data.get("quad_rank", 0), theta=theta)
        cfg = {k: data[k] for k in ("dim", "hidden", "activation", "convex", "inject", "skip", "quad_rank")}
        return ScalarNet(**cfg, theta=theta)
    raise ValueError(f"unknown potential kind {kind!r}")


def save_potential(psi, path) -> None:
    Path(path).write_text(json.dumps(psi.to_dict()))


def load_potential(path):
    return potential_from_dict(json.loads(Path(path).read_text()))
