"""Samplers for source/target distributions and transport plans between them."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.optimize import linear_sum_assignment

from .potential import potential_from_dict

MAX_ASSIGNMENT_SIZE = 512
PLAN_KINDS = ("independent", "minibatch", "antiminibatch")


@dataclass
class DistributionSpec:
    """A sampleable distribution.

    kinds:
      ``gaussian``           mean, cov
      ``gaussian-mixture``   means (K, D), covs (K, D, D), weights (K,)
      ``pushforward``        base spec pushed through grad of ``potential``
    """

    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        p = self.params
        if self.kind == "gaussian":
            p["mean"] = np.atleast_1d(np.asarray(p["mean"], dtype=np.float64))
            d = p["mean"].size
            p["cov"] = np.asarray(p.get("cov", np.eye(d)), dtype=np.float64).reshape(d, d)
            p["chol"] = _cholesky(p["cov"])
        elif self.kind == "gaussian-mixture":
            p["means"] = np.atleast_2d(np.asarray(p["means"], dtype=np.float64))
            k, d = p["means"].shape
            p["covs"] = np.asarray(p["covs"], dtype=np.float64).reshape(k, d, d)
            w = np.asarray(p.get("weights", np.full(k, 1.0 / k)), dtype=np.float64)
            if w.shape != (k,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("mixture weights must be nonnegative and sum to 1")
            p["weights"] = w
            p["chols"] = np.stack([_cholesky(c) for c in p["covs"]])
        elif self.kind == "pushforward":
            if not isinstance(p["base"], DistributionSpec):
                p["base"] = DistributionSpec.from_dict(p["base"])
            if isinstance(p["potential"], dict):
                p["potential"] = potential_from_dict(p["potential"])
        else:
            raise ValueError(f"unknown distribution kind {self.kind!r}")

    @property
    def dim(self) -> int:
        p = self.params
        if self.kind == "gaussian":
            return p["mean"].size
        if self.kind == "gaussian-mixture":
            return p["means"].shape[1]
        return p["base"].dim

    def to_dict(self) -> dict:
        p = self.params
        if self.kind == "gaussian":
            return {"kind": "gaussian", "mean": p["mean"].tolist(), "cov": p["cov"].tolist()}
        if self.kind == "gaussian-mixture":
            return {"kind": "gaussian-mixture", "means": p["means"].tolist(),
                    "covs": p["covs"].tolist(), "weights": p["weights"].tolist()}
        return {"kind": "pushforward", "base": p["base"].to_dict(),
                "potential": p["potential"].to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "DistributionSpec":
        data = dict(data)
        kind = data.pop("kind")
        if kind == "eight-gaussians":
            return eight_gaussians(**data)
        if kind == "standard-gaussian":
            return standard_gaussian(**data)
        return cls(kind, data)


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("covariance must be positive definite") from None


def standard_gaussian(dim: int) -> DistributionSpec:
    return DistributionSpec("gaussian", {"mean": np.zeros(dim), "cov": np.eye(dim)})


def eight_gaussians(radius: float = 4.0, sigma: float = 0.3) -> DistributionSpec:
    """Eight equal-weight isotropic components evenly spaced on a circle."""
    angles = 2 * np.pi * np.arange(8) / 8
    means = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    covs = np.repeat((sigma ** 2 * np.eye(2))[None], 8, axis=0)
    return DistributionSpec("gaussian-mixture", {"means": means, "covs": covs,
                                                 "weights": np.full(8, 1 / 8)})


def sample(dist: DistributionSpec, n: int, rng: np.random.Generator,
           return_labels: bool = False):
    """Draw ``n`` i.i.d. rows; mixtures can also report component labels."""
    if n < 1:
        raise ValueError("n must be >= 1")
    p = dist.params
    labels = None
    if dist.kind == "gaussian":
        x = p["mean"] + rng.standard_normal((n, dist.dim)) @ p["chol"].T
    elif dist.kind == "gaussian-mixture":
        labels = rng.choice(len(p["weights"]), size=n, p=p["weights"])
        eps = rng.standard_normal((n, dist.dim))
        x = p["means"][labels] + np.einsum("nij,nj->ni", p["chols"][labels], eps)
    else:
        x = p["potential"].grad(sample(p["base"], n, rng))
    return (x, labels) if return_labels else x


@dataclass
class PairedBatch:
    x0: np.ndarray
    x1: np.ndarray
    tag: str

    def __post_init__(self):
        if self.x0.shape != self.x1.shape:
            raise ValueError(f"paired rows must match: {self.x0.shape} vs {self.x1.shape}")

    def __len__(self) -> int:
        return self.x0.shape[0]

    def interpolate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        return (1 - t) * self.x0 + t * self.x1

    def cost(self) -> np.ndarray:
        """Per-pair squared distance |x1 - x0|^2."""
        d = self.x1 - self.x0
        return np.einsum("ij,ij->i", d, d)


def pair_independent(X0, X1) -> PairedBatch:
    X0, X1 = np.asarray(X0, dtype=np.float64), np.asarray(X1, dtype=np.float64)
    if len(X0) != len(X1):
        raise ValueError("batch sizes differ")
    return PairedBatch(X0, X1, "independent")


def assignment(X0, X1, sign: int = 1) -> np.ndarray:
    """Permutation ``perm`` minimizing sum_i sign * |X0[i] - X1[perm[i]]|^2."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    X0, X1 = np.asarray(X0, dtype=np.float64), np.asarray(X1, dtype=np.float64)
    if len(X0) != len(X1):
        raise ValueError("batch sizes differ")
    if len(X0) > MAX_ASSIGNMENT_SIZE:
        raise ValueError(f"assignment batch limited to {MAX_ASSIGNMENT_SIZE} rows")
    cost = ((X0[:, None, :] - X1[None, :, :]) ** 2).sum(-1)
    rows, cols = linear_sum_assignment(sign * cost)
    perm = np.empty(len(X0), dtype=int)
    perm[rows] = cols
    return perm


def pair_minibatch_ot(X0, X1, sign: int = 1) -> PairedBatch:
    perm = assignment(X0, X1, sign)
    tag = "minibatch" if sign == 1 else "antiminibatch"
    return PairedBatch(np.asarray(X0, dtype=np.float64), np.asarray(X1, dtype=np.float64)[perm], tag)


@dataclass
class PlanSampler:
    """Draws fresh paired batches from p0 x p1, optionally re-paired by
    exact (anti-)minibatch OT on chunks of ``mb_size`` rows."""

    p0: DistributionSpec
    p1: DistributionSpec
    kind: str = "independent"
    mb_size: int = 64

    def __post_init__(self):
        if self.kind not in PLAN_KINDS:
            raise ValueError(f"unknown plan kind {self.kind!r}; expected one of {PLAN_KINDS}")
        if self.p0.dim != self.p1.dim:
            raise ValueError("p0 and p1 dimensions differ")

    def sample(self, n: int, rng: np.random.Generator) -> PairedBatch:
        X0 = sample(self.p0, n, rng)
        X1 = sample(self.p1, n, rng)
        return self.pair(X0, X1)

    def pair(self, X0, X1) -> PairedBatch:
        if self.kind == "independent":
            return pair_independent(X0, X1)
        sign = 1 if self.kind == "minibatch" else -1
        X1 = X1.copy()
        for start in range(0, len(X0), self.mb_size):
            sl = slice(start, start + self.mb_size)
            X1[sl] = X1[sl][assignment(X0[sl], X1[sl], sign)]
        return PairedBatch(X0, X1, self.kind)
