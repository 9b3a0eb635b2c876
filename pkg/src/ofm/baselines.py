"""Flow-matching baselines: vanilla FM, OT-CFM, Rectified Flow and its
potential-field variant, plus trajectory straightness diagnostics."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .benchmark import BenchmarkTask
from .nets import MLP
from .ode import IntegrationError, OdeOptions, integrate
from .optim import make_optimizer
from .plans import PairedBatch, PlanSampler, sample
from .potential import ScalarNet

log = logging.getLogger(__name__)

FIELD_KINDS = ("mlp", "potential")


class TimeField:
    """u(t, x) = MLP([x, t]) with ReLU hidden layers."""

    kind = "mlp"

    def __init__(self, dim: int, hidden: Sequence[int] = (128, 128, 64),
                 activation: str = "relu", theta=None):
        self.dim = int(dim)
        self.net = MLP(dim + 1, dim, hidden, activation, theta=theta)

    @property
    def theta(self) -> np.ndarray:
        return self.net.theta

    def init_params(self, rng: np.random.Generator) -> "TimeField":
        self.net.init_params(rng)
        return self

    def _inputs(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (x.shape[0],))
        return np.column_stack([x, t])

    def __call__(self, t, x) -> np.ndarray:
        return self.net(self._inputs(t, x))

    def loss_and_grad(self, t, x, target):
        out, cache = self.net.forward(self._inputs(t, x), cache=True)
        r = out - target
        n = r.shape[0]
        return float(np.einsum("ij,ij->", r, r) / n), self.net.backward(cache, 2.0 * r / n)

    def copy(self) -> "TimeField":
        return TimeField(self.dim, self.net.hidden, self.net.activation, theta=self.net.theta)

    def to_dict(self) -> dict:
        return {"kind": "time-field", "format_version": 1, "dim": self.dim,
                "net": self.net.to_dict()}


class ScalarTimeField:
    """u(t, x) = grad_x f([x, t]) for a scalar network f; curl-free in x."""

    kind = "potential"

    def __init__(self, dim: int, hidden: Sequence[int] = (128, 128, 64),
                 activation: str = "softplus", theta=None):
        self.dim = int(dim)
        self.net = ScalarNet(dim + 1, hidden, activation, convex=False, inject=False,
                             skip=False, theta=theta)

    @property
    def theta(self) -> np.ndarray:
        return self.net.theta

    def init_params(self, rng: np.random.Generator) -> "ScalarTimeField":
        self.net.init_params(rng)
        return self

    def _inputs(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (x.shape[0],))
        return np.column_stack([x, t])

    def scalar(self, t, x) -> np.ndarray:
        return self.net.value(self._inputs(t, x))

    def __call__(self, t, x) -> np.ndarray:
        return self.net.grad(self._inputs(t, x))[:, :self.dim]

    def loss_and_grad(self, t, x, target):
        inp = self._inputs(t, x)
        r = self.net.grad(inp)[:, :self.dim] - target
        n = r.shape[0]
        v = np.zeros_like(inp)
        v[:, :self.dim] = 2.0 * r / n
        return float(np.einsum("ij,ij->", r, r) / n), self.net.param_grad_directional(inp, v)

    def copy(self) -> "ScalarTimeField":
        return ScalarTimeField(self.dim, self.net.hidden, self.net.activation, theta=self.net.theta)

    def to_dict(self) -> dict:
        return {"kind": "scalar-time-field", "format_version": 1, "dim": self.dim,
                "net": self.net.to_dict()}


def field_from_dict(data: dict):
    net = data["net"]
    if data["kind"] == "time-field":
        return TimeField(data["dim"], net["hidden"], net["activation"], theta=np.array(net["theta"]))
    if data["kind"] == "scalar-time-field":
        return ScalarTimeField(data["dim"], net["hidden"], net["activation"],
                               theta=np.array(net["theta"]))
    raise ValueError(f"unknown field kind {data['kind']!r}")


def make_field(dim: int, kind: str, hidden, rng: np.random.Generator):
    if kind == "mlp":
        return TimeField(dim, hidden).init_params(rng)
    if kind == "potential":
        return ScalarTimeField(dim, hidden).init_params(rng)
    raise ValueError(f"unknown field kind {kind!r}; expected one of {FIELD_KINDS}")


def fm_loss(u, batch: PairedBatch, times) -> float:
    """Mean |u_t(x_t) - (x1 - x0)|^2."""
    r = u(times, batch.interpolate(times)) - (batch.x1 - batch.x0)
    return float(np.mean(np.einsum("ij,ij->i", r, r)))


@dataclass
class FmConfig:
    iterations: int = 2000
    batch_size: int = 1024
    lr: float = 1e-3
    optimizer: str = "rmsprop"
    plan: str = "independent"
    mb_size: int = 64
    field_kind: str = "mlp"
    hidden: tuple = (128, 128, 64)
    seed: int = 0
    log_interval: int = 50
    rounds: int = 0
    pool_size: int = 8192
    warm_start: bool = True
    ode: OdeOptions = field(default_factory=OdeOptions)

    def __post_init__(self):
        if isinstance(self.ode, dict):
            self.ode = OdeOptions(**self.ode)
        self.hidden = tuple(self.hidden)
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.field_kind not in FIELD_KINDS:
            raise ValueError(f"unknown field kind {self.field_kind!r}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FmConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown fm config field(s): {sorted(unknown)}")
        return cls(**data)


@dataclass
class FmReport:
    iteration: int
    loss: float
    round: int = 0


def _fit(u, config: FmConfig, draw, rng, round_idx: int = 0, trace=None, timings=None):
    opt = make_optimizer(config.optimizer, config.lr)
    start = time.perf_counter()
    for it in range(1, config.iterations + 1):
        batch = draw(config.batch_size)
        times = rng.uniform(0.0, 1.0, config.batch_size)
        loss, grad = u.loss_and_grad(times, batch.interpolate(times), batch.x1 - batch.x0)
        opt.step(u.theta, grad)
        if trace is not None and (it % config.log_interval == 0 or it == config.iterations):
            trace.append(FmReport(it, loss, round_idx))
            timings.append((it, time.perf_counter() - start))
    return u


def train_fm(config: FmConfig, task: BenchmarkTask, u=None, trace=None, timings=None):
    """Regress a time-dependent field onto x1 - x0 over the configured plan.

    With ``plan='minibatch'`` this is OT-CFM; the code path is identical.
    """
    rng = np.random.default_rng(config.seed)
    if u is None:
        u = make_field(task.dim, config.field_kind, config.hidden, rng)
    sampler = PlanSampler(task.p0, task.p1, config.plan, config.mb_size)
    return _fit(u, config, lambda n: sampler.sample(n, rng), rng, 0, trace, timings)


@dataclass
class RectifyResult:
    field: object
    pairs: PairedBatch
    cost_mean: float
    cost_se: float
    excluded: int


def push_pairs(u, x0, opts: OdeOptions | None = None) -> tuple[PairedBatch, int]:
    """(x0, phi_1(x0)) pairs; rows whose integration fails are dropped and counted."""
    try:
        x1 = integrate(u, x0, opts).final
    except IntegrationError:
        # the shared step collapsed; retry row by row to isolate the culprits
        x1 = np.vstack([_endpoint_or_nan(u, row, opts) for row in x0])
    ok = np.all(np.isfinite(x1), axis=1)
    return PairedBatch(x0[ok], x1[ok], "rectified"), int(np.count_nonzero(~ok))


def _endpoint_or_nan(u, row, opts):
    try:
        return integrate(u, row[None], opts).final
    except IntegrationError:
        return np.full((1, row.size), np.nan)


def transport_cost(batch: PairedBatch) -> tuple[float, float]:
    """Mean of |x1 - x0|^2 / 2 and its standard error."""
    c = 0.5 * batch.cost()
    return float(c.mean()), float(c.std(ddof=1) / np.sqrt(len(c)))


def rectify_round(u_prev, config: FmConfig, task: BenchmarkTask, round_idx: int = 1,
                  trace=None, timings=None) -> RectifyResult:
    """Couple fresh p0 samples with their endpoints under ``u_prev`` and fit a
    field to that coupling, starting from ``u_prev`` unless ``warm_start`` is off."""
    rng = np.random.default_rng([config.seed, round_idx])
    x0 = sample(task.p0, config.pool_size, rng)
    pairs, excluded = push_pairs(u_prev, x0, config.ode)
    if excluded:
        log.warning("round %d: %d integrations failed and were excluded", round_idx, excluded)
    if config.warm_start:
        u = u_prev.copy()
    else:
        u = make_field(task.dim, config.field_kind, config.hidden, rng)

    def draw(n):
        idx = rng.integers(0, len(pairs), n)
        return PairedBatch(pairs.x0[idx], pairs.x1[idx], "rectified")

    _fit(u, config, draw, rng, round_idx, trace, timings)
    mean, se = transport_cost(pairs)
    return RectifyResult(u, pairs, mean, se, excluded)


def train_rectified(config: FmConfig, task: BenchmarkTask, trace=None, timings=None):
    """Initial FM fit followed by ``config.rounds`` rectification rounds."""
    u = train_fm(config, task, trace=trace, timings=timings)
    results = []
    for k in range(1, config.rounds + 1):
        res = rectify_round(u, config, task, k, trace, timings)
        results.append(res)
        u = res.field
    return u, results


def field_map(u, opts: OdeOptions | None = None):
    """x0 -> phi_1(x0) by numerical integration."""
    return lambda x0: integrate(u, x0, opts).final


STRAIGHTNESS_TIMES = np.linspace(0.0, 1.0, 16)


def straightness(u, x0, opts: OdeOptions | None = None, min_chord: float = 1e-9,
                 return_terms: bool = False):
    """Mean over samples and 16 uniform times of
    |z_t - ((1-t) z_0 + t z_1)|^2 / |z_1 - z_0|^2."""
    x0 = np.atleast_2d(x0)
    sol = integrate(u, x0, opts, t_eval=STRAIGHTNESS_TIMES)
    z = sol.states
    z0, z1 = z[0], z[-1]
    t = STRAIGHTNESS_TIMES[:, None, None]
    dev = np.sum((z - ((1 - t) * z0 + t * z1)) ** 2, axis=2).mean(axis=0)
    chord = np.sum((z1 - z0) ** 2, axis=1)
    keep = chord > min_chord
    terms = dev[keep] / chord[keep]
    return terms if return_terms else float(terms.mean())
