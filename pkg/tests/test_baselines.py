import numpy as np
import pytest
from numpy.testing import assert_allclose

from ofm.baselines import (FmConfig, ScalarTimeField, TimeField, field_from_dict, field_map,
                           fm_loss, push_pairs, rectify_round, straightness, train_fm,
                           transport_cost)
from ofm.benchmark import gaussian_task, make_gaussian_task
from ofm.ode import OdeOptions
from ofm.plans import PairedBatch, PlanSampler, sample
from ofm.potential import IcnnPotential
from ofm.trainer import OfmField

FINE = OdeOptions(atol=1e-8, rtol=1e-8)


class ConstantField:
    def __init__(self, c):
        self.c = np.asarray(c, dtype=float)

    def __call__(self, t, x):
        return np.broadcast_to(self.c, np.shape(np.atleast_2d(x))).copy()


def fd_param_grad(field, t, x, target, h=1e-6):
    g = np.zeros_like(field.theta)
    for k in range(g.size):
        field.theta[k] += h
        up = field.loss_and_grad(t, x, target)[0]
        field.theta[k] -= 2 * h
        down = field.loss_and_grad(t, x, target)[0]
        field.theta[k] += h
        g[k] = (up - down) / (2 * h)
    return g


class TestFmLoss:
    def test_zero_field(self, rng):
        x0, x1 = rng.standard_normal((2, 10, 2))
        zero = ConstantField([0.0, 0.0])
        t = rng.uniform(0, 1, 10)
        assert fm_loss(zero, PairedBatch(x0, x0.copy(), "independent"), t) == 0.0
        b = PairedBatch(x0, x1, "independent")
        assert fm_loss(zero, b, t) == pytest.approx(b.cost().mean())

    def test_constant_field_is_time_independent(self, rng):
        c = np.array([0.5, -1.0])
        b = PairedBatch(np.zeros((1, 2)), np.ones((1, 2)), "independent")
        vals = [fm_loss(ConstantField(c), b, np.array([t])) for t in (0.0, 0.3, 0.9)]
        assert_allclose(vals, np.sum((c - 1.0) ** 2))


class TestFields:
    @pytest.mark.parametrize("cls", [TimeField, ScalarTimeField])
    def test_parameter_gradient(self, cls, rng):
        field = cls(2, (6, 5)).init_params(rng)
        t = rng.uniform(0, 1, 7)
        x, target = rng.standard_normal((2, 7, 2))
        _, g = field.loss_and_grad(t, x, target)
        assert_allclose(g, fd_param_grad(field, t, x, target), atol=1e-7)

    def test_scalar_field_is_curl_free(self, rng):
        field = ScalarTimeField(3, (16, 16)).init_params(rng)
        x = rng.standard_normal((5, 3))
        h = 1e-5
        for t in (0.1, 0.7):
            J = np.stack([(field(t, x + h * e) - field(t, x - h * e)) / (2 * h) for e in np.eye(3)],
                         axis=2)
            assert np.max(np.abs(J - np.swapaxes(J, 1, 2))) < 1e-6

    def test_scalar_field_is_gradient_of_scalar(self, rng):
        field = ScalarTimeField(2, (8, 8)).init_params(rng)
        x = rng.standard_normal((4, 2))
        h = 1e-6
        fd = np.column_stack([(field.scalar(0.4, x + h * e) - field.scalar(0.4, x - h * e)) / (2 * h)
                              for e in np.eye(2)])
        assert_allclose(field(0.4, x), fd, atol=1e-8)

    @pytest.mark.parametrize("cls", [TimeField, ScalarTimeField])
    def test_dict_round_trip(self, cls, rng):
        field = cls(2, (4, 4)).init_params(rng)
        back = field_from_dict(field.to_dict())
        x = rng.standard_normal((3, 2))
        assert_allclose(back(0.3, x), field(0.3, x))


class TestTrainFm:
    def test_zero_iterations_leave_field_unchanged(self):
        task = make_gaussian_task(2, 0)
        cfg = FmConfig(iterations=0, hidden=(8,), seed=4)
        u = train_fm(cfg, task)
        ref = TimeField(2, (8,)).init_params(np.random.default_rng(4))
        assert_allclose(u.theta, ref.theta)

    def test_minibatch_plan_uses_same_trainer(self):
        task = make_gaussian_task(2, 0)
        sampler = PlanSampler(task.p0, task.p1, "minibatch")
        assert sampler.sample(8, np.random.default_rng(0)).tag == "minibatch"
        u = train_fm(FmConfig(iterations=3, batch_size=64, hidden=(8,), plan="minibatch"), task)
        assert np.all(np.isfinite(u.theta))

    def test_one_dimensional_mean_shift(self):
        # N(0,1) -> N(3,1): the true map shifts every point by 3
        task = gaussian_task([3.0], [[1.0]])
        cfg = FmConfig(iterations=600, batch_size=256, hidden=(32, 32), lr=3e-3, seed=0)
        u = train_fm(cfg, task)
        x0 = sample(task.p0, 4096, np.random.default_rng(1))
        shift = np.mean(field_map(u)(x0) - x0)
        assert abs(shift - 3.0) < 0.05 * 3.0

    def test_marginals_preserved(self):
        task = make_gaussian_task(2, 5)
        cfg = FmConfig(iterations=800, batch_size=256, hidden=(64, 64), lr=3e-3, seed=1)
        u = train_fm(cfg, task)
        y = field_map(u)(sample(task.p0, 8192, np.random.default_rng(2)))
        mean, cov = task.p1.params["mean"], task.p1.params["cov"]
        assert np.linalg.norm(y.mean(0) - mean) < 0.1 * np.linalg.norm(mean)
        assert np.linalg.norm(np.cov(y, rowvar=False) - cov) < 0.1 * np.linalg.norm(cov)


class TestStraightness:
    def test_constant_field(self, rng):
        assert straightness(ConstantField([1.0, 2.0]), rng.standard_normal((20, 2))) < 1e-20

    def test_ofm_field_is_straight(self, rng):
        psi = IcnnPotential(2, (16, 16), "softplus").init_params(rng, readout_scale=3.0)
        assert straightness(OfmField(psi), rng.standard_normal((30, 2)), FINE) < 1e-6

    def test_rotation_matches_circular_arc(self, rng):
        J = np.array([[0.0, -1.0], [1.0, 0.0]])
        s = straightness(lambda t, x: x @ J.T, rng.standard_normal((40, 2)), FINE)
        # z_t = e^{it} z_0 on the complex plane; deviation from the chord at 16 uniform times
        t = np.linspace(0, 1, 16)
        arc = np.mean(np.abs(np.exp(1j * t) - (1 - t) - t * np.exp(1j)) ** 2) / np.abs(np.exp(1j) - 1) ** 2
        assert s > 0
        assert s == pytest.approx(arc, rel=0.05)

    def test_degenerate_chords_skipped(self):
        x0 = np.array([[0.0, 0.0], [1.0, 0.0]])
        # field vanishes at the origin: first row never moves
        terms = straightness(lambda t, x: x, x0, return_terms=True)
        assert terms.shape == (1,)


class TestRectify:
    def test_constant_field_is_a_fixed_point(self):
        task = gaussian_task([1.0, 1.0], np.eye(2))
        cfg = FmConfig(iterations=300, batch_size=256, hidden=(16, 16), lr=3e-3, pool_size=2048,
                       warm_start=False)
        res = rectify_round(ConstantField([1.0, 1.0]), cfg, task)
        assert_allclose(res.pairs.x1 - res.pairs.x0, 1.0, atol=1e-12)
        # the constant field has zero FM loss on the new coupling; the refit gets close
        t = np.random.default_rng(3).uniform(0, 1, len(res.pairs))
        assert fm_loss(ConstantField([1.0, 1.0]), res.pairs, t) < 1e-28
        assert fm_loss(res.field, res.pairs, t) < 0.01
        assert res.cost_mean == pytest.approx(1.0)

    def test_cost_does_not_increase(self):
        task = make_gaussian_task(2, 6)
        cfg = FmConfig(iterations=400, batch_size=256, hidden=(32, 32), lr=3e-3, pool_size=4096)
        u = train_fm(cfg, task)
        before = PlanSampler(task.p0, task.p1).sample(4096, np.random.default_rng(9))
        m0, s0 = transport_cost(before)
        res = rectify_round(u, cfg, task)
        assert res.excluded == 0
        assert res.cost_mean <= m0 + 3 * np.hypot(s0, res.cost_se)

    def test_warm_start_copies_previous_field(self, rng):
        task = make_gaussian_task(2, 1)
        cfg = FmConfig(iterations=0, hidden=(8,), pool_size=64)
        u = train_fm(cfg, task)
        res = rectify_round(u, cfg, task)
        assert res.field is not u
        x = rng.standard_normal((5, 2))
        assert_allclose(res.field(0.3, x), u(0.3, x))
        cold = rectify_round(u, FmConfig(iterations=0, hidden=(8,), pool_size=64,
                                         warm_start=False), task)
        assert not np.allclose(cold.field(0.3, x), u(0.3, x))

    def test_failed_integrations_are_excluded(self):
        # rows starting above zero blow up before t = 1
        x0 = np.array([[-1.0], [2.0], [-0.5]])
        pairs, excluded = push_pairs(lambda t, z: z ** 2, x0, OdeOptions(max_steps=500))
        assert excluded == 1
        assert_allclose(pairs.x0[:, 0], [-1.0, -0.5])
        assert_allclose(pairs.x1[:, 0], [-0.5, -1 / 3], rtol=1e-4)
