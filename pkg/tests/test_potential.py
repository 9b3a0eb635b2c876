import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from ofm.potential import (ACTIVATIONS, IcnnPotential, QuadraticPotential, ScalarNet,
                           SoftplusRidgePotential, hessian, load_potential, potential_from_dict,
                           save_potential)


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for j in range(x.shape[1]):
        e = np.zeros_like(x)
        e[:, j] = h
        g[:, j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def small_icnn(seed, dim=3, activation="softplus", quad_rank=0, readout_scale=2.0):
    rng = np.random.default_rng(seed)
    return IcnnPotential(dim, (6, 5), activation, quad_rank=quad_rank).init_params(
        rng, readout_scale=readout_scale)


class TestActivations:
    def test_frozen_values(self):
        # softplus(0) = log 2, sigma(0) = 1/2, sigma'(0) = 1/4
        v, d1, d2 = ACTIVATIONS["softplus"](np.array([0.0]))
        assert_allclose([v[0], d1[0], d2[0]], [np.log(2.0), 0.5, 0.25], rtol=1e-15)
        # celu(-1) = e^-1 - 1
        v, d1, d2 = ACTIVATIONS["celu"](np.array([-1.0, 2.0]))
        assert_allclose(v, [np.exp(-1.0) - 1.0, 2.0], rtol=1e-15)
        assert_allclose(d1, [np.exp(-1.0), 1.0], rtol=1e-15)
        assert_allclose(d2, [np.exp(-1.0), 0.0], rtol=1e-15)

    @pytest.mark.parametrize("name", ["softplus", "celu"])
    def test_derivatives_match_finite_differences(self, name):
        h = np.linspace(-3, 3, 13) + 0.05
        f = ACTIVATIONS[name]
        _, d1, d2 = f(h)
        eps = 1e-6
        assert_allclose(d1, (f(h + eps)[0] - f(h - eps)[0]) / (2 * eps), atol=1e-8)
        assert_allclose(d2, (f(h + eps)[1] - f(h - eps)[1]) / (2 * eps), atol=1e-7)

    def test_softplus_is_stable_for_large_inputs(self):
        v, d1, _ = ACTIVATIONS["softplus"](np.array([800.0, -800.0]))
        assert np.all(np.isfinite(v))
        assert_allclose(v, [800.0, 0.0], atol=1e-300)
        assert_allclose(d1, [1.0, 0.0], atol=1e-300)


class TestQuadraticPotential:
    def test_identity_is_half_squared_norm(self, rng):
        psi = QuadraticPotential.identity(4)
        x = rng.standard_normal((5, 4))
        assert_allclose(psi.value(x), 0.5 * np.sum(x ** 2, 1))
        assert_allclose(psi.grad(x), x)

    def test_gradient_is_affine_map(self, rng):
        A = np.array([[2.0, 0.5], [0.5, 1.0]])
        b = np.array([1.0, -1.0])
        psi = QuadraticPotential(A, b, 0.3)
        x = rng.standard_normal((7, 2))
        assert_allclose(psi.grad(x), x @ A + b)
        assert_allclose(psi.hvp(x, x), x @ A)

    def test_single_vector_in_single_value_out(self):
        psi = QuadraticPotential(np.diag([1.0, 3.0]))
        val, g = psi.value_and_grad(np.array([1.0, 1.0]))
        assert np.ndim(val) == 0 and g.shape == (2,)
        assert val == pytest.approx(2.0)

    def test_conjugate_closed_form_matches_sup(self, rng):
        # brute-force sup over a dense grid for D=1
        psi = QuadraticPotential([[2.0]], [0.5], 1.0)
        grid = np.linspace(-10, 10, 200001)[:, None]
        y = 1.7
        sup = np.max(y * grid[:, 0] - psi.value(grid))
        assert psi.conjugate_value(np.array([y])) == pytest.approx(sup, abs=1e-8)

    @pytest.mark.parametrize("A", [np.array([[1.0, 2.0], [0.0, 1.0]]), -np.eye(2)])
    def test_rejects_non_symmetric_or_indefinite(self, A):
        with pytest.raises(ValueError):
            QuadraticPotential(A)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            QuadraticPotential.identity(3).grad(np.zeros((2, 2)))


class TestSoftplusRidgePotential:
    def test_gradient_and_hvp_match_finite_differences(self, rng):
        psi = SoftplusRidgePotential(rng.standard_normal((4, 2)) * 2, rng.standard_normal(4),
                                     rng.uniform(0.5, 2, 4))
        x = rng.standard_normal((10, 2))
        g = psi.grad(x)
        assert np.max(np.abs(g - fd_grad(psi.value, x))) / np.max(np.abs(g)) < 1e-8
        v = rng.standard_normal((10, 2))
        fd = (psi.grad(x + 1e-6 * v) - psi.grad(x - 1e-6 * v)) / 2e-6
        assert_allclose(psi.hvp(x, v), fd, atol=1e-7)

    def test_rejects_negative_scales(self):
        with pytest.raises(ValueError):
            SoftplusRidgePotential(np.ones((1, 2)), [0.0], [-1.0])


class TestScalarNet:
    @pytest.mark.parametrize("activation", ["softplus", "celu"])
    @pytest.mark.parametrize("quad_rank", [0, 3])
    def test_gradient_matches_finite_differences(self, activation, quad_rank, rng):
        psi = small_icnn(1, activation=activation, quad_rank=quad_rank)
        x = rng.standard_normal((8, 3))
        assert_allclose(psi.grad(x), fd_grad(psi.value, x), atol=1e-7)

    @pytest.mark.parametrize("activation", ["softplus", "celu"])
    def test_hvp_matches_finite_differences_of_gradient(self, activation, rng):
        psi = small_icnn(2, activation=activation, quad_rank=2)
        x = rng.standard_normal((8, 3))
        v = rng.standard_normal((8, 3))
        fd = (psi.grad(x + 1e-6 * v) - psi.grad(x - 1e-6 * v)) / 2e-6
        assert_allclose(psi.hvp(x, v), fd, atol=1e-6)

    def test_param_grad_directional_matches_finite_differences(self, rng):
        psi = small_icnn(3, activation="celu", quad_rank=2)
        x = rng.standard_normal((6, 3))
        v = rng.standard_normal((6, 3))
        g = psi.param_grad_directional(x, v)
        fd = np.zeros_like(g)
        for k in range(g.size):
            plus, minus = psi.copy(), psi.copy()
            plus.theta[k] += 1e-6
            minus.theta[k] -= 1e-6
            fd[k] = (np.sum(plus.directional(x, v)) - np.sum(minus.directional(x, v))) / 2e-6
        assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-7

    def test_directional_equals_inner_product_with_gradient(self, rng):
        psi = small_icnn(4)
        x = rng.standard_normal((5, 3))
        v = rng.standard_normal((5, 3))
        assert_allclose(psi.directional(x, v), np.sum(v * psi.grad(x), 1), rtol=1e-12)

    def test_unconstrained_net_without_injection(self, rng):
        net = ScalarNet(3, (5, 4), "softplus", convex=False, inject=False, skip=False)
        net.init_params(rng)
        assert "W1" not in net.p and "skip" not in net.p
        x = rng.standard_normal((4, 3))
        assert_allclose(net.grad(x), fd_grad(net.value, x), atol=1e-7)

    def test_parameter_count(self):
        # W0 2x4 + b0 4 + U0 3x4 + W1 3x2 + b1 3 + u 3 + w 2 + c 1 + skip 1
        assert IcnnPotential(2, (4, 3)).n_params == 8 + 4 + 12 + 6 + 3 + 3 + 2 + 1 + 1

    def test_project_convex_clamps_constrained_weights(self, rng):
        psi = small_icnn(5)
        psi.theta[:] = -1.0
        psi.project_convex()
        for name in psi.constrained_names:
            assert np.all(psi.p[name] == 0.0)
        assert np.all(psi.p["W0"] == -1.0)

    def test_relu_rejected_for_convex_net(self):
        with pytest.raises(ValueError):
            IcnnPotential(2, (4,), "relu")

    def test_theta_views_share_storage(self):
        psi = small_icnn(6)
        psi.theta[psi.slices()["c"]] = 3.0
        assert psi.p["c"][0] == 3.0

    def test_copy_is_independent(self):
        psi = small_icnn(7)
        other = psi.copy()
        other.theta[:] = 0.0
        assert np.any(psi.theta != 0.0)


class TestConvexityProperties:
    @given(seed=st.integers(0, 2 ** 31), activation=st.sampled_from(["softplus", "celu"]))
    def test_midpoint_convexity(self, seed, activation):
        psi = small_icnn(seed, activation=activation, quad_rank=seed % 3)
        r = np.random.default_rng(seed)
        x, y = 2 * r.standard_normal((2, 16, 3))
        mid = psi.value(0.5 * (x + y))
        assert np.all(mid <= 0.5 * (psi.value(x) + psi.value(y)) + 1e-10)

    @given(seed=st.integers(0, 2 ** 31))
    def test_gradient_is_monotone(self, seed):
        psi = small_icnn(seed, activation="celu")
        r = np.random.default_rng(seed)
        x, y = 2 * r.standard_normal((2, 16, 3))
        assert np.all(np.sum((psi.grad(x) - psi.grad(y)) * (x - y), 1) >= -1e-10)

    @given(seed=st.integers(0, 2 ** 31), a=st.floats(-3, 3), b=st.floats(-3, 3))
    def test_hvp_is_linear_and_symmetric(self, seed, a, b):
        psi = small_icnn(seed, quad_rank=2)
        r = np.random.default_rng(seed)
        x, u, v = r.standard_normal((3, 4, 3))
        assert_allclose(psi.hvp(x, a * u + b * v), a * psi.hvp(x, u) + b * psi.hvp(x, v),
                        atol=1e-10)
        assert_allclose(np.sum(u * psi.hvp(x, v), 1), np.sum(v * psi.hvp(x, u), 1), atol=1e-10)

    @given(seed=st.integers(0, 2 ** 31))
    def test_hessian_is_positive_semidefinite(self, seed):
        psi = small_icnn(seed, activation="softplus")
        x = np.random.default_rng(seed).standard_normal((6, 3))
        H = hessian(psi, x)
        assert_allclose(H, np.swapaxes(H, 1, 2))
        # the unit quadratic skip at init keeps the Hessian above the identity
        assert np.linalg.eigvalsh(H).min() >= 1.0 - 1e-10


class TestPersistence:
    @pytest.mark.parametrize("make", [
        lambda: small_icnn(8, quad_rank=1),
        lambda: QuadraticPotential(np.diag([1.0, 2.0, 3.0]), np.ones(3), 0.5),
        lambda: SoftplusRidgePotential(np.ones((2, 3)), [0.0, 1.0], [1.0, 0.5]),
    ])
    def test_round_trip(self, make, tmp_path, rng):
        psi = make()
        path = tmp_path / "psi.json"
        save_potential(psi, path)
        back = load_potential(path)
        x = rng.standard_normal((4, 3))
        assert_allclose(back.value(x), psi.value(x), rtol=0, atol=0)

    def test_rejects_unknown_format_version(self):
        data = small_icnn(9).to_dict()
        data["format_version"] = 99
        with pytest.raises(ValueError, match="format version"):
            potential_from_dict(json.loads(json.dumps(data)))
