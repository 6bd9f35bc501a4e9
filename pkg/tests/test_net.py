import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lyapcert import net
from lyapcert.loss import TightenedLossConfig, empirical_loss


def identity_1_1_1():
    arch = net.Architecture(input_dim=1, hidden=(1,))
    theta = net.pack([(np.array([[1.0]]), np.array([0.0])),
                      (np.array([[1.0]]), np.array([0.0]))], arch)
    return arch, theta


def fd_gradient(fun, theta, h=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (fun(tp) - fun(tm)) / (2 * h)
    return g


def sample_away_from_kinks(rng, arch, cfg, n):
    """Random (theta, batch) pairs with both hinge arguments >= 1e-3 from zero."""
    out = []
    while len(out) < n:
        theta = net.init_params(arch, int(rng.integers(1 << 30)))
        X = rng.normal(size=(4, arch.input_dim))
        Y = rng.normal(size=(4, arch.input_dim))
        V = net.forward_batch(theta, arch, X)
        lie = np.sum(net.input_gradient_batch(theta, arch, X) * Y, axis=1)
        if np.all(np.abs(cfg.eps1 - V) > 1e-3) and np.all(np.abs(cfg.eps2 + lie) > 1e-3):
            out.append((theta, (X, Y)))
    return out


class TestForward:
    def test_zero_params_zero_everywhere(self):
        arch = net.Architecture(2, (4, 4))
        theta = np.zeros(arch.n_params)
        rng = np.random.default_rng(0)
        for _ in range(5):
            assert net.forward(theta, arch, rng.normal(size=2)) == 0.0

    def test_identity_net_at_zero(self):
        arch, theta = identity_1_1_1()
        assert net.forward(theta, arch, [0.0]) == 0.0

    def test_identity_net_tanh_one(self):
        arch, theta = identity_1_1_1()
        assert net.forward(theta, arch, [1.0]) == pytest.approx(np.tanh(1.0), abs=1e-15)


class TestInputGradient:
    def test_zero_params(self):
        arch = net.Architecture(3, (5,))
        g = net.input_gradient(np.zeros(arch.n_params), arch, [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(g, np.zeros(3))

    def test_identity_net_sech2(self):
        arch, theta = identity_1_1_1()
        assert net.input_gradient(theta, arch, [0.0])[0] == pytest.approx(1.0, abs=1e-15)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        arch = net.Architecture(2, (6, 4))
        for _ in range(100):
            theta = net.init_params(arch, int(rng.integers(1 << 30)))
            x = rng.normal(size=2)
            g = net.input_gradient(theta, arch, x)
            fd = np.array([
                (net.forward(theta, arch, x + dx) - net.forward(theta, arch, x - dx)) / 2e-6
                for dx in np.eye(2) * 1e-6
            ])
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


class TestLossGradient:
    def test_flat_region_zero_gradient(self):
        # both hinges inactive and V(0) = 0: the loss sits on a flat plateau
        arch, theta = identity_1_1_1()
        cfg = TightenedLossConfig(0.1, 0.1)
        X = np.array([[2.0]])       # V = tanh(2) = 0.96 > eps1
        Y = np.array([[-3.0]])      # lie = sech^2(2) * (-3) = -0.21 < -eps2
        g = net.loss_gradient(theta, arch, (X, Y), cfg)
        np.testing.assert_array_equal(g, np.zeros_like(theta))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        arch = net.Architecture(2, (4,))
        cfg = TightenedLossConfig(0.3, 0.2)
        for theta, batch in sample_away_from_kinks(rng, arch, cfg, 25):
            g = net.loss_gradient(theta, arch, batch, cfg)
            fd = fd_gradient(lambda t: empirical_loss(t, arch, batch, cfg), theta)
            np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-7)

    def test_decrease_hinge_linear_in_y(self):
        rng = np.random.default_rng(3)
        arch = net.Architecture(2, (4,))
        theta = net.init_params(arch, 5)
        X = rng.normal(size=(6, 2))
        # labels aligned with the value gradient so the decrease hinge is active
        Y = net.input_gradient_batch(theta, arch, X)
        cfg = TightenedLossConfig(1e9, 0.5)  # positivity hinge active everywhere, fixed
        base = net.loss_gradient(theta, arch, (X, np.zeros_like(Y)), cfg)
        g1 = net.loss_gradient(theta, arch, (X, Y), cfg)
        g2 = net.loss_gradient(theta, arch, (X, 2.0 * Y), cfg)
        np.testing.assert_allclose(g2 - base, 2.0 * (g1 - base), rtol=1e-12, atol=1e-14)


class TestHvp:
    def test_zero_vector(self):
        arch = net.Architecture(2, (3,))
        theta = net.init_params(arch, 0)
        cfg = TightenedLossConfig(0.1, 0.1)
        batch = (np.ones((2, 2)), np.ones((2, 2)))
        np.testing.assert_array_equal(net.hvp(theta, arch, batch, cfg, np.zeros_like(theta)),
                                      np.zeros_like(theta))

    def test_quadratic_surrogate(self):
        rng = np.random.default_rng(4)
        M = rng.normal(size=(6, 6))
        M = M @ M.T
        v = rng.normal(size=6)
        hv = net.finite_difference_hvp(lambda t: M @ t, np.zeros(6), v)
        np.testing.assert_allclose(hv, M @ v, atol=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        arch = net.Architecture(2, (4,))
        cfg = TightenedLossConfig(0.3, 0.2)
        (theta, batch), = sample_away_from_kinks(rng, arch, cfg, 1)
        u = rng.normal(size=theta.size)
        v = rng.normal(size=theta.size)
        hu = net.hvp(theta, arch, batch, cfg, u)
        hv = net.hvp(theta, arch, batch, cfg, v)
        assert np.dot(v, hu) == pytest.approx(np.dot(u, hv), rel=1e-3)


class TestInitParams:
    def test_deterministic(self):
        arch = net.Architecture(3, (8,))
        np.testing.assert_array_equal(net.init_params(arch, 42), net.init_params(arch, 42))

    def test_different_seeds_differ(self):
        arch = net.Architecture(3, (8,))
        assert not np.array_equal(net.init_params(arch, 1), net.init_params(arch, 2))

    def test_output_variance_nonzero(self):
        arch = net.Architecture(2, (8,))
        rng = np.random.default_rng(6)
        values = [net.forward(net.init_params(arch, s), arch, rng.normal(size=2))
                  for s in range(30)]
        assert 0.0 < np.var(values) < np.inf

    def test_bounds_follow_fan_in(self):
        arch = net.Architecture(4, (16,))
        theta = net.init_params(arch, 0)
        (w_slice, shape, _b) = net.param_slices(arch)[0]
        assert np.max(np.abs(theta[w_slice])) <= np.sqrt(1.0 / 4)


class TestPacking:
    @given(st.integers(1, 4), st.integers(1, 8), st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_pack_unpack_round_trip(self, dim, width, seed):
        arch = net.Architecture(dim, (width, max(1, width // 2)))
        theta = net.init_params(arch, seed)
        np.testing.assert_array_equal(net.pack(net.unpack(theta, arch), arch), theta)

    def test_slices_cover_vector(self):
        arch = net.Architecture(3, (5, 4))
        covered = np.zeros(arch.n_params, dtype=int)
        for w, shape, b in net.param_slices(arch):
            covered[w] += 1
            covered[b] += 1
        assert np.all(covered == 1)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        arch = net.Architecture(2, (7, 3))
        theta = net.init_params(arch, 9)
        path = tmp_path / "ckpt.json"
        net.save_checkpoint(path, theta, arch, extra={"radius": 4.0})
        theta2, arch2, extra = net.load_checkpoint(path)
        assert arch2 == arch
        assert extra["radius"] == 4.0
        np.testing.assert_array_equal(theta, theta2)
        x = np.array([0.3, -0.8])
        assert net.forward(theta, arch, x) == net.forward(theta2, arch2, x)

    def test_rejects_wrong_size(self, tmp_path):
        arch = net.Architecture(2, (3,))
        path = tmp_path / "bad.json"
        payload = {"arch": {"input_dim": 2, "hidden": [3], "activation": "tanh"},
                   "theta": [0.0, 1.0]}
        path.write_text(json.dumps(payload))
        with pytest.raises(ValueError):
            net.load_checkpoint(path)


class TestShapedInit:
    def test_deterministic(self):
        arch = net.Architecture(2, (8, 8))
        np.testing.assert_array_equal(net.shaped_init(arch, 3, 4.0),
                                      net.shaped_init(arch, 3, 4.0))

    def test_bowl_shape(self):
        arch = net.Architecture(2, (16, 16))
        theta = net.shaped_init(arch, 0, 4.0)
        v0 = net.forward(theta, arch, [0.0, 0.0])
        rim = [net.forward(theta, arch, 3.5 * np.array([np.cos(a), np.sin(a)]))
               for a in np.linspace(0, 2 * np.pi, 12)]
        assert min(rim) > v0 + 0.5


class TestLipschitzBound:
    def test_dominates_empirical_gradient_norm(self):
        rng = np.random.default_rng(7)
        for s in range(50):
            arch = net.Architecture(2, (6,))
            theta = net.init_params(arch, s)
            bound = net.lipschitz_weight_bound(theta, arch)
            X = rng.normal(size=(100, 2)) * 3
            grads = net.input_gradient_batch(theta, arch, X)
            assert bound >= np.max(np.abs(grads)) - 1e-12
