import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from kedrl.bellman import BellmanOperators, compute_G, compute_H, compute_Phi_weighted
from kedrl.cme import ridge_weights
from kedrl.exceptions import NumericalError
from kedrl.grid import build_grid
from kedrl.kernel import MaternParams, gram, kernel_vector
from kedrl.optimizer import OptimizationTrace, OptimizerConfig, init_coefficients, loss, loss_gradient, optimize


def random_problem(seed, n=6, m=4, psd=True):
    r = np.random.default_rng(seed)
    k, phi = r.normal(size=n), r.normal(size=n)
    a = r.normal(size=(m, m))
    K = a @ a.T if psd else a
    H = r.normal(size=(m, m))
    c = r.normal(size=(m, m))
    G = c @ c.T if psd else c
    return k, phi, K, H, G


def ops_from(k, phi, K, H, G):
    return BellmanOperators(H, G, phi, np.ones_like(k), np.zeros(1), k, K)


class TestLoss:
    def test_zero_coefficients(self):
        k, phi, K, H, G = random_problem(0)
        cfg = OptimizerConfig(lambda_mass=3.5)
        assert loss(np.zeros((6, 4)), k, phi, K, H, G, cfg) == 3.5

    def test_no_penalties(self):
        k, phi, K, H, G = random_problem(0)
        cfg = OptimizerConfig(lambda_fp=0, lambda_mass=0)
        assert loss(np.zeros((6, 4)), k, phi, K, H, G, cfg) == 0.0

    @pytest.mark.parametrize("seed", range(3))
    def test_scalar_oracle(self, seed):
        k, phi, K, H, G = random_problem(seed, psd=False)
        B = np.random.default_rng(seed + 100).normal(size=(6, 4))
        cfg = OptimizerConfig(lambda_fp=7.0, lambda_mass=2.0)
        expected = oracles.loss_loop(B, k, phi, K, H, G, 7.0, 2.0)
        assert loss(B, k, phi, K, H, G, cfg) == pytest.approx(expected, rel=1e-11)


class TestGradient:
    def test_zero_b(self):
        k, phi, K, H, G = random_problem(1)
        cfg = OptimizerConfig(lambda_mass=4.0)
        grad = loss_gradient(np.zeros((6, 4)), k, phi, K, H, G, cfg)
        np.testing.assert_allclose(grad, -2 * 4.0 * np.outer(k, np.ones(4)), rtol=1e-15)

    def test_all_zero(self):
        z = np.zeros((4, 4))
        cfg = OptimizerConfig(lambda_mass=0.0)
        grad = loss_gradient(np.zeros((5, 4)), np.zeros(5), np.zeros(5), z, z, z, cfg)
        np.testing.assert_array_equal(grad, 0.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        r = np.random.default_rng(seed)
        n, m = int(r.integers(2, 11)), int(r.integers(2, 7))
        k, phi, K, H, G = random_problem(seed, n, m, psd=False)
        B = r.normal(size=(n, m))
        cfg = OptimizerConfig(lambda_fp=float(r.uniform(0, 50)), lambda_mass=float(r.uniform(0, 10)))
        grad = loss_gradient(B, k, phi, K, H, G, cfg)
        h = 1e-6
        fd = np.empty_like(B)
        for idx in np.ndindex(B.shape):
            bp, bm = B.copy(), B.copy()
            bp[idx] += h
            bm[idx] -= h
            fd[idx] = (loss(bp, k, phi, K, H, G, cfg) - loss(bm, k, phi, K, H, G, cfg)) / (2 * h)
        scale = max(1.0, np.abs(grad).max())
        assert np.max(np.abs(fd - grad)) / scale <= 1e-5

    @given(st.integers(0, 2**32 - 1))
    def test_fixed_point_penalty_vanishes(self, seed):
        r = np.random.default_rng(seed)
        k = r.normal(size=5)
        B = r.normal(size=(5, 3))
        cfg = OptimizerConfig(lambda_fp=10.0, lambda_mass=0.0)
        z = np.zeros((3, 3))
        # Phi = k makes B^T k = B^T Phi for every B
        assert loss(B, k, k, z, z, z, cfg) == 0.0
        np.testing.assert_array_equal(loss_gradient(B, k, k, z, z, z, cfg), 0.0)


class TestOptimize:
    def test_zero_gradient_only_decay(self):
        z = np.zeros((3, 3))
        ops = ops_from(np.zeros(4), np.zeros(4), z, z, z)
        cfg = OptimizerConfig(steps=5, lambda_fp=0, lambda_mass=0, weight_decay=0.1, learning_rate=0.01)
        B0 = init_coefficients(4, 3, seed=0)
        B, trace = optimize(B0, ops, cfg)
        np.testing.assert_allclose(B, B0 * (1 - 0.001) ** 5, rtol=1e-14)
        assert len(trace.objective) == 5

    def test_convex_surrogate_monotone(self):
        r = np.random.default_rng(4)
        n, m = 8, 4
        k = r.normal(size=n)
        phi = 0.5 * k + 0.1 * r.normal(size=n)
        K = np.eye(m)
        ops = ops_from(k, phi, K, 0.3 * K, 0.3 * K)
        cfg = OptimizerConfig(steps=500, learning_rate=1e-3, lambda_fp=100.0, lambda_mass=10.0)
        _, trace = optimize(init_coefficients(n, m, 0), ops, cfg)
        obj = np.array(trace.objective)
        tail = obj[len(obj) // 10:]
        assert np.all(np.diff(tail) <= 1e-9 * np.abs(tail[:-1]) + 1e-12)

    def test_deterministic(self):
        ops = ops_from(*random_problem(3))
        cfg = OptimizerConfig(steps=50)
        a = optimize(init_coefficients(6, 4, 1), ops, cfg)
        b = optimize(init_coefficients(6, 4, 1), ops, cfg)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1].objective == b[1].objective

    def test_early_stop(self):
        z = np.zeros((3, 3))
        ops = ops_from(np.zeros(4), np.zeros(4), z, z, z)
        _, trace = optimize(np.zeros((4, 3)), ops, OptimizerConfig(steps=100, lambda_mass=0, tol=1e-12))
        assert len(trace.grad_norm) == 1

    def test_nan_aborts_with_trace(self):
        k, phi, K, H, G = random_problem(0)
        ops = ops_from(k, phi, K, H, G)
        with np.errstate(invalid="ignore"), pytest.raises(NumericalError) as info:
            optimize(np.full((6, 4), np.inf), ops, OptimizerConfig(steps=3))
        assert isinstance(info.value.diagnostics["trace"], OptimizationTrace)

    def test_mass_anchored(self):
        # operators assembled from kernels, as in a real fit
        r = np.random.default_rng(7)
        n = 40
        x, x_next = r.normal(size=(n, 2)), r.normal(size=(n, 2))
        rewards = r.normal(1.0, 0.5, size=(n, 1))
        kx, kz = MaternParams(2.5, 1.0, 1.0), MaternParams(6.5, 2.0, 0.36)
        grid = build_grid(rewards / 0.1, k=6, expansion_factor=1.1, seed=0)
        k = kernel_vector(x, np.zeros(2), kx)
        gam = ridge_weights(gram(x, params=kx), k, 5e-4).gamma
        ops = BellmanOperators(
            compute_H(gam, grid, rewards, 0.9, kz),
            compute_G(gam, grid, rewards, 0.9, kz),
            compute_Phi_weighted(gram(x, x_next, kx), gam, np.ones(n)),
            gam,
            np.zeros(2),
            k,
            gram(grid.atoms, params=kz),
        )
        _, trace = optimize(init_coefficients(n, grid.size, 0), ops, OptimizerConfig(steps=2000))
        assert abs(trace.mass_residual[-1]) <= 0.05

    def test_trace_csv(self, tmp_path):
        ops = ops_from(*random_problem(3))
        _, trace = optimize(init_coefficients(6, 4, 1), ops, OptimizerConfig(steps=4))
        trace.to_csv(tmp_path / "trace.csv")
        lines = (tmp_path / "trace.csv").read_text().splitlines()
        assert len(lines) == 5
        assert "objective" in lines[0] and "grad_norm" in lines[0]

    def test_init_bounds(self):
        B = init_coefficients(10, 5, seed=3)
        assert np.all(np.abs(B) < 1 / np.sqrt(50))
        np.testing.assert_array_equal(B, init_coefficients(10, 5, seed=3))
