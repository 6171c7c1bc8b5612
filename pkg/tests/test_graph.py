from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from delayvio.graph import (
    SCALE_KEY,
    DivergedError,
    FactorGraph,
    Key,
    LMConfig,
    Ordering,
    PriorFactor,
    ResidualFactor,
    StructuralError,
    UnobservableError,
    Values,
    idepth_key,
    marginal_covariance,
    numeric_jacobians,
    pose_key,
    retract,
    solve_lm,
    vel_key,
)
from delayvio.lie import RigidTransform, Rotation3


class Rosenbrock(ResidualFactor):
    """r = (10 (y - x^2), 1 - x) over two scalar blocks."""

    def __init__(self, kx, ky):
        super().__init__([kx, ky])

    def evaluate(self, values, jacobians=True):
        x, y = values[self.keys[0]], values[self.keys[1]]
        r = np.array([10.0 * (y - x * x), 1.0 - x])
        if not jacobians:
            return r, None
        return r, [np.array([[-20.0 * x], [-1.0]]), np.array([[10.0], [0.0]])]


class Between(ResidualFactor):
    """Nonlinear scalar/vector coupling r = sin(a) * v - c."""

    def __init__(self, ka, kv, c, information=1.0):
        super().__init__([ka, kv], information)
        self.c = np.asarray(c)

    def evaluate(self, values, jacobians=True):
        a, v = values[self.keys[0]], values[self.keys[1]]
        r = np.sin(a) * v - self.c
        if not jacobians:
            return r, None
        return r, [(np.cos(a) * v)[:, None], np.sin(a) * np.eye(3)]


class Linear(ResidualFactor):
    """r = A x - y over a single vector block."""

    def __init__(self, key, A, y, information=1.0):
        super().__init__([key], information)
        self.A, self.y = A, y

    def evaluate(self, values, jacobians=True):
        r = self.A @ values[self.keys[0]] - self.y
        return r, ([self.A] if jacobians else None)


def random_pose(rng, scale=1.0):
    return RigidTransform(Rotation3.exp(rng.normal(size=3) * scale), rng.normal(size=3))


class TestOrdering:
    def test_offsets_follow_dims(self):
        o = Ordering([pose_key(0), vel_key(0), SCALE_KEY])
        assert o.dim == 10
        assert o.slice(vel_key(0)) == slice(6, 9)
        assert_allclose(o.indices([SCALE_KEY, vel_key(0)]), [9, 6, 7, 8])

    def test_duplicate_key_rejected(self):
        with pytest.raises(StructuralError):
            Ordering([vel_key(0), vel_key(0)])

    def test_values_retract_local_roundtrip(self):
        rng = np.random.default_rng(1)
        vals = Values({pose_key(0): random_pose(rng), vel_key(0): rng.normal(size=3), SCALE_KEY: 2.0})
        o = Ordering(vals)
        d = rng.normal(size=o.dim) * 0.1
        moved = vals.retract(o, d)
        assert_allclose(moved.local(vals, o), d, atol=1e-12)


class TestLinearize:
    def test_empty_graph(self):
        sys_ = FactorGraph().linearize(Values())
        assert sys_.H.shape == (0, 0)
        assert sys_.b.shape == (0,)

    def test_unary_prior(self):
        x0 = np.array([1.0, -2.0, 0.5])
        x = np.array([1.5, -1.0, 0.0])
        g = FactorGraph([PriorFactor(vel_key(0), x0)])
        sys_ = g.linearize(Values({vel_key(0): x}))
        assert_allclose(sys_.H, np.eye(3), atol=0)
        assert_allclose(sys_.b, -(x - x0), atol=0)

    def test_missing_key(self):
        g = FactorGraph([PriorFactor(vel_key(0), np.zeros(3))])
        with pytest.raises(StructuralError):
            g.linearize(Values())

    def test_matches_finite_difference_gradient(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, v = idepth_key(0), vel_key(1)
            W = np.diag(rng.uniform(0.5, 2.0, 3))
            g = FactorGraph([Between(a, v, rng.normal(size=3), W),
                             PriorFactor(v, rng.normal(size=3), 2.0),
                             PriorFactor(a, 0.3, 4.0)])
            vals = Values({a: rng.normal(), v: rng.normal(size=3)})
            o = Ordering([a, v])
            sys_ = g.linearize(vals, o)
            eps = 1e-6
            grad = np.zeros(o.dim)
            for i in range(o.dim):
                e = np.zeros(o.dim)
                e[i] = eps
                grad[i] = (g.energy(vals.retract(o, e)) - g.energy(vals.retract(o, -e))) / (2 * eps)
            assert_allclose(sys_.b, -grad, rtol=1e-5, atol=1e-7)
            # Gauss-Newton Hessian from FD Jacobians
            Hn = np.zeros((o.dim, o.dim))
            for f in g.factors:
                J = np.hstack(numeric_jacobians(f, vals))
                idx = o.indices(f.keys)
                W_f = f.information if np.ndim(f.information) == 2 else f.information * np.eye(J.shape[0])
                Hn[np.ix_(idx, idx)] += J.T @ W_f @ J
            assert_allclose(sys_.H, Hn, rtol=1e-5, atol=1e-7)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        g = FactorGraph([Between(idepth_key(0), vel_key(0), rng.normal(size=3))])
        vals = Values({idepth_key(0): 0.4, vel_key(0): rng.normal(size=3)})
        s1, s2 = g.linearize(vals), g.linearize(vals)
        assert np.array_equal(s1.H, s2.H) and np.array_equal(s1.b, s2.b)

    def test_huber_downweights(self):
        f = PriorFactor(vel_key(0), np.zeros(3))
        f.huber = 1.0
        vals = Values({vel_key(0): np.array([4.0, 0, 0])})
        H, b = f.linearize(vals)
        assert_allclose(H, 0.25 * np.eye(3))
        assert_allclose(f.energy(vals), 0.5 * (2 * 4.0 - 1.0))


class TestPosePrior:
    def test_jacobian_matches_finite_difference(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            k = pose_key(0)
            f = PriorFactor(k, random_pose(rng), rng.uniform(0.5, 2.0))
            vals = Values({k: random_pose(rng)})
            _, (J,) = f.evaluate(vals)
            (Jn,) = numeric_jacobians(f, vals)
            assert_allclose(J, Jn, rtol=1e-5, atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-2.0, 2.0), min_size=6, max_size=6))
    def test_zero_residual_at_prior(self, xi):
        k = pose_key(0)
        P = retract(k, RigidTransform.identity(), np.array(xi))
        r, _ = PriorFactor(k, P).evaluate(Values({k: P}))
        assert_allclose(r, 0.0, atol=1e-12)


class TestSolveLM:
    def test_quadratic_converges_fast(self):
        rng = np.random.default_rng(6)
        A = rng.normal(size=(5, 3))
        y = rng.normal(size=5)
        k = vel_key(0)
        g = FactorGraph([Linear(k, A, y)])
        res = solve_lm(g, Values({k: np.zeros(3)}))
        x_star = np.linalg.lstsq(A, y, rcond=None)[0]
        assert_allclose(res.values[k], x_star, atol=1e-8)
        assert res.iterations <= 3

    def test_rosenbrock_minimum(self):
        kx, ky = idepth_key(0), idepth_key(1)
        g = FactorGraph([Rosenbrock(kx, ky)])
        res = solve_lm(g, Values({kx: -1.2, ky: 1.0}), LMConfig(max_iterations=200, rel_energy_tol=1e-15))
        assert_allclose([res.values[kx], res.values[ky]], [1.0, 1.0], atol=1e-6)

    def test_fixed_point_unchanged(self):
        k = vel_key(0)
        x0 = np.array([1.0, 2.0, 3.0])
        g = FactorGraph([PriorFactor(k, x0)])
        res = solve_lm(g, Values({k: x0.copy()}))
        assert np.array_equal(res.values[k], x0)
        assert res.energy == 0.0

    def test_energy_never_increases(self):
        kx, ky = idepth_key(0), idepth_key(1)
        g = FactorGraph([Rosenbrock(kx, ky)])
        res = solve_lm(g, Values({kx: -1.5, ky: 2.0}), LMConfig(max_iterations=100))
        assert np.all(np.diff(res.energies) <= 0.0)

    def test_fixed_keys_are_held(self):
        k0, k1 = vel_key(0), vel_key(1)
        g = FactorGraph([PriorFactor(k0, np.ones(3)), PriorFactor(k1, np.ones(3))])
        res = solve_lm(g, Values({k0: np.zeros(3), k1: np.zeros(3)}), fixed=[k1])
        assert_allclose(res.values[k0], np.ones(3), atol=1e-8)
        assert np.array_equal(res.values[k1], np.zeros(3))

    def test_singular_system_diverges(self):
        class Nan(ResidualFactor):
            def evaluate(self, values, jacobians=True):
                return np.array([1.0]), [np.full((1, 3), np.nan)]

        k = vel_key(0)
        with pytest.raises(DivergedError):
            solve_lm(FactorGraph([Nan([k])]), Values({k: np.zeros(3)}), LMConfig(max_lambda=1e3))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_accepted_steps_monotone(self, seed):
        rng = np.random.default_rng(seed)
        a, v = idepth_key(0), vel_key(0)
        g = FactorGraph([Between(a, v, rng.normal(size=3)), PriorFactor(a, rng.normal(), 0.1)])
        res = solve_lm(g, Values({a: rng.normal(), v: rng.normal(size=3)}))
        assert np.all(np.diff(res.energies) <= 0.0)


class TestMarginalCovariance:
    def test_scalar_prior(self):
        g = FactorGraph([PriorFactor(SCALE_KEY, 1.0, 4.0)])
        assert_allclose(marginal_covariance(g, Values({SCALE_KEY: 1.0}), SCALE_KEY), [[0.25]])

    def test_independent_blocks(self):
        W0, W1 = np.diag([1.0, 2.0, 4.0]), 5.0
        g = FactorGraph([PriorFactor(vel_key(0), np.zeros(3), W0), PriorFactor(vel_key(1), np.zeros(3), W1)])
        vals = Values({vel_key(0): np.ones(3), vel_key(1): np.ones(3)})
        cov = marginal_covariance(g, vals, [vel_key(0), vel_key(1)])
        expected = np.zeros((6, 6))
        expected[:3, :3] = np.linalg.inv(W0)
        expected[3:, 3:] = np.eye(3) / W1
        assert_allclose(cov, expected, atol=1e-14)

    def test_chain_matches_dense_inverse(self):
        rng = np.random.default_rng(8)
        k = [vel_key(i) for i in range(3)]
        vals = Values({ki: rng.normal(size=3) for ki in k})
        g = FactorGraph([PriorFactor(k[0], np.zeros(3), 3.0)])
        for i in range(2):
            A = np.hstack([-np.eye(3), np.eye(3)])

            class Chain(ResidualFactor):
                def evaluate(self, values, jacobians=True, A=A):
                    r = A @ np.concatenate([values[self.keys[0]], values[self.keys[1]]])
                    return r, ([A[:, :3], A[:, 3:]] if jacobians else None)

            L = rng.normal(size=(3, 3))
            g.add(Chain([k[i], k[i + 1]], L @ L.T + np.eye(3)))
        sys_ = g.linearize(vals, Ordering(k))
        dense = np.linalg.inv(sys_.H)
        for i in range(3):
            assert_allclose(marginal_covariance(g, vals, k[i]), dense[3 * i:3 * i + 3, 3 * i:3 * i + 3],
                            rtol=1e-10, atol=1e-12)

    def test_singular_is_unobservable(self):
        g = FactorGraph([Between(idepth_key(0), vel_key(0), np.zeros(3))])
        vals = Values({idepth_key(0): 0.0, vel_key(0): np.zeros(3)})
        with pytest.raises(UnobservableError):
            marginal_covariance(g, vals, vel_key(0))

    def test_unknown_key(self):
        g = FactorGraph([PriorFactor(SCALE_KEY, 1.0)])
        with pytest.raises(StructuralError):
            marginal_covariance(g, Values({SCALE_KEY: 1.0}), Key("vel", 9))

    def test_psd(self):
        rng = np.random.default_rng(9)
        L = rng.normal(size=(3, 3))
        g = FactorGraph([PriorFactor(vel_key(0), np.zeros(3), L @ L.T + 0.1 * np.eye(3))])
        cov = marginal_covariance(g, Values({vel_key(0): np.zeros(3)}), vel_key(0))
        assert np.all(np.linalg.eigvalsh(cov) > 0)
