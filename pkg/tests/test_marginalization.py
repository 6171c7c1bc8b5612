from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from delayvio.graph import (
    FactorGraph,
    Key,
    LinearSystem,
    Ordering,
    PriorFactor,
    ResidualFactor,
    StructuralError,
    Values,
    idepth_key,
    pose_key,
    vel_key,
)
from delayvio.lie import RigidTransform, Rotation3
from delayvio.marginalization import (
    DegenerateMarginalizationError,
    MarginalizationPrior,
    choose_reference,
    eliminate,
    eliminate_point_depths,
    linearize_factor,
    marginalize_frame,
    schur_complement,
)


def scalar(i):
    return idepth_key(i)


def spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return Q @ np.diag(rng.uniform(1.0, cond, n)) @ Q.T


def system(H, b, n_scalars):
    return LinearSystem(np.asarray(H, float), np.asarray(b, float), Ordering(scalar(i) for i in range(n_scalars)))


class PointFactor(ResidualFactor):
    """Stand-in for a photometric point: r_t = idepth * (t_target - t_host) - c_t."""

    visual = True

    def __init__(self, point, host, targets, rng):
        self.point, self.host = point, host
        self.c = {t: rng.normal(size=3) for t in targets}
        super().__init__(self._keys())

    def _keys(self):
        return [pose_key(self.host)] + [pose_key(t) for t in self.c] + [idepth_key(self.point)]

    @property
    def targets(self):
        return list(self.c)

    def drop_target(self, frame):
        self.c.pop(frame)
        self.keys = tuple(self._keys())

    def linearize_unweighted(self, values):
        return self.linearize(values)

    def evaluate(self, values, jacobians=True):
        th = values[pose_key(self.host)]
        d = values[idepth_key(self.point)]
        rs, Jh, Jts, Jd = [], [], [], []
        for t, c in self.c.items():
            tt = values[pose_key(t)]
            rs.append(d * (tt.translation - th.translation) - c)
            Jd.append((tt.translation - th.translation)[:, None])
        r = np.concatenate(rs)
        if not jacobians:
            return r, None
        n = len(self.c)
        Jh = np.zeros((3 * n, 6))
        Jts = [np.zeros((3 * n, 6)) for _ in range(n)]
        for i, t in enumerate(self.c):
            # left perturbation of translation: t -> t + rho + omega x t
            tt = values[pose_key(t)].translation
            Jts[i][3 * i:3 * i + 3, 3:] = d * np.eye(3)
            Jts[i][3 * i:3 * i + 3, :3] = -d * _hat(tt)
            Jh[3 * i:3 * i + 3, 3:] = -d * np.eye(3)
            Jh[3 * i:3 * i + 3, :3] = d * _hat(th.translation)
        return r, [Jh, *Jts, np.vstack(Jd)]


def _hat(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


class Between(ResidualFactor):
    def __init__(self, i, j):
        super().__init__([pose_key(i), pose_key(j)])

    def evaluate(self, values, jacobians=True):
        a, b = values[self.keys[0]].translation, values[self.keys[1]].translation
        r = b - a
        if not jacobians:
            return r, None
        Ja = np.hstack([_hat(a), -np.eye(3)])
        Jb = np.hstack([-_hat(b), np.eye(3)])
        return r, [Ja, Jb]


def random_pose(rng):
    return RigidTransform(Rotation3.exp(rng.normal(size=3) * 0.3), rng.normal(size=3))


class TestSchurComplement:
    def test_empty_beta_is_identity(self):
        s = system([[2.0, 1.0], [1.0, 2.0]], [1.0, 1.0], 2)
        out = schur_complement(s, [])
        assert_allclose(out.H, s.H, atol=0)
        assert_allclose(out.b, s.b, atol=0)

    def test_two_by_two(self):
        out = schur_complement(system([[2.0, 1.0], [1.0, 2.0]], [1.0, 1.0], 2), [scalar(1)])
        assert_allclose(out.H, [[1.5]], atol=1e-15)
        assert_allclose(out.b, [0.5], atol=1e-15)
        assert out.ordering.keys == [scalar(0)]

    def test_block_matches_full_solve(self):
        rng = np.random.default_rng(0)
        n = 9
        H, b = spd(rng, n), rng.normal(size=n)
        beta = [scalar(i) for i in (1, 4, 5, 8)]
        out = schur_complement(system(H, b, n), beta)
        x = np.linalg.solve(H, b)
        keep = [0, 2, 3, 6, 7]
        assert_allclose(np.linalg.solve(out.H, out.b), x[keep], atol=1e-9)

    def test_unknown_beta(self):
        with pytest.raises(StructuralError):
            schur_complement(system(np.eye(2), np.zeros(2), 2), [vel_key(0)])

    def test_indefinite_block_is_degenerate(self):
        with pytest.raises(DegenerateMarginalizationError):
            schur_complement(system([[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0], 2), [scalar(1)])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 10))
    def test_schur_equivalence(self, seed, n):
        rng = np.random.default_rng(seed)
        H, b = spd(rng, n, cond=100.0), rng.normal(size=n)
        mask = rng.random(n) < 0.5
        mask[rng.integers(n)] = False
        beta = [scalar(i) for i in np.flatnonzero(mask)]
        out = schur_complement(system(H, b, n), beta)
        x = np.linalg.solve(H, b)
        assert_allclose(np.linalg.solve(out.H, out.b), x[~mask], atol=1e-9, rtol=1e-9)
        assert np.max(np.abs(out.H - out.H.T)) <= 1e-10
        # marginalization never adds information
        ia = np.flatnonzero(~mask)
        assert np.min(np.linalg.eigvalsh(H[np.ix_(ia, ia)] - out.H)) >= -1e-9


class TestPriorEnergy:
    def _prior(self, H, b, x0):
        k = [vel_key(0)]
        return MarginalizationPrior(k, np.asarray(H, float), np.asarray(b, float), {k[0]: np.asarray(x0, float)})

    def test_at_fej_point(self):
        rng = np.random.default_rng(1)
        H, b = spd(rng, 3), rng.normal(size=3)
        p = self._prior(H, b, np.ones(3))
        vals = {vel_key(0): np.ones(3)}
        assert p.energy(vals) == 0.0
        assert_allclose(p.gradient(vals), -b, atol=0)

    def test_scalar_example(self):
        k = scalar(0)
        p = MarginalizationPrior([k], [[2.0]], [0.0], {k: 1.0})
        assert p.energy({k: 4.0}) == pytest.approx(9.0)

    def test_hessian_independent_of_point(self):
        rng = np.random.default_rng(2)
        H, b = spd(rng, 3), rng.normal(size=3)
        p = self._prior(H, b, rng.normal(size=3))
        for _ in range(5):
            vals = {vel_key(0): rng.normal(size=3) * 5}
            Hl, bl = p.linearize(vals)
            assert np.array_equal(Hl, H)
            assert_allclose(-bl, p.gradient(vals), atol=1e-12)
            eps = 1e-1  # exact for a quadratic; large step limits roundoff
            Hn = np.zeros((3, 3))
            for i in range(3):
                for j in range(3):
                    def E(di, dj):
                        v = vals[vel_key(0)].copy()
                        v[i] += di
                        v[j] += dj
                        return p.energy({vel_key(0): v})
                    Hn[i, j] = (E(eps, eps) - E(eps, -eps) - E(-eps, eps) + E(-eps, -eps)) / (4 * eps * eps)
            assert_allclose(Hn, H, rtol=1e-6, atol=1e-6)

    def test_missing_key(self):
        p = self._prior(np.eye(3), np.zeros(3), np.zeros(3))
        with pytest.raises(StructuralError):
            p.energy({})

    def test_shape_and_fej_checks(self):
        k = vel_key(0)
        with pytest.raises(StructuralError):
            MarginalizationPrior([k], np.eye(2), np.zeros(2), {k: np.zeros(3)})
        with pytest.raises(StructuralError):
            MarginalizationPrior([k], np.eye(3), np.zeros(3), {})

    def test_shifted_preserves_energy_differences(self):
        rng = np.random.default_rng(3)
        p = self._prior(spd(rng, 3), rng.normal(size=3), rng.normal(size=3))
        ref = {vel_key(0): rng.normal(size=3)}
        Hs, bs = p.shifted(ref)
        d = rng.normal(size=3)
        moved = {vel_key(0): ref[vel_key(0)] + d}
        assert_allclose(p.energy(moved) - p.energy(ref), 0.5 * d @ Hs @ d - bs @ d, atol=1e-10)


class TestEliminate:
    def test_oldest_stamp_is_reference(self):
        k = vel_key(0)
        a = MarginalizationPrior([k], np.eye(3), np.zeros(3), {k: np.zeros(3)}, {k: 5})
        b = MarginalizationPrior([k], np.eye(3), np.zeros(3), {k: np.ones(3)}, {k: 2})
        ref, stamps = choose_reference([a, b])
        assert_allclose(ref[k], np.ones(3))
        assert stamps[k] == 2

    def test_explicit_reference_wins(self):
        k = vel_key(0)
        a = MarginalizationPrior([k], np.eye(3), np.zeros(3), {k: np.zeros(3)}, {k: 0})
        ref, stamps = choose_reference([a], {k: np.full(3, 7.0)}, stamp=9)
        assert_allclose(ref[k], 7.0)
        assert stamps[k] == 9

    def test_matches_dense_energy(self):
        rng = np.random.default_rng(4)
        k0, k1, k2 = vel_key(0), vel_key(1), vel_key(2)
        f1 = MarginalizationPrior([k0, k1], spd(rng, 6), rng.normal(size=6),
                                  {k0: rng.normal(size=3), k1: rng.normal(size=3)}, {k0: 0, k1: 0}, [(0, 1)])
        f2 = MarginalizationPrior([k1, k2], spd(rng, 6), rng.normal(size=6),
                                  {k1: rng.normal(size=3), k2: rng.normal(size=3)}, {k1: 1, k2: 1})
        out = eliminate([f1, f2], [k1])
        assert out.keys == (k0, k2)
        assert out.imu_pairs == {(0, 1)}
        # oracle: minimize the summed energy over k1 exactly (it is quadratic in k1)
        H11 = f1.H[3:, 3:] + f2.H[:3, :3]

        def reduced(x0, x2):
            def E(x1):
                return f1.energy({k0: x0, k1: x1}) + f2.energy({k1: x1, k2: x2})
            eps = 1e-3
            g = np.array([(E(e * eps) - E(-e * eps)) / (2 * eps) for e in np.eye(3)])
            return E(-np.linalg.solve(H11, g))

        x = [rng.normal(size=3) for _ in range(4)]
        lhs = reduced(x[0], x[1]) - reduced(x[2], x[3])
        rhs = out.energy({k0: x[0], k2: x[1]}) - out.energy({k0: x[2], k2: x[3]})
        assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-6)

    def test_everything_eliminated(self):
        k = vel_key(0)
        f = MarginalizationPrior([k], np.eye(3), np.zeros(3), {k: np.zeros(3)})
        assert eliminate([f], [k]) is None

    def test_unconnected_beta(self):
        k = vel_key(0)
        f = MarginalizationPrior([k], np.eye(3), np.zeros(3), {k: np.zeros(3)})
        with pytest.raises(StructuralError):
            eliminate([f], [vel_key(1)])


class TestPointDepths:
    def test_unconstrained_depth(self):
        H = np.zeros((3, 3))
        H[:2, :2] = np.eye(2)
        assert eliminate_point_depths(H, np.zeros(3), 2) is None

    def test_matches_schur(self):
        rng = np.random.default_rng(5)
        H, b = spd(rng, 4), rng.normal(size=4)
        Hr, br = eliminate_point_depths(H, b, 3)
        ref = schur_complement(system(H, b, 4), [scalar(3)])
        assert_allclose(Hr, ref.H, atol=1e-12)
        assert_allclose(br, ref.b, atol=1e-12)


class TestMarginalizeFrame:
    def _setup(self):
        rng = np.random.default_rng(6)
        vals = Values({pose_key(i): random_pose(rng) for i in range(4)})
        g = FactorGraph()
        g.add(PriorFactor(pose_key(0), vals[pose_key(0)], 10.0))
        for p, targets in ((0, (1, 2)), (1, (1, 2))):
            f = PointFactor(p, 0, targets, rng)
            vals[idepth_key(p)] = rng.uniform(0.2, 1.0)
            g.add(f)
        other = PointFactor(2, 3, (0, 1), rng)
        vals[idepth_key(2)] = 0.5
        g.add(other)
        g.add(Between(1, 3))
        return g, vals, other

    def test_minimal_blanket(self):
        rng = np.random.default_rng(7)
        vals = Values({pose_key(0): random_pose(rng), pose_key(1): random_pose(rng)})
        g = FactorGraph([Between(0, 1), PriorFactor(pose_key(0), vals[pose_key(0)])])
        res = marginalize_frame(g, vals, 0, None, stamp=1)
        assert res.blanket == [pose_key(1)]
        assert len(g) == 0

    def test_hosted_points_connect_observers(self):
        g, vals, other = self._setup()
        res = marginalize_frame(g, vals, 0, None, stamp=1)
        assert set(res.blanket) == {pose_key(1), pose_key(2)}
        assert res.dropped_observations == 1
        assert other.targets == [1]
        assert not any(pose_key(0) in f.keys for f in g.factors)
        assert not any(idepth_key(p) in f.keys for f in g.factors for p in (0, 1))

    def test_blanket_matches_dense_oracle(self):
        g, vals, _ = self._setup()
        hosted = [f for f in g.factors if getattr(f, "host", None) == 0] + [g.factors[0]]
        ordering = Ordering([pose_key(1), pose_key(2), pose_key(0), idepth_key(0), idepth_key(1)])
        dense = FactorGraph(hosted).linearize(vals, ordering)
        ref = schur_complement(dense, [pose_key(0), idepth_key(0), idepth_key(1)])
        res = marginalize_frame(g, vals, 0, None, stamp=1)
        order = [res.prior.keys.index(k) for k in (pose_key(1), pose_key(2))]
        idx = np.concatenate([np.arange(6 * i, 6 * i + 6) for i in order])
        assert_allclose(res.prior.H[np.ix_(idx, idx)], ref.H, rtol=1e-8, atol=1e-8)
        assert_allclose(res.prior.b[idx], ref.b, rtol=1e-8, atol=1e-8)

    def test_gradient_at_fej_is_b(self):
        g, vals, _ = self._setup()
        res = marginalize_frame(g, vals, 0, None, stamp=1)
        assert_allclose(res.prior.gradient(vals), -res.prior.b, atol=0)

    def test_unknown_frame(self):
        g, vals, _ = self._setup()
        with pytest.raises(StructuralError):
            marginalize_frame(g, vals, 9, None, stamp=1)

    def test_unconstrained_point_dropped_with_warning(self):
        rng = np.random.default_rng(8)
        vals = Values({pose_key(0): random_pose(rng), pose_key(1): random_pose(rng)})
        vals[pose_key(1)] = RigidTransform(vals[pose_key(1)].rotation, vals[pose_key(0)].translation)
        f = PointFactor(0, 0, (1,), rng)
        vals[idepth_key(0)] = 0.5
        g = FactorGraph([f, Between(0, 1)])
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            res = marginalize_frame(g, vals, 0, None, stamp=1)
        assert res.dropped_points == [0]
        assert any("unconstrained" in str(x.message) for x in w)

    def test_linearize_factor_freezes_at_values(self):
        rng = np.random.default_rng(9)
        vals = Values({pose_key(0): random_pose(rng), pose_key(1): random_pose(rng)})
        f = Between(0, 1)
        q = linearize_factor(f, vals, stamp=3, imu_pairs=[(0, 1)])
        H, b = f.linearize(vals)
        assert np.array_equal(q.H, H) and np.array_equal(q.b, b)
        assert q.stamps == {pose_key(0): 3, pose_key(1): 3}
        assert q.imu_pairs == {(0, 1)}
        assert linearize_factor(q, vals, 0) is q


def test_key_repr():
    assert repr(Key("vel", 3)) == "vel3"
