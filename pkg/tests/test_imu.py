from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.linalg import expm

from delayvio.graph import GRAVITY_KEY, SCALE_KEY, Values, bias_key, numeric_jacobians, pose_key, vel_key
from delayvio.imu import (
    BiasRandomWalkFactor,
    DegenerateCovarianceError,
    ImuData,
    ImuDataError,
    ImuFactor,
    ImuMeasurement,
    ImuNoiseParams,
    ImuState,
    PreintegratedImu,
    gravity_from_accel,
    imu_energy,
    imu_residual,
    information,
    mahalanobis,
    omega_transform,
    predict,
    preintegrate,
)
from delayvio.lie import GravityRotation, RigidTransform, Rotation3, hat
from delayvio.simulation import SimConfig, simulate

G = np.array([0.0, 0.0, -9.81])


def constant(gyro, accel, duration=1.0, rate=1000):
    n = int(round(duration * rate))
    return [ImuMeasurement(k / rate, np.asarray(gyro, float), np.asarray(accel, float)) for k in range(n + 1)]


def random_pose(rng, scale=1.0):
    return RigidTransform(Rotation3.exp(rng.normal(size=3) * scale), rng.normal(size=3))


@pytest.fixture(scope="module")
def noiseless():
    return simulate(SimConfig(seed=2, duration=6.0, noiseless_imu=True))


class TestPreintegration:
    def test_static(self):
        pre = preintegrate(constant([0, 0, 0], [0, 0, 0]))
        assert_allclose(pre.dR, np.eye(3), atol=0)
        assert_allclose(pre.dv, 0.0, atol=0)
        assert_allclose(pre.dp, 0.0, atol=0)
        assert pre.dt == pytest.approx(1.0)

    def test_constant_acceleration(self):
        pre = preintegrate(constant([0, 0, 0], [1, 0, 0]))
        assert_allclose(pre.dv, [1, 0, 0], rtol=1e-3, atol=1e-12)
        assert_allclose(pre.dp, [0.5, 0, 0], rtol=1e-3, atol=1e-12)

    def test_constant_rate(self):
        pre = preintegrate(constant([0, 0, 1], [0, 0, 0]))
        assert_allclose(pre.dR, expm(hat(np.array([0.0, 0.0, 1.0]))), atol=1e-9)

    def test_rotating_body_with_constant_world_acceleration(self):
        # body spins about z while accelerating along world x: a_body = R(t)^T (1,0,0)
        rate, w = 1000, 0.7
        ms = []
        for k in range(rate + 1):
            t = k / rate
            ms.append(ImuMeasurement(t, np.array([0, 0, w]), Rotation3.exp([0, 0, w * t]).matrix.T @ [1, 0, 0]))
        pre = preintegrate(ms)
        assert_allclose(pre.dv, [1, 0, 0], atol=1e-4)
        assert_allclose(pre.dp, [0.5, 0, 0], atol=1e-4)

    def test_nonpositive_dt(self):
        pre = PreintegratedImu.start(ImuMeasurement(0.0, np.zeros(3), np.zeros(3)))
        with pytest.raises(ImuDataError):
            pre.integrate(ImuMeasurement(0.0, np.zeros(3), np.zeros(3)))
        with pytest.raises(ImuDataError):
            pre.integrate(ImuMeasurement(1.0, np.zeros(3), np.zeros(3)), dt=-1.0)
        with pytest.raises(ImuDataError):
            preintegrate(constant([0, 0, 0], [0, 0, 0])[:1])

    def test_covariance_psd_and_growing(self):
        rng = np.random.default_rng(0)
        pre = PreintegratedImu.start(ImuMeasurement(0.0, rng.normal(size=3), rng.normal(size=3)))
        trace = 0.0
        for k in range(1, 400):
            pre = pre.integrate(ImuMeasurement(k * 5e-3, rng.normal(size=3), rng.normal(size=3) * 3))
            assert np.min(np.linalg.eigvalsh(pre.cov)) >= -1e-15
            assert np.trace(pre.cov) >= trace
            trace = np.trace(pre.cov)
        assert pre.dt == pytest.approx(399 * 5e-3)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 40))
    def test_concatenation(self, seed, split):
        rng = np.random.default_rng(seed)
        t = np.arange(60) * 5e-3
        ms = [ImuMeasurement(ti, rng.normal(size=3), rng.normal(size=3) * 2) for ti in t]
        bias = rng.normal(size=6) * 0.01
        whole = preintegrate(ms, bias)
        a = preintegrate(ms[:split + 1], bias)
        b = preintegrate(ms[split:], bias)
        ab = a.compose(b)
        assert_allclose(ab.dR, whole.dR, atol=1e-8)
        assert_allclose(ab.dv, whole.dv, atol=1e-8)
        assert_allclose(ab.dp, whole.dp, atol=1e-8)
        assert_allclose(ab.cov, whole.cov, atol=1e-8 * max(1.0, np.max(np.abs(whole.cov))))
        assert_allclose(ab.J_bg, whole.J_bg, atol=1e-8)
        assert_allclose(ab.J_ba, whole.J_ba, atol=1e-8)
        assert ab.dt == pytest.approx(whole.dt, abs=1e-12)

    def test_compose_requires_same_bias(self):
        ms = constant([0, 0, 0], [0, 0, 0], 0.1, 100)
        with pytest.raises(ImuDataError):
            preintegrate(ms, np.zeros(6)).compose(preintegrate(ms, np.ones(6)))


class TestPredict:
    def test_free_fall(self):
        rng = np.random.default_rng(1)
        pre = preintegrate(constant([0, 0, 0], [0, 0, 0], 0.5))
        s = ImuState(random_pose(rng), rng.normal(size=3))
        out, _ = predict(pre, s, G)
        T = 0.5
        assert_allclose(out.pose.R, s.pose.R, atol=1e-12)
        assert_allclose(out.velocity, s.velocity + G * T, atol=1e-12)
        assert_allclose(out.pose.t, s.pose.t + s.velocity * T + 0.5 * G * T * T, atol=1e-12)

    def test_matches_simulator_ground_truth(self, noiseless):
        sim = noiseless
        for k in range(len(sim.keyframe_times) - 1):
            ms = sim.imu.between(sim.keyframe_times[k], sim.keyframe_times[k + 1])
            pre = preintegrate(ms, sim.biases[k])
            s = ImuState(sim.T_wi[k], sim.velocities[k], sim.biases[k])
            out, _ = predict(pre, s, G)
            assert np.linalg.norm(out.pose.t - sim.T_wi[k + 1].t) < 1e-4
            assert np.linalg.norm(out.velocity - sim.velocities[k + 1]) < 1e-4
            assert np.linalg.norm(so3_angle(out.pose.R.T @ sim.T_wi[k + 1].R)) < 1e-4

    def test_first_order_bias_correction(self):
        rng = np.random.default_rng(2)
        ms = [ImuMeasurement(k * 5e-3, rng.normal(size=3), rng.normal(size=3) + [0, 0, 9.81]) for k in range(101)]
        pre = preintegrate(ms)
        errs = []
        for eps in (1e-3, 5e-4):
            db = rng.normal(size=6)
            db *= eps / np.linalg.norm(db)
            dR, dv, dp = pre.deltas(db)
            ref = preintegrate(ms, db)
            errs.append(max(np.linalg.norm(so3_angle(dR.T @ ref.dR)),
                            np.linalg.norm(dv - ref.dv), np.linalg.norm(dp - ref.dp)))
            assert errs[-1] < 50 * eps**2
        # zeroth order would leave an O(eps) error
        _, dv0, _ = pre.deltas(None)
        assert np.linalg.norm(dv0 - preintegrate(ms, np.r_[0, 0, 0, 1e-3, 0, 0]).dv) > 1e-4

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-np.pi, np.pi))
    def test_yaw_equivariance(self, yaw):
        rng = np.random.default_rng(3)
        ms = [ImuMeasurement(k * 5e-3, rng.normal(size=3), rng.normal(size=3)) for k in range(41)]
        pre = preintegrate(ms)
        s = ImuState(random_pose(rng), rng.normal(size=3))
        Y = RigidTransform(Rotation3.exp([0, 0, yaw]), np.zeros(3))
        out, _ = predict(pre, s, G)
        out_y, _ = predict(pre, ImuState(Y @ s.pose, Y.R @ s.velocity), G)
        assert_allclose(out_y.pose.matrix(), (Y @ out.pose).matrix(), atol=1e-10)
        assert_allclose(out_y.velocity, Y.R @ out.velocity, atol=1e-10)


def so3_angle(R):
    return Rotation3.from_matrix(R).log()


class TestEnergy:
    def test_zero_at_prediction(self):
        rng = np.random.default_rng(4)
        ms = [ImuMeasurement(k * 5e-3, rng.normal(size=3), rng.normal(size=3)) for k in range(41)]
        pre = preintegrate(ms)
        s = ImuState(random_pose(rng), rng.normal(size=3))
        sj, _ = predict(pre, s, G)
        E, r, _ = imu_energy(pre, s, sj, G)
        assert E == pytest.approx(0.0, abs=1e-16)
        sj.velocity = sj.velocity + 0.01
        assert imu_energy(pre, s, sj, G)[0] > 0

    def test_scalar_analog(self):
        assert mahalanobis(2.0, 4.0) == pytest.approx(1.0)

    def test_degenerate_covariance(self):
        with pytest.raises(DegenerateCovarianceError):
            information(np.zeros((9, 9)))

    def test_residual_jacobians(self):
        rng = np.random.default_rng(5)
        ms = [ImuMeasurement(k * 5e-3, rng.normal(size=3), rng.normal(size=3)) for k in range(41)]
        pre = preintegrate(ms, rng.normal(size=6) * 0.01)
        si = ImuState(random_pose(rng), rng.normal(size=3), rng.normal(size=6) * 0.02)
        sj = ImuState(random_pose(rng), rng.normal(size=3))
        r0, J = imu_residual(pre, si, sj, G)
        eps = 1e-6

        def res(si_, sj_):
            return imu_residual(pre, si_, sj_, G, jacobians=False)[0]

        def num(make):
            cols = []
            for e in np.eye(3):
                cols.append((res(*make(e * eps)) - res(*make(-e * eps))) / (2 * eps))
            return np.column_stack(cols)

        def rot_right(P, d):
            return RigidTransform.from_rt(P.R @ Rotation3.exp(d).matrix, P.t)

        cases = {
            "theta_i": lambda d: (ImuState(rot_right(si.pose, d), si.velocity, si.bias), sj),
            "p_i": lambda d: (ImuState(RigidTransform.from_rt(si.pose.R, si.pose.t + d), si.velocity, si.bias), sj),
            "v_i": lambda d: (ImuState(si.pose, si.velocity + d, si.bias), sj),
            "bg": lambda d: (ImuState(si.pose, si.velocity, si.bias + np.r_[d, 0, 0, 0]), sj),
            "ba": lambda d: (ImuState(si.pose, si.velocity, si.bias + np.r_[0, 0, 0, d]), sj),
            "theta_j": lambda d: (si, ImuState(rot_right(sj.pose, d), sj.velocity)),
            "p_j": lambda d: (si, ImuState(RigidTransform.from_rt(sj.pose.R, sj.pose.t + d), sj.velocity)),
            "v_j": lambda d: (si, ImuState(sj.pose, sj.velocity + d)),
        }
        for name, make in cases.items():
            assert_allclose(J[name], num(make), rtol=1e-5, atol=1e-6, err_msg=name)


class TestFactors:
    def _values(self, rng, i=0, j=1):
        return Values({
            pose_key(i): random_pose(rng), pose_key(j): random_pose(rng),
            vel_key(i): rng.normal(size=3), vel_key(j): rng.normal(size=3),
            bias_key(i): rng.normal(size=6) * 0.01, bias_key(j): rng.normal(size=6) * 0.01,
            SCALE_KEY: float(np.exp(rng.normal())), GRAVITY_KEY: GravityRotation(*rng.normal(size=2) * 0.3, 0.2),
        })

    def test_imu_factor_jacobians(self):
        rng = np.random.default_rng(6)
        T_ci = random_pose(rng, 0.5)
        for _ in range(100):
            ms = [ImuMeasurement(k * 5e-3, rng.normal(size=3), rng.normal(size=3)) for k in range(21)]
            f = ImuFactor(0, 1, preintegrate(ms), T_ci)
            vals = self._values(rng)
            _, J = f.evaluate(vals)
            Jn = numeric_jacobians(f, vals)
            for k, a, b in zip(f.keys, J, Jn):
                assert_allclose(a, b, rtol=1e-5, atol=2e-5 * max(1.0, np.max(np.abs(b))), err_msg=str(k))

    def test_shared_bias(self):
        ms = constant([0, 0, 0], [0, 0, 9.81], 0.1, 100)
        f = ImuFactor(3, 4, preintegrate(ms), RigidTransform.identity(), bias_index=-1)
        assert f.keys[2] == bias_key(-1)
        assert f.imu_pairs == {(3, 4)}

    def test_bias_walk(self):
        noise = ImuNoiseParams()
        f = BiasRandomWalkFactor(0, 1, 0.5, noise)
        rng = np.random.default_rng(7)
        vals = self._values(rng)
        r, J = f.evaluate(vals)
        assert_allclose(r, vals[bias_key(1)] - vals[bias_key(0)])
        assert_allclose(np.diag(f.information)[:3], 1.0 / (noise.gyro_walk**2 * 0.5))
        for a, b in zip(J, numeric_jacobians(f, vals)):
            assert_allclose(a, b, atol=1e-8)


class TestOmegaTransform:
    def test_identities_collapse(self):
        rng = np.random.default_rng(8)
        T_wc = random_pose(rng)
        out = omega_transform(T_wc, 1.0, GravityRotation(0.0, 0.0, 0.0), RigidTransform.identity())
        assert_allclose(out.matrix(), T_wc.matrix(), atol=1e-12)

    def test_pure_translation_scaled(self):
        T_wc = RigidTransform(Rotation3.identity(), np.array([1.0, -2.0, 0.5]))
        out = omega_transform(T_wc, 2.0, GravityRotation(0.0, 0.0, 0.0), RigidTransform.identity())
        assert_allclose(out.t, [2.0, -4.0, 1.0], atol=1e-12)
        assert_allclose(out.R, np.eye(3), atol=0)

    def test_matches_similarity_composition(self):
        rng = np.random.default_rng(9)
        T_wc, T_ci = random_pose(rng), random_pose(rng, 0.3)
        s, g = 1.7, GravityRotation(0.2, -0.1, 0.4)
        S = np.diag([s, s, s, 1.0])
        R4 = np.eye(4)
        R4[:3, :3] = g.matrix.T
        M = R4 @ S @ T_wc.matrix() @ np.linalg.inv(S) @ T_ci.matrix()
        assert_allclose(omega_transform(T_wc, s, g, T_ci).matrix(), M, atol=1e-12)

    def test_jacobians(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            T_wc, T_ci = random_pose(rng), random_pose(rng, 0.3)
            s = float(np.exp(rng.normal()))
            g = GravityRotation(*rng.normal(size=2) * 0.3, rng.normal())
            _, Jp, Js, Jg = omega_transform(T_wc, s, g, T_ci, jacobians=True)
            eps = 1e-6

            def err(T):
                base = omega_transform(T_wc, s, g, T_ci)
                return np.r_[Rotation3.from_matrix(base.R.T @ T.R).log(), T.t - base.t]

            Jp_n = np.column_stack([(err(omega_transform(T_wc.boxplus(e * eps), s, g, T_ci))
                                     - err(omega_transform(T_wc.boxplus(-e * eps), s, g, T_ci))) / (2 * eps)
                                    for e in np.eye(6)])
            Js_n = (err(omega_transform(T_wc, s * np.exp(eps), g, T_ci))
                    - err(omega_transform(T_wc, s * np.exp(-eps), g, T_ci))) / (2 * eps)
            Jg_n = np.column_stack([(err(omega_transform(T_wc, s, g.boxplus(e * eps), T_ci))
                                     - err(omega_transform(T_wc, s, g.boxplus(-e * eps), T_ci))) / (2 * eps)
                                    for e in np.eye(2)])
            assert_allclose(Jp, Jp_n, rtol=1e-5, atol=1e-6)
            assert_allclose(Js[:, 0], Js_n, rtol=1e-5, atol=1e-6)
            assert_allclose(Jg, Jg_n, rtol=1e-5, atol=1e-6)

    def test_nonpositive_scale(self):
        with pytest.raises(ValueError):
            omega_transform(RigidTransform.identity(), 0.0, GravityRotation(0, 0, 0), RigidTransform.identity())


class TestGravityInit:
    def test_aligned_case(self):
        g = gravity_from_accel(np.array([0.0, 0.0, 9.81]), np.eye(3), RigidTransform.identity())
        assert_allclose(g.matrix, np.eye(3), atol=1e-12)

    def test_recovers_tilt(self):
        R_vi = Rotation3.exp([0.2, -0.1, 0.0]).matrix
        # body at rest, camera = body, visual frame = inertial frame rotated by R_vi
        accel = R_vi.T @ (R_vi @ np.array([0, 0, 9.81]))
        g = gravity_from_accel(accel, R_vi, RigidTransform.identity())
        assert_allclose(g.up(), R_vi @ [0, 0, 1], atol=1e-12)


class TestImuData:
    def test_increasing_timestamps(self):
        with pytest.raises(ImuDataError):
            ImuData([0.0, 0.0], np.zeros((2, 3)), np.zeros((2, 3)))

    def test_between_interpolates_endpoints(self):
        t = np.arange(11) * 0.1
        d = ImuData(t, np.outer(t, [1, 0, 0]), np.zeros((11, 3)))
        ms = d.between(0.05, 0.45)
        assert ms[0].timestamp == pytest.approx(0.05) and ms[-1].timestamp == pytest.approx(0.45)
        assert_allclose(ms[0].gyro, [0.05, 0, 0])
        with pytest.raises(ImuDataError):
            d.between(0.5, 0.2)
        with pytest.raises(ImuDataError):
            d.sample(2.0)

    def test_gap_detected(self):
        t = np.r_[np.arange(10) * 0.01, 1.0 + np.arange(10) * 0.01]
        d = ImuData(t, np.zeros((20, 3)), np.zeros((20, 3)))
        with pytest.raises(ImuDataError):
            d.between(0.0, 1.05)

    def test_noise_params_validated(self):
        with pytest.raises(ValueError):
            ImuNoiseParams(gyro_noise=0.0)
