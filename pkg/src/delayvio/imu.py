"""IMU preintegration, inertial residuals and the visual-to-inertial frame map.

Preintegration uses midpoint integration. The error state of a preintegrated
measurement is ``(phi, v, p)`` with the rotation error on the right
(``dR_true = dR Exp(phi)``). Bias Jacobians and covariance share the same
linearized recursion so they stay consistent.

The inertial frame ``I`` has its z-axis aligned with gravity; gravity is
``(0, 0, -g)`` there.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .graph import (
    GRAVITY_KEY,
    SCALE_KEY,
    ResidualFactor,
    bias_key,
    pose_key,
    vel_key,
)
from .lie import (
    GravityRotation,
    RigidTransform,
    Rotation3,
    hat,
    so3_exp,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)


class ImuDataError(ValueError):
    """Invalid IMU input (non-increasing timestamps, bad dt, gaps)."""


class DegenerateCovarianceError(np.linalg.LinAlgError):
    """Preintegrated covariance is not invertible."""


@dataclass(frozen=True)
class ImuMeasurement:
    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class ImuNoiseParams:
    """Continuous-time noise densities.

    Defaults are in the range of common MEMS units (EuRoC-like).
    """

    gyro_noise: float = 1.7e-4
    accel_noise: float = 2.0e-3
    gyro_walk: float = 1.9393e-5
    accel_walk: float = 3.0e-3
    gravity: float = 9.81

    def __post_init__(self):
        for name in ("gyro_noise", "accel_noise", "gyro_walk", "accel_walk", "gravity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def gravity_vector(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.gravity])


@dataclass(frozen=True)
class ImuBias:
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> ImuBias:
        v = np.asarray(v, dtype=float)
        return cls(v[:3].copy(), v[3:].copy())


@dataclass
class ImuData:
    """A sequence of IMU samples as arrays (seconds, rad/s, m/s^2)."""

    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        if np.any(np.diff(self.t) <= 0):
            raise ImuDataError("IMU timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t)

    def sample(self, t: float) -> ImuMeasurement:
        """Linearly interpolated sample at time ``t``."""
        if t < self.t[0] - 1e-9 or t > self.t[-1] + 1e-9:
            raise ImuDataError(f"time {t:.6f} outside IMU range")
        i = int(np.searchsorted(self.t, t))
        if i < len(self.t) and abs(self.t[i] - t) < 1e-9:
            return ImuMeasurement(float(self.t[i]), self.gyro[i], self.accel[i])
        if i > 0 and abs(self.t[i - 1] - t) < 1e-9:
            return ImuMeasurement(float(self.t[i - 1]), self.gyro[i - 1], self.accel[i - 1])
        a = (t - self.t[i - 1]) / (self.t[i] - self.t[i - 1])
        return ImuMeasurement(t, (1 - a) * self.gyro[i - 1] + a * self.gyro[i],
                              (1 - a) * self.accel[i - 1] + a * self.accel[i])

    def between(self, t0: float, t1: float) -> list[ImuMeasurement]:
        """Samples covering ``[t0, t1]`` with interpolated end points."""
        if t1 <= t0:
            raise ImuDataError("segment end must be after its start")
        lo = int(np.searchsorted(self.t, t0 + 1e-9))
        hi = int(np.searchsorted(self.t, t1 - 1e-9))
        inner = [ImuMeasurement(float(self.t[k]), self.gyro[k], self.accel[k]) for k in range(lo, hi)]
        out = [self.sample(t0)] + inner + [self.sample(t1)]
        gaps = np.diff([m.timestamp for m in out])
        if len(self.t) > 1 and np.max(gaps) > 10.0 * np.median(np.diff(self.t)):
            raise ImuDataError(f"gap of {np.max(gaps):.3f}s in IMU data")
        return out


@dataclass
class PreintegratedImu:
    """Preintegrated IMU measurement between two keyframes.

    Attributes:
        dt: Total integration time.
        dR, dv, dp: Deltas at the bias linearization point.
        cov: 9x9 covariance of ``(phi, v, p)``.
        bias: Bias linearization point (gyro, accel).
        J_bg, J_ba: 9x3 Jacobians of ``(phi, v, p)`` w.r.t. gyro and accel bias.
    """

    dt: float
    dR: np.ndarray
    dv: np.ndarray
    dp: np.ndarray
    cov: np.ndarray
    bias: np.ndarray
    J_bg: np.ndarray
    J_ba: np.ndarray
    noise: ImuNoiseParams
    last_gyro: np.ndarray
    last_accel: np.ndarray
    start_time: float = 0.0
    num_samples: int = 0

    @classmethod
    def start(cls, first: ImuMeasurement, bias: np.ndarray | ImuBias | None = None,
              noise: ImuNoiseParams | None = None) -> PreintegratedImu:
        if isinstance(bias, ImuBias):
            bias = bias.vector()
        b = np.zeros(6) if bias is None else np.asarray(bias, dtype=float)
        return cls(0.0, np.eye(3), np.zeros(3), np.zeros(3), np.zeros((9, 9)), b.copy(),
                   np.zeros((9, 3)), np.zeros((9, 3)), noise or ImuNoiseParams(),
                   np.asarray(first.gyro, float), np.asarray(first.accel, float),
                   first.timestamp, 1)

    def copy(self) -> PreintegratedImu:
        return replace(self, dR=self.dR.copy(), dv=self.dv.copy(), dp=self.dp.copy(),
                       cov=self.cov.copy(), bias=self.bias.copy(), J_bg=self.J_bg.copy(),
                       J_ba=self.J_ba.copy())

    @property
    def end_time(self) -> float:
        return self.start_time + self.dt

    def _step(self, gyro: np.ndarray, accel: np.ndarray, dt: float) -> None:
        bg, ba = self.bias[:3], self.bias[3:]
        w = 0.5 * (self.last_gyro + gyro) - bg
        a0 = self.last_accel - ba
        a1 = accel - ba
        phi = w * dt
        E = so3_exp(phi)
        Jr = so3_right_jacobian(phi)
        R0 = self.dR
        R1 = R0 @ E
        acc = 0.5 * (R0 @ a0 + R1 @ a1)

        A = np.eye(9)
        A[0:3, 0:3] = E.T
        A_vphi = (-0.5 * R0 @ hat(a0) - 0.5 * R1 @ hat(a1) @ E.T) * dt
        A[3:6, 0:3] = A_vphi
        A[6:9, 0:3] = 0.5 * A_vphi * dt
        A[6:9, 3:6] = np.eye(3) * dt
        Bg = np.zeros((9, 3))
        Bg[0:3] = -Jr * dt
        Bg[3:6] = 0.5 * R1 @ hat(a1) @ Jr * dt * dt
        Bg[6:9] = 0.5 * Bg[3:6] * dt
        Ba = np.zeros((9, 3))
        Ba[3:6] = -0.5 * (R0 + R1) * dt
        Ba[6:9] = 0.5 * Ba[3:6] * dt

        qg = self.noise.gyro_noise**2 / dt
        qa = self.noise.accel_noise**2 / dt
        self.cov = A @ self.cov @ A.T + qg * (Bg @ Bg.T) + qa * (Ba @ Ba.T)
        self.cov = 0.5 * (self.cov + self.cov.T)
        self.J_bg = A @ self.J_bg + Bg
        self.J_ba = A @ self.J_ba + Ba

        self.dp = self.dp + self.dv * dt + 0.5 * acc * dt * dt
        self.dv = self.dv + acc * dt
        self.dR = _orthonormalize(R1)
        self.dt += dt
        self.last_gyro = np.asarray(gyro, float)
        self.last_accel = np.asarray(accel, float)
        self.num_samples += 1

    def integrate(self, measurement: ImuMeasurement, dt: float | None = None) -> PreintegratedImu:
        """Return a new preintegration extended by one sample.

        Raises:
            ImuDataError: if ``dt`` is not positive.
        """
        if dt is None:
            dt = measurement.timestamp - self.end_time
        if not dt > 0:
            raise ImuDataError(f"non-positive dt {dt}")
        out = self.copy()
        out._step(np.asarray(measurement.gyro, float), np.asarray(measurement.accel, float), dt)
        return out

    def deltas(self, bias: np.ndarray | None = None):
        """First-order bias-corrected ``(dR, dv, dp)``."""
        if bias is None:
            return self.dR, self.dv, self.dp
        db = np.asarray(bias, float) - self.bias
        dbg, dba = db[:3], db[3:]
        dR = self.dR @ so3_exp(self.J_bg[0:3] @ dbg)
        dv = self.dv + self.J_bg[3:6] @ dbg + self.J_ba[3:6] @ dba
        dp = self.dp + self.J_bg[6:9] @ dbg + self.J_ba[6:9] @ dba
        return dR, dv, dp

    def compose(self, other: PreintegratedImu) -> PreintegratedImu:
        """Concatenate with a following segment that shares this one's bias point."""
        if not np.allclose(self.bias, other.bias):
            raise ImuDataError("segments must share a bias linearization point")
        RA, vA, pA = self.dR, self.dv, self.dp
        Phi = np.eye(9)
        Phi[0:3, 0:3] = other.dR.T
        Phi[3:6, 0:3] = -RA @ hat(other.dv)
        Phi[6:9, 0:3] = -RA @ hat(other.dp)
        Phi[6:9, 3:6] = np.eye(3) * other.dt
        G = np.zeros((9, 9))
        G[0:3, 0:3] = np.eye(3)
        G[3:6, 3:6] = RA
        G[6:9, 6:9] = RA
        cov = Phi @ self.cov @ Phi.T + G @ other.cov @ G.T
        return PreintegratedImu(
            self.dt + other.dt, _orthonormalize(RA @ other.dR), vA + RA @ other.dv,
            pA + vA * other.dt + RA @ other.dp, 0.5 * (cov + cov.T), self.bias.copy(),
            Phi @ self.J_bg + G @ other.J_bg, Phi @ self.J_ba + G @ other.J_ba, self.noise,
            other.last_gyro, other.last_accel, self.start_time,
            self.num_samples + other.num_samples - 1)


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    return Rotation3.from_matrix(R).matrix


def preintegrate(samples: Sequence[ImuMeasurement], bias=None,
                 noise: ImuNoiseParams | None = None) -> PreintegratedImu:
    """Preintegrate a list of samples; the first sample only seeds the midpoint rule."""
    if len(samples) < 2:
        raise ImuDataError("need at least two samples to preintegrate")
    pre = PreintegratedImu.start(samples[0], bias, noise)
    for m in samples[1:]:
        dt = m.timestamp - pre.end_time
        if not dt > 0:
            raise ImuDataError(f"non-positive dt {dt} at t={m.timestamp}")
        pre._step(np.asarray(m.gyro, float), np.asarray(m.accel, float), dt)
    return pre


@dataclass
class ImuState:
    """Pose of the IMU in the inertial frame, velocity and bias."""

    pose: RigidTransform
    velocity: np.ndarray
    bias: np.ndarray = field(default_factory=lambda: np.zeros(6))


def predict(preint: PreintegratedImu, state: ImuState, gravity: np.ndarray):
    """Propagate ``state`` over the preintegrated interval.

    Returns:
        ``(ImuState, 9x9 covariance)``; the bias is carried over unchanged.
    """
    dR, dv, dp = preint.deltas(state.bias)
    R, p, v = state.pose.R, state.pose.t, state.velocity
    T = preint.dt
    Rj = R @ dR
    vj = v + gravity * T + R @ dv
    pj = p + v * T + 0.5 * gravity * T * T + R @ dp
    return ImuState(RigidTransform.from_rt(Rj, pj), vj, np.array(state.bias, float)), preint.cov.copy()


def imu_residual(preint: PreintegratedImu, state_i: ImuState, state_j: ImuState,
                 gravity: np.ndarray, jacobians: bool = True):
    """Residual ``(r_R, r_v, r_p)`` and Jacobians.

    Jacobians are returned as a dict keyed by ``theta_i, p_i, v_i, bg, ba,
    theta_j, p_j, v_j``; rotations use right perturbations and translations,
    velocities and biases are additive.
    """
    Ri, pi_, vi = state_i.pose.R, state_i.pose.t, state_i.velocity
    Rj, pj, vj = state_j.pose.R, state_j.pose.t, state_j.velocity
    T = preint.dt
    dR, dv, dp = preint.deltas(state_i.bias)
    Q = dR.T @ Ri.T @ Rj
    rR = so3_log(Q)
    a = vj - vi - gravity * T
    c = pj - pi_ - vi * T - 0.5 * gravity * T * T
    rv = Ri.T @ a - dv
    rp = Ri.T @ c - dp
    r = np.concatenate([rR, rv, rp])
    if not jacobians:
        return r, None
    Jri = so3_right_jacobian_inv(rR)
    dbg = state_i.bias[:3] - preint.bias[:3]
    Jb = preint.J_bg[0:3]
    Qbar = preint.dR.T @ Ri.T @ Rj
    Z3 = np.zeros((3, 3))
    J = {
        "theta_i": np.vstack([-Jri @ Rj.T @ Ri, hat(Ri.T @ a), hat(Ri.T @ c)]),
        "p_i": np.vstack([Z3, Z3, -Ri.T]),
        "v_i": np.vstack([Z3, -Ri.T, -Ri.T * T]),
        "bg": np.vstack([-Jri @ Qbar.T @ so3_right_jacobian(-Jb @ dbg) @ Jb,
                         -preint.J_bg[3:6], -preint.J_bg[6:9]]),
        "ba": np.vstack([Z3, -preint.J_ba[3:6], -preint.J_ba[6:9]]),
        "theta_j": np.vstack([Jri, Z3, Z3]),
        "p_j": np.vstack([Z3, Z3, Ri.T]),
        "v_j": np.vstack([Z3, Ri.T, Z3]),
    }
    return r, J


def information(cov: np.ndarray) -> np.ndarray:
    """Inverse of a covariance matrix.

    Raises:
        DegenerateCovarianceError: if ``cov`` is not positive definite.
    """
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError("covariance is not positive definite") from exc
    Linv = np.linalg.inv(L)
    W = Linv.T @ Linv
    return 0.5 * (W + W.T)


def mahalanobis(r: np.ndarray, cov: np.ndarray) -> float:
    """``r^T cov^-1 r`` for vector or scalar ``r``."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    return float(r @ information(cov) @ r)


def imu_energy(preint: PreintegratedImu, state_i: ImuState, state_j: ImuState,
               gravity: np.ndarray):
    """Inertial energy ``r^T Sigma^-1 r`` and its residual Jacobians."""
    r, J = imu_residual(preint, state_i, state_j, gravity)
    return float(r @ information(preint.cov) @ r), r, J


def omega_transform(T_wc: RigidTransform, scale: float, R_VI: GravityRotation,
                    T_ci: RigidTransform, jacobians: bool = False):
    """IMU pose in the inertial frame from a camera pose in the visual frame.

    ``T_wc`` maps camera to the (arbitrarily scaled) visual world frame,
    ``R_VI`` rotates inertial coordinates into visual ones and ``T_ci`` maps
    IMU coordinates to camera coordinates (metric). The result
    ``R_VI^-1 * S(scale) * T_wc * S(scale)^-1 * T_ci`` is a rigid transform.

    With ``jacobians=True`` also returns the 6x6, 6x1 and 6x2 Jacobians of
    ``(delta_theta, delta_p)`` (right rotation perturbation, additive
    position) w.r.t. the pose tangent, ``log(scale)`` and the two gravity
    angles.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    R_IV = R_VI.matrix.T
    M = T_wc.R @ T_ci.R
    q = T_wc.R @ T_ci.t + scale * T_wc.t
    T_wi = RigidTransform.from_rt(R_IV @ M, R_IV @ q)
    if not jacobians:
        return T_wi
    J_pose = np.zeros((6, 6))
    J_pose[0:3, 0:3] = M.T
    J_pose[3:6, 0:3] = -R_IV @ hat(q)
    J_pose[3:6, 3:6] = scale * R_IV
    J_s = np.zeros((6, 1))
    J_s[3:6, 0] = scale * (R_IV @ T_wc.t)
    U = R_VI.tangent_axes()
    J_g = np.zeros((6, 2))
    J_g[0:3] = -M.T @ U
    J_g[3:6] = R_IV @ hat(q) @ U
    return T_wi, J_pose, J_s, J_g


class ImuFactor(ResidualFactor):
    """Inertial factor between successive keyframes ``i`` and ``j``.

    Connects the camera poses (visual frame), velocities (inertial frame),
    bias of ``i``, the scale and the gravity rotation. ``bias_index`` lets
    several factors share one bias variable.
    """

    def __init__(self, i: int, j: int, preint: PreintegratedImu, T_ci: RigidTransform,
                 bias_index: int | None = None):
        b = bias_key(i if bias_index is None else bias_index)
        keys = [pose_key(i), vel_key(i), b, pose_key(j), vel_key(j), SCALE_KEY, GRAVITY_KEY]
        super().__init__(keys, information(preint.cov))
        self.i, self.j = i, j
        self.preint = preint
        self.T_ci = T_ci
        self.gravity = preint.noise.gravity_vector
        self.imu_pairs = frozenset({(i, j)})

    def evaluate(self, values, jacobians=True):
        s = values[SCALE_KEY]
        g = values[GRAVITY_KEY]
        out_i = omega_transform(values[pose_key(self.i)], s, g, self.T_ci, jacobians)
        out_j = omega_transform(values[pose_key(self.j)], s, g, self.T_ci, jacobians)
        Ti = out_i[0] if jacobians else out_i
        Tj = out_j[0] if jacobians else out_j
        si = ImuState(Ti, values[vel_key(self.i)], values[self.keys[2]])
        sj = ImuState(Tj, values[vel_key(self.j)])
        r, J = imu_residual(self.preint, si, sj, self.gravity, jacobians)
        if not jacobians:
            return r, None
        _, Jpi, Jsi, Jgi = out_i
        _, Jpj, Jsj, Jgj = out_j
        Ji = np.hstack([J["theta_i"], J["p_i"]])
        Jj = np.hstack([J["theta_j"], J["p_j"]])
        return r, [
            Ji @ Jpi,
            J["v_i"],
            np.hstack([J["bg"], J["ba"]]),
            Jj @ Jpj,
            J["v_j"],
            Ji @ Jsi + Jj @ Jsj,
            Ji @ Jgi + Jj @ Jgj,
        ]


class BiasRandomWalkFactor(ResidualFactor):
    """``r = b_j - b_i`` with covariance ``density^2 * dt``."""

    def __init__(self, i: int, j: int, dt: float, noise: ImuNoiseParams):
        keys = [bias_key(i), bias_key(j)]
        var = np.r_[np.full(3, noise.gyro_walk**2 * dt), np.full(3, noise.accel_walk**2 * dt)]
        super().__init__(keys, np.diag(1.0 / var))
        self.i, self.j = i, j

    def evaluate(self, values, jacobians=True):
        r = values[self.keys[1]] - values[self.keys[0]]
        if not jacobians:
            return r, None
        return r, [-np.eye(6), np.eye(6)]


def gravity_from_accel(accel_mean_body: np.ndarray, R_wc: np.ndarray, T_ci: RigidTransform,
                       yaw: float = 0.0) -> GravityRotation:
    """Gravity rotation from the mean accelerometer reading of a near-static body.

    The accelerometer measures the up direction in the body frame; rotating it
    into the visual frame gives the inertial z-axis, which fixes roll and pitch.
    """
    up_v = R_wc @ T_ci.R @ np.asarray(accel_mean_body, float)
    return GravityRotation.from_up(up_v, yaw)
