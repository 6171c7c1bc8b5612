"""Trajectory simulator with analytic IMU data and a synthetic photometric scene.

The body (IMU) pose is ``R(t) = R0 Exp(theta(t))``, ``p(t)`` in a gravity
aligned world frame. Trajectories are chains of segments whose position and
rotation-vector functions have closed-form first and second derivatives, so
IMU readings are exact: gyro ``Jr(theta) theta'`` and accelerometer
``R^T (p'' - g)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .imu import ImuData, ImuNoiseParams
from .lie import RigidTransform, so3_exp, so3_right_jacobian
from .photometric import (
    PATTERN,
    PatchObservation,
    PhotometricFactor,
    PinholeCamera,
    QuadraticTexture,
    homography_inverse,
)

GRAVITY = np.array([0.0, 0.0, -9.81])
# IMU x forward, camera z forward: camera-from-IMU rotation.
CAMERA_FROM_IMU_R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


class ConfigError(ValueError):
    """Invalid simulation configuration."""


@dataclass
class Segment:
    """One piece of a trajectory.

    Kinds:
        ``sinusoid``: ``p = vel t + amp sin(2 pi freq t + phase)`` per axis and
        ``theta = rot_amp sin(2 pi rot_freq t + rot_phase)``.
        ``constant_velocity``: ``p = vel t``, constant orientation.
        ``arc``: horizontal circle of ``radius`` at yaw rate ``rate``.
    """

    kind: str
    duration: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sinusoid", "constant_velocity", "arc"):
            raise ConfigError(f"unknown segment kind {self.kind!r}")
        if not self.duration > 0:
            raise ConfigError("segment duration must be positive")

    def _vec(self, name, default=0.0):
        v = np.asarray(self.params.get(name, default), dtype=float)
        return np.broadcast_to(v, (3,)).copy()

    def evaluate(self, tau: np.ndarray):
        """Local ``(p, dp, ddp, th, dth, ddth)``, each of shape ``(n, 3)``."""
        tau = np.asarray(tau, dtype=float)[:, None]
        z = np.zeros((tau.shape[0], 3))
        if self.kind == "constant_velocity":
            v = self._vec("vel")
            return v * tau, v + z, z.copy(), z.copy(), z.copy(), z.copy()
        if self.kind == "arc":
            r = float(self.params["radius"])
            w = float(self.params["rate"])
            c, s = np.cos(w * tau[:, 0]), np.sin(w * tau[:, 0])
            p = np.stack([r * s, r * (1 - c), 0 * s], axis=1)
            dp = np.stack([r * w * c, r * w * s, 0 * s], axis=1)
            ddp = np.stack([-r * w * w * s, r * w * w * c, 0 * s], axis=1)
            th = np.stack([0 * s, 0 * s, w * tau[:, 0]], axis=1)
            dth = np.stack([0 * s, 0 * s, w + 0 * s], axis=1)
            return p, dp, ddp, th, dth, z.copy()
        v = self._vec("vel")
        A, f, ph = self._vec("amp"), self._vec("freq"), self._vec("phase")
        B, g, ps = self._vec("rot_amp"), self._vec("rot_freq"), self._vec("rot_phase")
        wa, wr = 2 * math.pi * f, 2 * math.pi * g
        arg, argr = wa * tau + ph, wr * tau + ps
        p = v * tau + A * np.sin(arg)
        dp = v + A * wa * np.cos(arg)
        ddp = -A * wa * wa * np.sin(arg)
        th = B * np.sin(argr)
        dth = B * wr * np.cos(argr)
        ddth = -B * wr * wr * np.sin(argr)
        return p, dp, ddp, th, dth, ddth


class Trajectory:
    """Chain of segments joined with C^2 continuity.

    Raises:
        ConfigError: if velocity, acceleration, angular rate or its derivative
            jump at a join.
    """

    def __init__(self, segments: Sequence[Segment], R0: np.ndarray | None = None,
                 p0: np.ndarray | None = None, join_tol: float = 1e-6):
        if not segments:
            raise ConfigError("trajectory needs at least one segment")
        self.segments = list(segments)
        self.R0 = np.eye(3) if R0 is None else np.asarray(R0, float)
        self.starts = np.concatenate([[0.0], np.cumsum([s.duration for s in self.segments])])
        self.duration = float(self.starts[-1])
        self.p_off, self.th_off = [], []
        p_end = np.zeros(3) if p0 is None else np.asarray(p0, float)
        th_end = np.zeros(3)
        prev = None
        for k, seg in enumerate(self.segments):
            p, dp, ddp, th, dth, ddth = seg.evaluate(np.array([0.0]))
            if prev is not None:
                for name, a, b in zip(("velocity", "acceleration", "angular rate", "angular acceleration"),
                                      prev, (dp[0], ddp[0], dth[0], ddth[0])):
                    if np.max(np.abs(a - b)) > join_tol:
                        raise ConfigError(f"{name} discontinuous at join {k} ({a} vs {b})")
            self.p_off.append(p_end - p[0])
            self.th_off.append(th_end - th[0])
            pe, dpe, ddpe, the, dthe, ddthe = seg.evaluate(np.array([seg.duration]))
            p_end = pe[0] + self.p_off[-1]
            th_end = the[0] + self.th_off[-1]
            prev = (dpe[0], ddpe[0], dthe[0], ddthe[0])

    def _eval(self, t: np.ndarray):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.clip(np.searchsorted(self.starts, t, side="right") - 1, 0, len(self.segments) - 1)
        out = [np.zeros((len(t), 3)) for _ in range(6)]
        for k in np.unique(idx):
            m = idx == k
            vals = self.segments[k].evaluate(t[m] - self.starts[k])
            for o, v in zip(out, vals):
                o[m] = v
            out[0][m] += self.p_off[k]
            out[3][m] += self.th_off[k]
        return out

    def pose(self, t: float) -> RigidTransform:
        p, _, _, th, _, _ = self._eval(np.array([t]))
        return RigidTransform.from_rt(self.R0 @ so3_exp(th[0]), p[0])

    def states(self, t: np.ndarray):
        """World poses, velocities, body rates and specific forces at times ``t``."""
        p, dp, ddp, th, dth, _ = self._eval(t)
        Rs = np.stack([self.R0 @ so3_exp(x) for x in th])
        gyro = np.stack([so3_right_jacobian(x) @ y for x, y in zip(th, dth)])
        accel = np.einsum("nji,nj->ni", Rs, ddp - GRAVITY)
        return Rs, p, dp, gyro, accel


@dataclass
class SimConfig:
    """Simulation settings (JSON-serializable)."""

    seed: int = 0
    duration: float = 60.0
    imu_rate: float = 200.0
    keyframe_interval: float = 0.5
    scale: float = 2.0
    segments: list = field(default_factory=lambda: [default_excitation(60.0)])
    imu_noise: dict = field(default_factory=dict)
    noiseless_imu: bool = False
    initial_gyro_bias: float = 2e-3
    initial_accel_bias: float = 2e-2
    pixel_noise: float = 0.7
    points_per_keyframe: int = 8
    depth_range: tuple = (3.0, 8.0)
    camera: dict = field(default_factory=lambda: asdict(PinholeCamera.default()))
    imu_offset: tuple = (0.02, -0.01, 0.03)
    pose_guess_rot_noise: float = 0.003
    pose_guess_trans_noise: float = 0.01
    idepth_init_noise: float = 0.05
    affine_a_sigma: float = 0.05
    affine_b_sigma: float = 2.0
    exposure_range: tuple = (0.8, 1.2)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SimConfig:
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown simulation options: {sorted(unknown)}")
        cfg = cls(**known)
        if "segments" not in data:
            cfg.segments = [default_excitation(cfg.duration)]
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> SimConfig:
        data = json.loads(Path(path).read_text())
        return cls.from_dict(data.get("simulation", data))

    def to_dict(self) -> dict:
        return asdict(self)

    def noise_params(self) -> ImuNoiseParams:
        return ImuNoiseParams(**self.imu_noise)

    def build_segments(self) -> list[Segment]:
        segs = []
        for s in self.segments:
            if isinstance(s, Segment):
                segs.append(s)
            else:
                segs.append(Segment(s["kind"], float(s["duration"]), dict(s.get("params", {}))))
        total = sum(s.duration for s in segs)
        if total + 1e-9 < self.duration:
            raise ConfigError(f"segments cover {total}s but duration is {self.duration}s")
        return segs


def default_excitation(duration: float) -> dict:
    """Sinusoidal motion with lateral, vertical and rotational excitation."""
    return {
        "kind": "sinusoid",
        "duration": duration,
        "params": {
            "amp": [0.5, 0.8, 0.4],
            "freq": [0.25, 0.2, 0.3],
            "phase": [0.0, 1.0, 2.0],
            # rotation periods of a few seconds separate tilt from accelerometer bias
            # within the first keyframes
            "rot_amp": [0.2, 0.2, 0.24],
            "rot_freq": [0.5, 0.4, 0.3],
            "rot_phase": [0.3, 0.5, 0.0],
        },
    }


def constant_velocity(duration: float, vel=(0.0, 0.3, 0.0)) -> dict:
    return {"kind": "constant_velocity", "duration": duration, "params": {"vel": list(vel)}}


@dataclass
class Landmark:
    id: int
    host: int
    pixel: np.ndarray
    idepth: float  # metric, host camera frame
    texture: QuadraticTexture


@dataclass
class SimulationResult:
    config: SimConfig
    imu: ImuData
    keyframe_times: np.ndarray
    T_wi: list  # true IMU poses (world) at keyframes
    T_wc: list  # true camera poses (world) at keyframes
    velocities: np.ndarray
    biases: np.ndarray  # (n_kf, 6) true bias at keyframes
    exposure: np.ndarray
    affine: np.ndarray  # (n_kf, 2) true (a, b)
    T_ci: RigidTransform
    camera: PinholeCamera

    @property
    def scale(self) -> float:
        return self.config.scale

    def true_up_in_visual(self) -> np.ndarray:
        """World up direction expressed in the first camera frame."""
        return self.T_wc[0].R.T @ np.array([0.0, 0.0, 1.0])

    def visual_pose(self, k: int) -> RigidTransform:
        """True camera pose of keyframe ``k`` in the visual frame (first camera, scaled)."""
        rel = self.T_wc[0].inverse() @ self.T_wc[k]
        return RigidTransform(rel.rotation, rel.translation / self.scale)


def simulate(config: SimConfig) -> SimulationResult:
    """Generate IMU data and keyframe ground truth. Deterministic in ``config.seed``."""
    segs = config.build_segments()
    traj = Trajectory(segs)
    rng = np.random.default_rng([config.seed, 7])
    noise = config.noise_params()
    dt = 1.0 / config.imu_rate
    n = int(round(config.duration * config.imu_rate)) + 1
    t = np.arange(n) * dt
    Rs, p, v, gyro, accel = traj.states(t)
    bias = np.zeros((n, 6))
    bias[0, :3] = rng.normal(scale=config.initial_gyro_bias, size=3)
    bias[0, 3:] = rng.normal(scale=config.initial_accel_bias, size=3)
    if not config.noiseless_imu:
        walk = rng.normal(size=(n - 1, 6)) * math.sqrt(dt)
        walk[:, :3] *= noise.gyro_walk
        walk[:, 3:] *= noise.accel_walk
        bias[1:] = bias[0] + np.cumsum(walk, axis=0)
        white = rng.normal(size=(n, 6)) / math.sqrt(dt)
        white[:, :3] *= noise.gyro_noise
        white[:, 3:] *= noise.accel_noise
    else:
        bias[1:] = bias[0]
        white = np.zeros((n, 6))
    gyro_m = gyro + bias[:, :3] + white[:, :3]
    accel_m = accel + bias[:, 3:] + white[:, 3:]
    imu = ImuData(t, gyro_m, accel_m)

    step = int(round(config.keyframe_interval * config.imu_rate))
    kf_idx = np.arange(0, n, step)
    T_ci = RigidTransform.from_rt(CAMERA_FROM_IMU_R, np.asarray(config.imu_offset, float))
    T_ic = T_ci.inverse()
    T_wi = [RigidTransform.from_rt(Rs[i], p[i]) for i in kf_idx]
    T_wc = [T @ T_ic for T in T_wi]
    nk = len(kf_idx)
    exposure = rng.uniform(*config.exposure_range, size=nk)
    affine = np.column_stack([rng.normal(scale=config.affine_a_sigma, size=nk),
                              rng.normal(scale=config.affine_b_sigma, size=nk)])
    affine[0] = 0.0
    exposure[0] = 1.0
    cam = PinholeCamera(**config.camera)
    return SimulationResult(config, imu, t[kf_idx], T_wi, T_wc, v[kf_idx], bias[kf_idx],
                            exposure, affine, T_ci, cam)


@dataclass
class KeyframeInput:
    """What the front-end hands to the back-end for a new keyframe."""

    id: int
    timestamp: float
    exposure: float
    relative_guess: RigidTransform  # previous keyframe to this one, visual frame
    new_points: list  # (PhotometricFactor, initial inverse depth)
    new_observations: dict  # point id -> PatchObservation in this keyframe
    gauge_distance: float | None = None  # baseline to the first keyframe (second keyframe only)


class SyntheticFrontend:
    """Produces keyframes with photometric points from a simulation.

    New points are observed in all active frames where they are visible, and
    active points are observed in the new keyframe when visible, mimicking a
    direct sparse front-end after point activation. A point that no other
    active keyframe sees yet waits until one does (or its host leaves).
    """

    def __init__(self, sim: SimulationResult, lam: float = 1.0):
        self.sim = sim
        self.cfg = sim.config
        self.camera = sim.camera
        self.landmarks: dict[int, Landmark] = {}
        self.rng = np.random.default_rng([self.cfg.seed, 11])
        self.lam = lam
        self.immature: list[Landmark] = []  # not yet seen by a second keyframe
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.sim.keyframe_times)

    def _relative(self, host: int, target: int):
        T = self.sim.T_wc[target].inverse() @ self.sim.T_wc[host]
        return T.R, T.t

    def visible(self, lm: Landmark, frame: int) -> bool:
        R, t = self._relative(lm.host, frame)
        bearings = self.camera.unproject(lm.pixel + PATTERN)
        X = bearings @ R.T + lm.idepth * t
        if np.any(X[:, 2] <= 0.1 * lm.idepth):
            return False
        uv = self.camera.project(X)
        return bool(np.all(self.camera.in_bounds(uv, margin=4.0)))

    def observation(self, lm: Landmark, frame: int) -> PatchObservation:
        R, t = self._relative(lm.host, frame)
        H_inv = homography_inverse(R, t, lm.idepth, self.camera)
        a, b = self.sim.affine[frame]
        gain = self.sim.exposure[frame] * math.exp(a)
        noise = np.random.default_rng([self.cfg.seed, lm.id, frame]).normal(
            scale=self.cfg.pixel_noise, size=8)
        return PatchObservation(frame, H_inv, gain, float(b), noise, float(self.sim.exposure[frame]))

    def _new_landmark(self, host: int) -> Landmark:
        m = 20.0
        px = np.array([self.rng.uniform(m, self.camera.width - m),
                       self.rng.uniform(m, self.camera.height - m)])
        depth = self.rng.uniform(*self.cfg.depth_range)
        lm = Landmark(self._next_id, host, px, 1.0 / depth, QuadraticTexture.random(self.rng))
        self._next_id += 1
        self.landmarks[lm.id] = lm
        return lm

    def _factor(self, lm: Landmark, observations) -> PhotometricFactor:
        a, b = self.sim.affine[lm.host]
        ex = float(self.sim.exposure[lm.host])
        noise = np.random.default_rng([self.cfg.seed, lm.id, lm.host]).normal(
            scale=self.cfg.pixel_noise, size=8)
        intensity = ex * math.exp(a) * lm.texture.value(PATTERN) + b + noise
        return PhotometricFactor(lm.id, lm.host, lm.pixel, intensity, ex, lm.texture,
                                 observations, self.camera, lam=self.lam)

    def keyframe(self, k: int, active_frames: Sequence[int], active_points: Sequence[int]) -> KeyframeInput:
        """Front-end output for keyframe ``k`` given the back-end's active set."""
        sim, cfg = self.sim, self.cfg
        if k == 0:
            rel = RigidTransform.identity()
        else:
            true_rel = sim.T_wc[k - 1].inverse() @ sim.T_wc[k]
            rel = RigidTransform(true_rel.rotation, true_rel.translation / sim.scale)
            nrot = self.rng.normal(scale=cfg.pose_guess_rot_noise, size=3)
            ntr = self.rng.normal(scale=cfg.pose_guess_trans_noise, size=3) / sim.scale
            rel = RigidTransform.exp(np.r_[nrot, ntr]) @ rel
        new_obs = {}
        for pid in active_points:
            lm = self.landmarks[pid]
            if lm.host != k and self.visible(lm, k):
                new_obs[pid] = self.observation(lm, k)
        new_points = []
        active = set(active_frames) | {k}
        waiting, self.immature = self.immature, []
        fresh = [self._new_landmark(k) for _ in range(cfg.points_per_keyframe)]
        for lm in waiting + fresh:
            if lm.host not in active:
                continue
            obs = [self.observation(lm, j) for j in sorted(active) if j != lm.host and self.visible(lm, j)]
            if not obs:
                self.immature.append(lm)
                continue
            d0 = lm.idepth * sim.scale * (1.0 + self.rng.normal(scale=cfg.idepth_init_noise))
            new_points.append((self._factor(lm, obs), max(d0, 1e-3)))
        gauge = None
        if k == 1:
            rel_true = sim.T_wc[0].inverse() @ sim.T_wc[1]
            gauge = float(np.linalg.norm(rel_true.translation)) / sim.scale
        return KeyframeInput(k, float(sim.keyframe_times[k]), float(sim.exposure[k]), rel,
                             new_points, new_obs, gauge)


def write_simulation(sim: SimulationResult, out: str | Path) -> None:
    """Write IMU CSV, ground truth (TUM) and the configuration to ``out``."""
    from .evaluation import write_tum

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ts_ns = np.round(sim.imu.t * 1e9).astype(np.int64)
    header = ("#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],"
              "a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]")
    rows = np.column_stack([ts_ns, sim.imu.gyro, sim.imu.accel])
    np.savetxt(out / "imu.csv", rows, delimiter=",", header=header, comments="",
               fmt=["%d"] + ["%.17g"] * 6)
    write_tum(out / "groundtruth.txt", sim.keyframe_times, sim.T_wi)
    (out / "simulation.json").write_text(json.dumps(sim.config.to_dict(), indent=2, default=list))


def read_imu_csv(path: str | Path) -> ImuData:
    """Read ``timestamp[ns], wx, wy, wz, ax, ay, az`` rows (header lines start with ``#``)."""
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    return ImuData(data[:, 0] * 1e-9, data[:, 1:4], data[:, 4:7])
