"""Sliding-window visual-inertial bundle adjustment with a staged IMU initializer.

The main graph holds the active keyframes (poses in the visual frame V,
affine brightness, inverse depths and, once initialized, velocities and
biases), plus the scale and gravity rotation linking V to the metric inertial
frame. Each keyframe step:

1. merges the result of the initializer job started after the previous step;
2. inserts the keyframe and its points, then runs Levenberg-Marquardt with
   the dynamic photometric weight fixed for the step;
3. marginalizes keyframes chosen by the window heuristic, feeding the
   linearized visual factors to the delayed graph;
4. checks for marginalization replacement and schedules the initializer.

Initializer phases: ``no_imu`` (coarse inertial-only fits on fixed poses)
-> ``coarse_ready`` -> ``initialized`` (pose-graph BA on the delayed graph,
prior installed) -> ``reinitialized`` once the scale variance is small enough.
"""
from __future__ import annotations

import enum
import logging
import math
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .delayed import DelayedGraph, PgbaGraph, populate_with_imu, readvance_pgba
from .graph import (
    GRAVITY_KEY,
    SCALE_KEY,
    DivergedError,
    FactorGraph,
    Key,
    LMConfig,
    PriorFactor,
    ResidualFactor,
    UnobservableError,
    Values,
    affine_key,
    bias_key,
    idepth_key,
    marginal_covariance,
    pose_key,
    solve_lm,
    vel_key,
)
from .imu import (
    BiasRandomWalkFactor,
    ImuData,
    ImuFactor,
    ImuNoiseParams,
    ImuState,
    PreintegratedImu,
    omega_transform,
    predict,
    preintegrate,
)
from .lie import GravityRotation, RigidTransform, hat
from .marginalization import MarginalizationPrior, marginalize_frame
from .photometric import (
    PhotometricFactor,
    PinholeCamera,
    dynamic_weight,
    photometric_rms,
    select_marginalization_victim,
)

log = logging.getLogger(__name__)

SHARED_BIAS = -1  # bias index used by the coarse initializer


class Phase(str, enum.Enum):
    NO_IMU = "no_imu"
    COARSE_READY = "coarse_ready"
    INITIALIZED = "initialized"
    REINITIALIZED = "reinitialized"


class TrackingLostError(RuntimeError):
    """Bundle adjustment diverged."""


@dataclass
class PipelineConfig:
    """Back-end settings.

    ``theta_init`` and ``theta_reinit`` threshold the marginal variance of
    ``log(s)``, i.e. the relative scale variance. An absolute variance would
    shrink with the estimate itself and pass when a degenerate fit drives
    the scale towards zero.
    """

    window: int = 8
    delay: int = 100
    photometric_lambda: float = 1.0
    weight_theta: float = 8.0
    theta_init: float = 0.5**2
    theta_reinit: float = 0.02**2
    theta_s: float = 1.02
    theta_lost: float = 0.5
    min_init_frames: int = 5
    ba_iterations: int = 6
    coarse_iterations: int = 30
    pgba_iterations: int = 30
    first_pose_information: float = 1e8
    scale_gauge_information: float = 1e8
    first_affine_information: float = 1e8
    affine_information: tuple = (1.0, 1e-2)
    gravity_prior_sigma: float = 1.0
    coarse_bias_sigma: tuple = (0.01, 0.1)
    use_imu: bool = True
    threaded: bool = False
    replacement: bool = True
    imu_noise: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PipelineConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline options: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def noise_params(self) -> ImuNoiseParams:
        return ImuNoiseParams(**self.imu_noise)


class ScaleGaugeFactor(ResidualFactor):
    """Fixes the visual-frame scale: ``r = |t_j - t_i| - distance``."""

    visual = True

    def __init__(self, i: int, j: int, distance: float, information: float = 1e8):
        super().__init__([pose_key(i), pose_key(j)], information)
        self.distance = float(distance)

    def evaluate(self, values, jacobians=True):
        ti = values[self.keys[0]].translation
        tj = values[self.keys[1]].translation
        d = tj - ti
        n = float(np.linalg.norm(d))
        r = np.array([n - self.distance])
        if not jacobians:
            return r, None
        u = d / max(n, 1e-12)
        Jj = np.hstack([-u @ hat(tj), u])[None, :]
        Ji = -np.hstack([-u @ hat(ti), u])[None, :]
        return r, [Ji, Jj]


@dataclass
class KeyframeRecord:
    """Latest estimate of a keyframe (frozen once it is marginalized)."""

    frame: int
    timestamp: float
    pose: RigidTransform
    affine: np.ndarray
    velocity: np.ndarray | None = None
    bias: np.ndarray | None = None
    marginalized: bool = False


@dataclass
class CoarseResult:
    values: Values
    frames: list
    scale: float
    gravity: GravityRotation
    scale_variance: float  # of log(s)
    converged: bool


@dataclass
class PgbaResult:
    values: Values
    prior: MarginalizationPrior | None
    scale: float
    gravity: GravityRotation
    scale_variance: float  # of log(s)
    frames: list
    imu_pairs: frozenset
    energy: float


@dataclass
class InitializerOutcome:
    """What an initializer job hands back at the next keyframe boundary."""

    kind: str  # "coarse" or "pgba"
    coarse: CoarseResult | None = None
    pgba: PgbaResult | None = None
    error: str | None = None
    seconds: float = 0.0


@dataclass
class Snapshot:
    """Immutable inputs of an initializer job."""

    step: int
    phase: Phase
    delayed: DelayedGraph
    records: dict
    preints: dict
    values: Values
    window: list
    gauge_factors: list


@dataclass
class TimelineRow:
    frame: int
    timestamp: float
    phase: str
    scale: float
    scale_variance: float  # of log(s)
    window: int
    prior_keys: int
    event: str = ""


def coarse_imu_init(frames: Sequence[int], poses: Mapping[int, RigidTransform],
                    preints: Mapping[tuple, PreintegratedImu], T_ci: RigidTransform,
                    noise: ImuNoiseParams, config: PipelineConfig) -> CoarseResult:
    """Inertial-only fit with fixed visual poses and one shared bias.

    Gravity starts from the mean accelerometer reading over the first
    keyframe interval, scale at 1, bias and velocities at 0.

    Raises:
        ValueError: with fewer than two keyframes.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("coarse initialization needs at least two keyframes")
    first = preints[(frames[0], frames[1])]
    up = poses[frames[0]].R @ T_ci.R @ (first.dv / first.dt)
    gravity = GravityRotation.from_up(up)
    graph = FactorGraph()
    values = Values()
    values[SCALE_KEY] = 1.0
    values[GRAVITY_KEY] = gravity
    values[bias_key(SHARED_BIAS)] = np.zeros(6)
    sg, sa = config.coarse_bias_sigma
    graph.add(PriorFactor(bias_key(SHARED_BIAS), np.zeros(6),
                          np.diag(np.r_[np.full(3, sg**-2), np.full(3, sa**-2)])))
    for f in frames:
        values[pose_key(f)] = poses[f]
        values[vel_key(f)] = np.zeros(3)
    for i, j in zip(frames[:-1], frames[1:]):
        graph.add(ImuFactor(i, j, preints[(i, j)], T_ci, bias_index=SHARED_BIAS))
    fixed = [pose_key(f) for f in frames]
    res = solve_lm(graph, values, LMConfig(max_iterations=config.coarse_iterations), fixed=fixed)
    s = float(res.values[SCALE_KEY])
    try:
        var = float(marginal_covariance(graph, res.values, SCALE_KEY, fixed=fixed)[0, 0])
    except UnobservableError:
        var = math.inf
    return CoarseResult(res.values, frames, s, res.values[GRAVITY_KEY], var, res.converged)


def gather_values(snapshot: Snapshot, fallback: Mapping[Key, object] | None = None) -> Values:
    """Values for every alive delayed-graph frame (main estimates win)."""
    out = Values()
    active = set(snapshot.window)
    fallback = fallback or {}
    for f in snapshot.delayed.alive():
        rec = snapshot.records[f]
        for key, stored in ((pose_key(f), rec.pose), (affine_key(f), rec.affine),
                            (vel_key(f), rec.velocity), (bias_key(f), rec.bias)):
            if f in active and key in snapshot.values:
                out[key] = snapshot.values[key]
            elif stored is not None:
                out[key] = stored
            elif key in fallback:
                out[key] = fallback[key]
    for key in (SCALE_KEY, GRAVITY_KEY):
        if key in snapshot.values:
            out[key] = snapshot.values[key]
        elif key in fallback:
            out[key] = fallback[key]
    return out


def run_pgba(snapshot: Snapshot, start: Values, T_ci: RigidTransform, noise: ImuNoiseParams,
             config: PipelineConfig) -> PgbaResult:
    """Populate the delayed graph with inertial factors, optimize and readvance.

    Raises:
        DivergedError: if the optimization fails.
        UnobservableError: if the scale has no marginal covariance.
    """
    pgba = populate_with_imu(snapshot.delayed, snapshot.preints, start, T_ci, noise,
                             extra_factors=snapshot.gauge_factors)
    res = solve_lm(pgba.graph, pgba.values, LMConfig(max_iterations=config.pgba_iterations))
    s = float(res.values[SCALE_KEY])
    var = float(marginal_covariance(pgba.graph, res.values, SCALE_KEY)[0, 0])
    prior = readvance_pgba(snapshot.delayed, pgba, res.values, stamp=snapshot.step)
    return PgbaResult(res.values, prior, s, res.values[GRAVITY_KEY], var,
                      pgba.imu_frames, pgba.imu_pairs, res.energy)


def initializer_job(snapshot: Snapshot, T_ci: RigidTransform, noise: ImuNoiseParams,
                    config: PipelineConfig) -> InitializerOutcome:
    """Coarse init (+PGBA when it passes) or a reinitializing PGBA."""
    t0 = time.perf_counter()
    out = InitializerOutcome("pgba")
    try:
        fallback: dict = {}
        if snapshot.phase == Phase.NO_IMU:
            frames = sorted(snapshot.records)[-config.delay:]
            poses = {f: (snapshot.values[pose_key(f)] if f in snapshot.window else snapshot.records[f].pose)
                     for f in frames}
            coarse = coarse_imu_init(frames, poses, snapshot.preints, T_ci, noise, config)
            out = InitializerOutcome("coarse", coarse=coarse)
            if not (coarse.scale_variance < config.theta_init):
                return out
            bias = coarse.values[bias_key(SHARED_BIAS)]
            for f in snapshot.records:
                fallback[vel_key(f)] = coarse.values.get(vel_key(f), np.zeros(3))
                fallback[bias_key(f)] = bias
            fallback[SCALE_KEY] = coarse.scale
            fallback[GRAVITY_KEY] = coarse.gravity
        start = gather_values(snapshot, fallback)
        out.pgba = run_pgba(snapshot, start, T_ci, noise, config)
    except (DivergedError, UnobservableError, np.linalg.LinAlgError) as exc:
        out.error = f"{type(exc).__name__}: {exc}"
    finally:
        out.seconds = time.perf_counter() - t0
    return out


def replacement_allowed(old_pairs, new_pairs, theta_lost: float = 0.5) -> bool:
    """True unless more than ``theta_lost`` of the old prior's inertial factors would be lost."""
    old = frozenset(old_pairs)
    if not old:
        return True
    kept = len(old & frozenset(new_pairs)) / len(old)
    return kept >= 1.0 - theta_lost


def scale_ratio(s: float, s_fej: float) -> float:
    return max(s, s_fej) / min(s, s_fej)


class VioPipeline:
    """Main sliding-window estimator.

    Args:
        config: Back-end settings.
        camera: Pinhole intrinsics (used by the photometric factors).
        T_ci: IMU-to-camera transform (metric).
        imu: IMU samples, or ``None`` for visual-only operation.
    """

    def __init__(self, config: PipelineConfig, camera: PinholeCamera, T_ci: RigidTransform,
                 imu: ImuData | None = None):
        self.config = config
        self.camera = camera
        self.T_ci = T_ci
        self.imu = imu if config.use_imu else None
        self.noise = config.noise_params()
        self.graph = FactorGraph()
        self.values = Values()
        self.prior: MarginalizationPrior | None = None
        self.window: list[int] = []
        self.points: dict[int, PhotometricFactor] = {}
        self.delayed = DelayedGraph(config.delay)
        self.records: dict[int, KeyframeRecord] = {}
        self.preints: dict[tuple, PreintegratedImu] = {}
        self.phase = Phase.NO_IMU
        self.step = 0
        self.first_frame: int | None = None
        self.timeline: list[TimelineRow] = []
        self.blanket_sizes: list[int] = []
        self.marginalized: list[int] = []
        self.events: list[dict] = []
        self.pgba_results: list[PgbaResult] = []
        self.scale_variance = math.nan
        self.timing = {"ba": 0.0, "marginalization": 0.0, "delayed": 0.0, "initializer": 0.0,
                       "replacement": 0.0}
        self._job: Callable[[], InitializerOutcome] | None = None
        self._thread: threading.Thread | None = None
        self._outcome: InitializerOutcome | None = None

    # -- state access ------------------------------------------------------
    @property
    def initialized(self) -> bool:
        return self.phase in (Phase.INITIALIZED, Phase.REINITIALIZED)

    @property
    def scale(self) -> float:
        return float(self.values.get(SCALE_KEY, math.nan))

    @property
    def gravity(self) -> GravityRotation | None:
        return self.values.get(GRAVITY_KEY)

    def full_graph(self) -> FactorGraph:
        g = FactorGraph(self.graph.factors)
        if self.prior is not None:
            g.add(self.prior)
        return g

    def energy(self, values: Values | None = None) -> float:
        return self.full_graph().energy(self.values if values is None else values)

    def photometric_factors(self) -> list[PhotometricFactor]:
        return [f for f in self.graph.factors if isinstance(f, PhotometricFactor)]

    def snapshot(self) -> Snapshot:
        gauge = [f for f in self.graph.factors
                 if isinstance(f, (PriorFactor, ScaleGaugeFactor)) and f.visual]
        return Snapshot(self.step, self.phase, self.delayed.snapshot(),
                        {k: v for k, v in self.records.items()}, dict(self.preints),
                        self.values.copy(), list(self.window), gauge)

    # -- keyframe processing ----------------------------------------------
    def process(self, kf) -> KeyframeRecord:
        """Run one keyframe step for a :class:`~delayvio.simulation.KeyframeInput`.

        Raises:
            TrackingLostError: if bundle adjustment diverges.
        """
        self._merge_initializer()
        self.step += 1
        self._insert(kf)
        t0 = time.perf_counter()
        self._optimize()
        self.timing["ba"] += time.perf_counter() - t0
        self._update_records()
        self._marginalize()
        if self.initialized and self.config.replacement:
            t0 = time.perf_counter()
            self.maybe_replace_marginalization()
            self.timing["replacement"] += time.perf_counter() - t0
        self._log_row(kf.id, kf.timestamp)
        self._schedule_initializer()
        return self.records[kf.id]

    def finish(self) -> None:
        """Wait for and merge a pending initializer job."""
        self._merge_initializer()

    def _insert(self, kf) -> None:
        k = kf.id
        prev = self.window[-1] if self.window else None
        if prev is not None and k <= prev:
            raise ValueError("keyframes must arrive in temporal order")
        if prev is None:
            pose = RigidTransform.identity()
            affine = np.zeros(2)
        else:
            pose = self.values[pose_key(prev)] @ kf.relative_guess
            affine = np.array(self.values[affine_key(prev)], dtype=float)
        self.values[pose_key(k)] = pose
        self.values[affine_key(k)] = affine
        info = self.config.affine_information
        if self.first_frame is None:
            self.first_frame = k
            self.graph.add(PriorFactor(pose_key(k), pose, self.config.first_pose_information * np.eye(6),
                                       visual=True))
            self.graph.add(PriorFactor(affine_key(k), np.zeros(2),
                                       self.config.first_affine_information * np.eye(2), visual=True))
        else:
            self.graph.add(PriorFactor(affine_key(k), np.zeros(2), np.diag(info), visual=True))
        if kf.gauge_distance is not None and self.first_frame != k:
            self.graph.add(ScaleGaugeFactor(self.first_frame, k, kf.gauge_distance,
                                            self.config.scale_gauge_information))
        for pid, obs in kf.new_observations.items():
            if pid in self.points:
                self.points[pid].add_observation(obs)
        for factor, d0 in kf.new_points:
            factor.lam = self.config.photometric_lambda
            self.points[factor.point] = factor
            self.graph.add(factor)
            self.values[idepth_key(factor.point)] = float(d0)
        if self.imu is not None and prev is not None:
            last = max(self.records)
            bias = self.values.get(bias_key(last), np.zeros(6))
            t_prev = self.records[last].timestamp
            pre = preintegrate(self.imu.between(t_prev, kf.timestamp), bias, self.noise)
            self.preints[(last, k)] = pre
            if self.initialized:
                self._add_inertial_frame(last, k, pre)
        self.window.append(k)
        self.delayed.add_frame(k)
        self.records[k] = KeyframeRecord(k, kf.timestamp, pose, affine)

    def _add_inertial_frame(self, i: int, j: int, pre: PreintegratedImu) -> None:
        s, g = self.values[SCALE_KEY], self.values[GRAVITY_KEY]
        Ti = omega_transform(self.values[pose_key(i)], s, g, self.T_ci)
        state = ImuState(Ti, self.values[vel_key(i)], self.values[bias_key(i)])
        pred, _ = predict(pre, state, self.noise.gravity_vector)
        self.values[vel_key(j)] = pred.velocity
        self.values[bias_key(j)] = np.array(self.values[bias_key(i)], dtype=float)
        self.graph.add(ImuFactor(i, j, pre, self.T_ci))
        self.graph.add(BiasRandomWalkFactor(i, j, pre.dt, self.noise))

    def _optimize(self) -> None:
        photo = self.photometric_factors()
        e = photometric_rms(photo, self.values)
        w = dynamic_weight(e, self.config.photometric_lambda, self.config.weight_theta)
        for f in photo:
            f.weight = w
        try:
            res = solve_lm(self.full_graph(), self.values, LMConfig(max_iterations=self.config.ba_iterations))
        except DivergedError as exc:
            raise TrackingLostError(str(exc)) from exc
        self.values = res.values

    def _update_records(self) -> None:
        for f in self.window:
            rec = self.records[f]
            rec.pose = self.values[pose_key(f)]
            rec.affine = np.array(self.values[affine_key(f)], dtype=float)
            if vel_key(f) in self.values:
                rec.velocity = np.array(self.values[vel_key(f)], dtype=float)
                rec.bias = np.array(self.values[bias_key(f)], dtype=float)

    def visible_fractions(self) -> dict[int, float]:
        newest = self.window[-1]
        hosted: dict[int, list] = {f: [] for f in self.window}
        for p in self.points.values():
            if p.host in hosted:
                hosted[p.host].append(newest in p.targets)
        return {f: (sum(v) / len(v) if v else 0.0) for f, v in hosted.items()}

    def _marginalize(self) -> None:
        while True:
            centers = {f: self.values[pose_key(f)].translation for f in self.window}
            victim = select_marginalization_victim(self.window, centers, self.visible_fractions(),
                                                   self.config.window)
            if victim is None:
                return
            self.marginalize(victim)

    def marginalize(self, frame: int) -> None:
        """Remove ``frame`` from the window and record it in the delayed graph."""
        t0 = time.perf_counter()
        res = marginalize_frame(self.graph, self.values, frame, self.prior, self.step)
        t1 = time.perf_counter()
        self.delayed.record_marginalization(frame, res.visual_factors)
        t2 = time.perf_counter()
        self.timing["marginalization"] += t1 - t0
        self.timing["delayed"] += t2 - t1
        self.prior = res.prior
        self.blanket_sizes.append(len(res.blanket))
        self.marginalized.append(frame)
        self.window.remove(frame)
        self.records[frame].marginalized = True
        for kind in ("pose", "affine", "vel", "bias"):
            self.values.pop(Key(kind, frame), None)
        alive = {f for f in self.graph.factors if isinstance(f, PhotometricFactor)}
        for pid in [p for p, f in self.points.items() if f not in alive]:
            del self.points[pid]
            self.values.pop(idepth_key(pid), None)

    # -- initializer ------------------------------------------------------
    def _schedule_initializer(self) -> None:
        if self.imu is None or self._job is not None:
            return
        if self.phase == Phase.REINITIALIZED:
            return
        if self.phase == Phase.NO_IMU and len(self.records) < self.config.min_init_frames:
            return
        snap = self.snapshot()
        cfg, T_ci, noise = self.config, self.T_ci, self.noise

        def job():
            return initializer_job(snap, T_ci, noise, cfg)

        self._job = job
        if self.config.threaded:
            def target():
                self._outcome = job()
            self._thread = threading.Thread(target=target, daemon=True)
            self._thread.start()

    def _merge_initializer(self) -> None:
        if self._job is None:
            return
        if self._thread is not None:
            self._thread.join()
            outcome = self._outcome
            self._thread = None
        else:
            outcome = self._job()
        self._job = None
        self._outcome = None
        self.timing["initializer"] += outcome.seconds
        self.apply_initializer(outcome)

    def apply_initializer(self, outcome: InitializerOutcome) -> None:
        """Install an initializer result (called at a keyframe boundary)."""
        event = {"step": self.step, "kind": outcome.kind, "error": outcome.error}
        if outcome.coarse is not None:
            c = outcome.coarse
            event.update(coarse_scale=c.scale, coarse_variance=c.scale_variance)
            self.scale_variance = c.scale_variance
            if c.scale_variance < self.config.theta_init:
                self.phase = Phase.COARSE_READY
        p = outcome.pgba
        if p is None:
            if self.phase == Phase.COARSE_READY:
                self.phase = Phase.NO_IMU  # PGBA failed: discard
            self.events.append(event)
            return
        event.update(pgba_scale=p.scale, pgba_variance=p.scale_variance,
                     pgba_frames=list(p.frames), gravity_up=p.gravity.up().tolist())
        self.events.append(event)
        if self.phase == Phase.NO_IMU:
            return
        self.scale_variance = p.scale_variance
        self.pgba_results.append(p)
        self._install_pgba(p)
        self.phase = Phase.REINITIALIZED if p.scale_variance < self.config.theta_reinit \
            else Phase.INITIALIZED

    def _install_pgba(self, p: PgbaResult) -> None:
        self.prior = p.prior
        self.values[SCALE_KEY] = p.values[SCALE_KEY]
        self.values[GRAVITY_KEY] = p.values[GRAVITY_KEY]
        for f in self.window:
            self.values[vel_key(f)] = p.values[vel_key(f)]
            self.values[bias_key(f)] = p.values[bias_key(f)]
        for f in p.frames:
            rec = self.records[f]
            if rec.marginalized:
                rec.velocity = np.array(p.values[vel_key(f)], dtype=float)
                rec.bias = np.array(p.values[bias_key(f)], dtype=float)
        self.graph.remove([f for f in self.graph.factors
                           if isinstance(f, (ImuFactor, BiasRandomWalkFactor))
                           or (isinstance(f, PriorFactor) and f.keys[0] == GRAVITY_KEY)])
        for i, j in zip(self.window[:-1], self.window[1:]):
            if (i, j) in self.preints:
                pre = self.preints[(i, j)]
                self.graph.add(ImuFactor(i, j, pre, self.T_ci))
                self.graph.add(BiasRandomWalkFactor(i, j, pre.dt, self.noise))
        self.graph.add(PriorFactor(GRAVITY_KEY, p.values[GRAVITY_KEY],
                                   self.config.gravity_prior_sigma**-2 * np.eye(2)))
        self._update_records()

    # -- marginalization replacement --------------------------------------
    def rebuild_prior(self) -> tuple[MarginalizationPrior | None, PgbaGraph, Values]:
        """Readvance the delayed graph with inertial factors at the current estimates."""
        snap = self.snapshot()
        vals = gather_values(snap)
        pgba = populate_with_imu(self.delayed, self.preints, vals, self.T_ci, self.noise)
        prior = readvance_pgba(self.delayed, pgba, pgba.values, stamp=self.step)
        return prior, pgba, vals

    def maybe_replace_marginalization(self) -> bool:
        """Swap the prior for a rebuilt one when the scale moved away from its first estimate."""
        if self.prior is None or SCALE_KEY not in self.prior.keys:
            return False
        s, s_fej = self.scale, float(self.prior.fej[SCALE_KEY])
        ratio = scale_ratio(s, s_fej)
        if not ratio > self.config.theta_s:
            return False
        new, _, _ = self.rebuild_prior()
        event = {"step": self.step, "kind": "replacement", "ratio": ratio,
                 "old_pairs": len(self.prior.imu_pairs)}
        if new is None or not replacement_allowed(self.prior.imu_pairs, new.imu_pairs,
                                                  self.config.theta_lost):
            event["applied"] = False
            self.events.append(event)
            return False
        event.update(applied=True, new_pairs=len(new.imu_pairs))
        self.events.append(event)
        self.prior = new
        return True

    # -- outputs -----------------------------------------------------------
    def _log_row(self, frame: int, timestamp: float) -> None:
        self.timeline.append(TimelineRow(frame, timestamp, self.phase.value, self.scale,
                                         self.scale_variance, len(self.window),
                                         len(self.prior.keys) if self.prior else 0))

    def visual_trajectory(self) -> tuple[np.ndarray, list[RigidTransform]]:
        """Latest camera-pose estimates in the visual frame, per keyframe."""
        ids = sorted(self.records)
        return (np.array([self.records[f].timestamp for f in ids]),
                [self.records[f].pose for f in ids])

    def metric_trajectory(self) -> tuple[np.ndarray, list[RigidTransform]]:
        """IMU poses in the inertial frame using the current scale and gravity.

        Raises:
            RuntimeError: before initialization.
        """
        if not self.initialized:
            raise RuntimeError("metric trajectory needs an initialized scale")
        t, poses = self.visual_trajectory()
        s, g = self.scale, self.gravity
        return t, [omega_transform(P, s, g, self.T_ci) for P in poses]


@dataclass
class RunResult:
    pipeline: VioPipeline
    frames_processed: int
    lost: bool
    seconds: float


def run_frontend(frontend, config: PipelineConfig, imu: ImuData | None, T_ci: RigidTransform,
                 camera: PinholeCamera, max_frames: int | None = None,
                 stop: Callable[[VioPipeline], bool] | None = None) -> RunResult:
    """Feed keyframes from ``frontend`` into a new pipeline.

    Args:
        stop: Optional predicate checked after every keyframe; the run ends early
            when it returns True.
    """
    pipe = VioPipeline(config, camera, T_ci, imu)
    n = len(frontend) if max_frames is None else min(max_frames, len(frontend))
    t0 = time.perf_counter()
    lost = False
    done = 0
    for k in range(n):
        active_points = list(pipe.points)
        kf = frontend.keyframe(k, list(pipe.window), active_points)
        try:
            pipe.process(kf)
        except TrackingLostError as exc:
            log.warning("tracking lost at keyframe %d: %s", k, exc)
            lost = True
            break
        done += 1
        if stop is not None and stop(pipe):
            break
    if not lost:
        pipe.finish()
    return RunResult(pipe, done, lost, time.perf_counter() - t0)
