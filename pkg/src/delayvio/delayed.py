"""A second, lagging factor graph for re-deriving marginalization priors.

The delayed graph receives the linearized visual factors produced whenever
the main graph marginalizes a keyframe, but eliminates frames only ``d``
steps later and in the same order. Because nothing has been eliminated yet
for the most recent frames, inertial factors can still be inserted between
them (pose-graph bundle adjustment), after which the graph is *readvanced*
by eliminating the remaining frames to obtain a prior for the main graph.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import (
    AFFINE,
    BIAS,
    GRAVITY,
    POSE,
    SCALE,
    VEL,
    Factor,
    FactorGraph,
    Key,
    StructuralError,
    Values,
)
from .imu import BiasRandomWalkFactor, ImuDataError, ImuFactor, ImuNoiseParams, PreintegratedImu
from .lie import GravityRotation, RigidTransform, Rotation3
from .marginalization import MarginalizationPrior, eliminate, linearize_factor

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
FRAME_KINDS = (POSE, AFFINE, VEL, BIAS)


class DelayedGraph:
    """Visual factors whose frame eliminations lag the main graph by ``delay``.

    Args:
        delay: Number of frames already marginalized in the main graph that
            are kept un-eliminated here.
    """

    def __init__(self, delay: int = 100):
        if delay < 1:
            raise ValueError("delay must be positive")
        self.delay = delay
        self.factors: list[MarginalizationPrior] = []
        self.prior: MarginalizationPrior | None = None
        self.pending: list[int] = []
        self.eliminated: list[int] = []
        self.frames: list[int] = []
        self.blanket_sizes: list[int] = []

    # -- bookkeeping -----------------------------------------------------
    def add_frame(self, frame: int) -> None:
        if self.frames and frame <= self.frames[-1]:
            raise StructuralError("frames must be added in temporal order")
        self.frames.append(frame)

    def alive(self) -> list[int]:
        gone = set(self.eliminated)
        return [f for f in self.frames if f not in gone]

    def record_marginalization(self, frame: int,
                               factors: Iterable[MarginalizationPrior] = ()) -> int | None:
        """Note that the main graph marginalized ``frame``.

        ``factors`` are the linearized visual factors the main graph produced
        for this step. Returns the frame eliminated here, if the queue overflowed.

        Raises:
            StructuralError: if ``frame`` was already recorded.
        """
        if frame in self.pending or frame in self.eliminated:
            raise StructuralError(f"frame {frame} was already marginalized")
        if frame not in self.frames:
            raise StructuralError(f"frame {frame} is unknown to the delayed graph")
        self.factors.extend(factors)
        self.pending.append(frame)
        if len(self.pending) > self.delay:
            oldest = self.pending.pop(0)
            self._eliminate(oldest)
            return oldest
        return None

    def _eliminate(self, frame: int) -> None:
        prior, self.factors, size = _eliminate_frame(self.prior, self.factors, frame)
        self.prior = prior
        self.eliminated.append(frame)
        self.blanket_sizes.append(size)

    def find_first_connected(self) -> int:
        """First frame still directly connected to the newest one.

        A frame is directly connected to the newest frame iff no frame in
        between has been eliminated.
        """
        alive = self.alive()
        if not alive:
            raise StructuralError("delayed graph has no frames")
        if not self.eliminated:
            return alive[0]
        last = max(self.eliminated)
        later = [f for f in alive if f > last]
        return later[0] if later else alive[-1]

    # -- copying / serialization ----------------------------------------
    def snapshot(self) -> DelayedGraph:
        """Independent copy that later main-graph updates do not affect."""
        out = DelayedGraph(self.delay)
        out.factors = list(self.factors)  # quadratic factors are immutable
        out.prior = self.prior
        out.pending = list(self.pending)
        out.eliminated = list(self.eliminated)
        out.frames = list(self.frames)
        out.blanket_sizes = list(self.blanket_sizes)
        return out

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "delay": self.delay,
            "frames": self.frames,
            "pending": self.pending,
            "eliminated": self.eliminated,
            "blanket_sizes": self.blanket_sizes,
            "prior": None if self.prior is None else _prior_to_dict(self.prior),
            "factors": [_prior_to_dict(f) for f in self.factors],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: Mapping) -> DelayedGraph:
        if data.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported delayed-graph format {data.get('version')}")
        out = cls(int(data["delay"]))
        out.frames = list(data["frames"])
        out.pending = list(data["pending"])
        out.eliminated = list(data["eliminated"])
        out.blanket_sizes = list(data["blanket_sizes"])
        out.prior = None if data["prior"] is None else _prior_from_dict(data["prior"])
        out.factors = [_prior_from_dict(f) for f in data["factors"]]
        return out

    @classmethod
    def loads(cls, text: str) -> DelayedGraph:
        return cls.from_dict(json.loads(text))

    # -- readvancing -----------------------------------------------------
    def readvance(self, extra: Sequence[MarginalizationPrior] = (),
                  reference: Mapping[Key, object] | None = None,
                  stamp: int | None = None) -> MarginalizationPrior | None:
        """Eliminate all pending frames in historical order.

        Args:
            extra: Additional quadratic factors (e.g. linearized inertial factors).
            reference: Optional common linearization point for the result.

        Returns:
            The prior over the variables that remain, which are those of the
            frames still active in the main graph (plus scale/gravity if present).
        """
        prior = self.prior
        factors = list(self.factors) + list(extra)
        for frame in self.pending:
            prior, factors, _ = _eliminate_frame(prior, factors, frame, reference, stamp)
        return prior


def _eliminate_frame(prior, factors, frame, reference=None, stamp=None):
    beta_set = {Key(kind, frame) for kind in FRAME_KINDS}
    touching = [f for f in factors if beta_set.intersection(f.keys)]
    rest = [f for f in factors if not beta_set.intersection(f.keys)]
    present = {k for f in touching for k in f.keys} | (set(prior.keys) if prior else set())
    beta = [Key(kind, frame) for kind in FRAME_KINDS if Key(kind, frame) in present]
    if not beta:
        return prior, rest, len(prior.keys) if prior else 0
    merged = ([prior] if prior is not None else []) + touching
    new = eliminate(merged, beta, reference=reference, stamp=stamp)
    return new, rest, len(new.keys) if new is not None else 0


# -- pose-graph bundle adjustment ------------------------------------------
@dataclass
class PgbaGraph:
    """Delayed graph populated with inertial factors."""

    graph: FactorGraph
    values: Values
    connected: int
    imu_frames: list[int]
    non_imu_frames: list[int]
    imu_factors: list[ImuFactor] = field(default_factory=list)

    @property
    def imu_pairs(self) -> frozenset:
        return frozenset((f.i, f.j) for f in self.imu_factors)


def imu_structure(delayed: DelayedGraph) -> tuple[int, list[int], list[int]]:
    """``(P_conn, frames with IMU variables, alive frames without)``."""
    conn = delayed.find_first_connected()
    alive = delayed.alive()
    with_imu = [f for f in alive if f >= conn]
    without = [f for f in alive if f < conn]
    return conn, with_imu, without


def populate_with_imu(delayed: DelayedGraph, preintegrations: Mapping[tuple[int, int], PreintegratedImu],
                      values: Mapping[Key, object], T_ci: RigidTransform,
                      noise: ImuNoiseParams | None = None,
                      extra_factors: Iterable[Factor] = ()) -> PgbaGraph:
    """Insert inertial and bias factors between successive frames from ``P_conn`` on.

    Args:
        delayed: The delayed graph (not modified).
        preintegrations: Preintegrated IMU per successive frame pair.
        values: Initial values for every variable of the result, including
            poses/affine of pending frames, velocities, biases, scale and gravity.
        extra_factors: Factors on frames still active in the main graph that
            the delayed graph does not hold (e.g. gauge priors).

    Raises:
        ImuDataError: if a successive pair has no preintegration.
    """
    conn, with_imu, without = imu_structure(delayed)
    graph = FactorGraph()
    if delayed.prior is not None:
        graph.add(delayed.prior)
    for f in delayed.factors:
        graph.add(f)
    for f in extra_factors:
        graph.add(f)
    imu_factors = []
    for i, j in zip(with_imu[:-1], with_imu[1:]):
        pre = preintegrations.get((i, j))
        if pre is None:
            raise ImuDataError(f"no preintegrated IMU between frames {i} and {j}")
        fac = ImuFactor(i, j, pre, T_ci)
        imu_factors.append(fac)
        graph.add(fac)
        graph.add(BiasRandomWalkFactor(i, j, pre.dt, noise or pre.noise))
    vals = Values()
    for k in graph.keys():
        if k not in values:
            raise StructuralError(f"no initial value for {k}")
        vals[k] = values[k]
    return PgbaGraph(graph, vals, conn, with_imu, without, imu_factors)


def readvance_pgba(delayed: DelayedGraph, pgba: PgbaGraph, values: Values | None = None,
                   stamp: int | None = None) -> MarginalizationPrior | None:
    """Readvance a populated graph at ``values`` (default: its own values).

    Inertial factors touching pending frames are linearized at ``values`` and
    merged while eliminating; the visual factors are re-expressed around
    ``values`` too, which then become the new first estimates.
    """
    vals = pgba.values if values is None else values
    pending = set(delayed.pending)
    stored = {id(f) for f in delayed.factors}
    if delayed.prior is not None:
        stored.add(id(delayed.prior))
    extra = []
    for f in pgba.graph.factors:
        if id(f) in stored:
            continue
        if any(k.index in pending and k.kind in FRAME_KINDS for k in f.keys):
            extra.append(linearize_factor(f, vals, stamp if stamp is not None else 0))
    reference = {k: vals[k] for k in vals}
    return delayed.readvance(extra, reference=reference, stamp=stamp)


# -- serialization helpers --------------------------------------------------
def _value_to_json(key: Key, v):
    if key.kind == POSE:
        return {"q": v.rotation.quat.tolist(), "t": v.translation.tolist()}
    if key.kind == GRAVITY:
        return [v.roll, v.pitch, v.yaw]
    if key.kind == SCALE or np.ndim(v) == 0:
        return float(v)
    return np.asarray(v, dtype=float).tolist()


def _value_from_json(key: Key, data):
    if key.kind == POSE:
        return RigidTransform(Rotation3(np.array(data["q"])), np.array(data["t"]))
    if key.kind == GRAVITY:
        return GravityRotation(*data)
    if isinstance(data, list):
        return np.array(data, dtype=float)
    return float(data)


def _prior_to_dict(p: MarginalizationPrior) -> dict:
    return {
        "keys": [[k.kind, k.index] for k in p.keys],
        "H": p.H.tolist(),
        "b": p.b.tolist(),
        "fej": [_value_to_json(k, p.fej[k]) for k in p.keys],
        "stamps": [p.stamps.get(k, 0) for k in p.keys],
        "imu_pairs": sorted([list(x) for x in p.imu_pairs]),
        "visual": p.visual,
        "label": p.label,
    }


def _prior_from_dict(d: Mapping) -> MarginalizationPrior:
    keys = [Key(kind, int(idx)) for kind, idx in d["keys"]]
    fej = {k: _value_from_json(k, v) for k, v in zip(keys, d["fej"])}
    return MarginalizationPrior(keys, np.array(d["H"], dtype=float).reshape(len(d["b"]), len(d["b"])),
                                np.array(d["b"], dtype=float), fej, dict(zip(keys, d["stamps"])),
                                [tuple(x) for x in d["imu_pairs"]], d["visual"], d["label"])
