"""Schur-complement marginalization and quadratic prior factors.

A quadratic factor stores ``(H, b)`` together with the values it was
linearized at (its first estimates). Its energy is

    E(x) = 1/2 d^T H d - b^T d,    d = x [-] x_fej,

so ``b`` is the negative gradient at the linearization point, matching the
convention of :class:`delayvio.graph.FactorGraph.linearize`.
"""
from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg

from .graph import (
    IDEPTH,
    Factor,
    FactorGraph,
    Key,
    LinearSystem,
    Ordering,
    StructuralError,
    Values,
    key_dim,
    local,
)

log = logging.getLogger(__name__)

REGULARIZATION = 1e-10


class DegenerateMarginalizationError(np.linalg.LinAlgError):
    """The block being eliminated is singular even after regularization."""


class MarginalizationPrior(Factor):
    """Quadratic factor over ``keys`` linearized at ``fej``.

    Args:
        keys: Variables the prior connects (its Markov blanket).
        H: Information matrix over the concatenated tangents of ``keys``.
        b: Negative gradient at ``fej``.
        fej: Linearization values for exactly ``keys``.
        stamps: Per-key step at which the key's linearization point was fixed;
            when quadratic factors are merged the oldest point wins.
        imu_pairs: Keyframe pairs whose inertial factors were folded in.
        visual: Whether the factor carries only visual information.
    """

    _ids = itertools.count()

    def __init__(self, keys: Sequence[Key], H: np.ndarray, b: np.ndarray,
                 fej: Mapping[Key, object], stamps: Mapping[Key, int] | None = None,
                 imu_pairs: Iterable[tuple[int, int]] = (), visual: bool = False,
                 label: str = ""):
        self.keys = tuple(keys)
        dim = sum(key_dim(k) for k in self.keys)
        H = np.asarray(H, dtype=float)
        b = np.asarray(b, dtype=float)
        if H.shape != (dim, dim) or b.shape != (dim,):
            raise StructuralError(f"prior blocks have shape {H.shape}/{b.shape}, expected {dim}")
        if set(fej) != set(self.keys):
            raise StructuralError("linearization values must cover exactly the prior keys")
        self.H = H
        self.b = b
        self.fej = {k: fej[k] for k in self.keys}
        self.stamps = dict(stamps) if stamps is not None else {k: 0 for k in self.keys}
        self.imu_pairs = frozenset(imu_pairs)
        self.visual = visual
        self.label = label
        self.uid = next(MarginalizationPrior._ids)

    def delta(self, values: Mapping[Key, object]) -> np.ndarray:
        parts = []
        for k in self.keys:
            if k not in values:
                raise StructuralError(f"prior key {k} missing from values")
            parts.append(local(k, values[k], self.fej[k]))
        return np.concatenate(parts) if parts else np.zeros(0)

    def energy(self, values) -> float:
        d = self.delta(values)
        return float(0.5 * d @ self.H @ d - self.b @ d)

    def linearize(self, values):
        d = self.delta(values)
        return self.H, self.b - self.H @ d

    def gradient(self, values) -> np.ndarray:
        """Gradient of :meth:`energy` w.r.t. the tangent at ``values`` (first-estimate Jacobians)."""
        d = self.delta(values)
        return self.H @ d - self.b

    def shifted(self, reference: Mapping[Key, object]) -> tuple[np.ndarray, np.ndarray]:
        """``(H, b)`` re-expressed around ``reference`` instead of ``fej``."""
        d = np.concatenate([local(k, reference[k], self.fej[k]) for k in self.keys]) \
            if self.keys else np.zeros(0)
        return self.H, self.b - self.H @ d

    def copy(self) -> MarginalizationPrior:
        return MarginalizationPrior(self.keys, self.H.copy(), self.b.copy(), dict(self.fej),
                                    dict(self.stamps), self.imu_pairs, self.visual, self.label)

    def __repr__(self) -> str:
        return f"MarginalizationPrior({self.label or 'prior'}, keys={list(self.keys)})"


def linearize_factor(factor: Factor, values: Values, stamp: int,
                     imu_pairs: Iterable[tuple[int, int]] = ()) -> MarginalizationPrior:
    """Freeze a factor into a quadratic factor at ``values``."""
    if isinstance(factor, MarginalizationPrior):
        return factor
    H, b = factor.linearize(values)
    pairs = imu_pairs or getattr(factor, "imu_pairs", ())
    return MarginalizationPrior(factor.keys, H, b, {k: values[k] for k in factor.keys},
                                {k: stamp for k in factor.keys}, pairs,
                                visual=factor.visual, label=type(factor).__name__)


def _cholesky(Hbb: np.ndarray):
    n = Hbb.shape[0]
    scale = max(1.0, float(np.max(np.abs(np.diag(Hbb))))) if n else 1.0
    for eps in (0.0, REGULARIZATION):
        try:
            c = scipy.linalg.cho_factor(Hbb + eps * np.eye(n), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        if np.min(np.diag(c[0])) ** 2 > 1e-14 * scale:
            return c
    raise DegenerateMarginalizationError("eliminated block is singular beyond regularization")


def schur_complement(system: LinearSystem, beta: Iterable[Key]) -> LinearSystem:
    """Eliminate ``beta`` from ``system``.

    Returns ``H_aa - H_ab H_bb^-1 H_ba`` and ``b_a - H_ab H_bb^-1 b_b`` over the
    remaining keys in their original order.

    Raises:
        StructuralError: if a key of ``beta`` is not part of the system.
        DegenerateMarginalizationError: if ``H_bb`` cannot be factorized.
    """
    beta = list(beta)
    ordering = system.ordering
    for k in beta:
        if k not in ordering:
            raise StructuralError(f"{k} is not in the system")
    bset = set(beta)
    alpha = [k for k in ordering.keys if k not in bset]
    ia, ib = ordering.indices(alpha), ordering.indices(beta)
    H, b = system.H, system.b
    if ib.size == 0:
        return LinearSystem(H[np.ix_(ia, ia)].copy(), b[ia].copy(), Ordering(alpha))
    Haa = H[np.ix_(ia, ia)]
    Hab = H[np.ix_(ia, ib)]
    c = _cholesky(H[np.ix_(ib, ib)])
    X = scipy.linalg.cho_solve(c, np.column_stack([Hab.T, b[ib]]), check_finite=False)
    Hhat = Haa - Hab @ X[:, :-1]
    bhat = b[ia] - Hab @ X[:, -1]
    return LinearSystem(0.5 * (Hhat + Hhat.T), bhat, Ordering(alpha))


def choose_reference(factors: Sequence[MarginalizationPrior],
                     reference: Mapping[Key, object] | None = None,
                     stamp: int | None = None):
    """Common linearization point for merging quadratic factors.

    Explicit ``reference`` values win; otherwise each key keeps the value of the
    factor with the oldest stamp, so first estimates persist across merges.
    """
    ref: dict[Key, object] = {}
    stamps: dict[Key, int] = {}
    for f in factors:
        for k in f.keys:
            if reference is not None and k in reference:
                if k not in ref:
                    ref[k] = reference[k]
                    stamps[k] = stamp if stamp is not None else f.stamps.get(k, 0)
                continue
            s = f.stamps.get(k, 0)
            if k not in ref or s < stamps[k]:
                ref[k] = f.fej[k]
                stamps[k] = s
    return ref, stamps


def eliminate(factors: Sequence[MarginalizationPrior], beta: Iterable[Key],
              reference: Mapping[Key, object] | None = None, stamp: int | None = None,
              label: str = "prior") -> MarginalizationPrior | None:
    """Merge quadratic factors and Schur out ``beta``.

    Returns ``None`` when nothing remains after elimination.
    """
    factors = list(factors)
    beta = list(beta)
    bset = set(beta)
    keys: dict[Key, None] = {}
    for f in factors:
        for k in f.keys:
            keys.setdefault(k, None)
    missing = [k for k in beta if k not in keys]
    if missing:
        raise StructuralError(f"keys {missing} are not connected to any factor")
    alpha = [k for k in keys if k not in bset]
    ordering = Ordering(alpha + beta)
    ref, stamps = choose_reference(factors, reference, stamp)
    H = np.zeros((ordering.dim, ordering.dim))
    b = np.zeros(ordering.dim)
    pairs: set = set()
    visual = True
    for f in factors:
        Hf, bf = f.shifted(ref)
        idx = ordering.indices(f.keys)
        H[np.ix_(idx, idx)] += Hf
        b[idx] += bf
        pairs |= f.imu_pairs
        visual &= f.visual
    reduced = schur_complement(LinearSystem(0.5 * (H + H.T), b, ordering), beta)
    if not alpha:
        return None
    return MarginalizationPrior(alpha, reduced.H, reduced.b, {k: ref[k] for k in alpha},
                                {k: stamps[k] for k in alpha}, pairs, visual, label)


def eliminate_point_depths(H: np.ndarray, b: np.ndarray, depth_idx: int):
    """Schur out a single scalar inverse depth; ``None`` if it is unconstrained."""
    hdd = H[depth_idx, depth_idx]
    if not hdd > 1e-12:
        return None
    keep = np.r_[0:depth_idx, depth_idx + 1:H.shape[0]]
    h = H[keep, depth_idx]
    Hr = H[np.ix_(keep, keep)] - np.outer(h, h) / hdd
    br = b[keep] - h * (b[depth_idx] / hdd)
    return Hr, br


@dataclass
class FrameMarginalization:
    """Outcome of removing one keyframe from the active window."""

    frame: int
    prior: MarginalizationPrior | None
    visual_factors: list[MarginalizationPrior]
    beta: list[Key]
    blanket: list[Key]
    dropped_observations: int = 0
    dropped_points: list[int] = field(default_factory=list)


def frame_keys(graph_keys: Iterable[Key], frame: int) -> list[Key]:
    """Keys owned by keyframe ``frame`` (pose, affine, velocity, bias)."""
    return [k for k in graph_keys if k.index == frame and k.kind in ("pose", "affine", "vel", "bias")]


def marginalize_frame(graph: FactorGraph, values: Values, frame: int,
                      prior: MarginalizationPrior | None, stamp: int,
                      reference: Mapping[Key, object] | None = None) -> FrameMarginalization:
    """Remove keyframe ``frame`` and everything it hosts from ``graph``.

    Steps, in order: observations of other frames' points in ``frame`` are
    dropped; points hosted by ``frame`` are linearized and their depths are
    eliminated, leaving one linearized visual factor; finally all factors on
    the frame's variables are merged with ``prior`` and the frame is eliminated.

    ``graph`` is modified in place (factors removed); the caller stores the
    returned prior. Photometric factors are expected to expose ``host``,
    ``targets``, ``drop_target`` and ``point`` (see ``delayvio.photometric``).

    Raises:
        StructuralError: if the frame has no pose in the graph.
    """
    from .graph import pose_key

    if pose_key(frame) not in values or not any(pose_key(frame) in f.keys for f in graph.factors) \
            and (prior is None or pose_key(frame) not in prior.keys):
        raise StructuralError(f"frame {frame} is not part of the graph")
    dropped_obs = 0
    hosted = []
    for f in list(graph.factors):
        host = getattr(f, "host", None)
        if host is None:
            continue
        if host == frame:
            hosted.append(f)
        elif frame in f.targets:
            f.drop_target(frame)
            dropped_obs += 1
            if not f.targets:
                graph.remove([f])
    # Points hosted in the frame: linearize, eliminate depths, sum into one factor.
    visual_factors: list[MarginalizationPrior] = []
    dropped_points = []
    acc_keys: dict[Key, None] = {}
    for f in hosted:
        for k in f.keys:
            if k.kind != IDEPTH:
                acc_keys.setdefault(k, None)
    if hosted:
        order = Ordering(acc_keys)
        Hacc = np.zeros((order.dim, order.dim))
        bacc = np.zeros(order.dim)
        for f in hosted:
            Hf, bf = f.linearize_unweighted(values)
            red = eliminate_point_depths(Hf, bf, Hf.shape[0] - 1)
            if red is None:
                dropped_points.append(f.point)
                continue
            idx = order.indices([k for k in f.keys if k.kind != IDEPTH])
            Hacc[np.ix_(idx, idx)] += red[0]
            bacc[idx] += red[1]
        graph.remove(hosted)
        if dropped_points:
            warnings.warn(f"dropping {len(dropped_points)} unconstrained point(s) hosted in frame {frame}",
                          RuntimeWarning, stacklevel=2)
        if len(dropped_points) < len(hosted):
            visual_factors.append(MarginalizationPrior(
                order.keys, 0.5 * (Hacc + Hacc.T), bacc, {k: values[k] for k in order.keys},
                {k: stamp for k in order.keys}, visual=True, label=f"points{frame}"))
    beta = frame_keys(values, frame)
    touching = graph.touching(beta)
    quads = []
    for f in touching:
        q = linearize_factor(f, values, stamp)
        quads.append(q)
        if q.visual:
            visual_factors.append(q)
    graph.remove(touching)
    beta = [k for k in beta if any(k in q.keys for q in quads + visual_factors)
            or (prior is not None and k in prior.keys)]
    merged = ([prior] if prior is not None else []) + [q for q in visual_factors if q not in quads] + quads
    new_prior = eliminate(merged, beta, reference=reference, stamp=stamp, label="prior")
    blanket = list(new_prior.keys) if new_prior is not None else []
    return FrameMarginalization(frame, new_prior, visual_factors, beta, blanket,
                                dropped_obs, dropped_points)
