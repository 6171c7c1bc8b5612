"""Trajectory metrics: aligned ATE, drift, scale error and result aggregation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .lie import RigidTransform, Rotation3


@dataclass
class Alignment:
    """``dst ~= scale * R @ src + t``."""

    R: np.ndarray
    t: np.ndarray
    scale: float = 1.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.R.T + self.t


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = False) -> Alignment:
    """Least-squares similarity (or rigid) transform mapping ``src`` onto ``dst``.

    Raises:
        ValueError: for mismatched shapes or fewer than three points.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("point sets must both have shape (n, 3)")
    if src.shape[0] < 3:
        raise ValueError("alignment needs at least three points")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / src.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = 1.0
    if with_scale:
        var_s = np.sum(xs * xs) / src.shape[0]
        scale = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - scale * R @ mu_s
    return Alignment(R, t, scale)


def ate_rmse(est: np.ndarray, gt: np.ndarray, with_scale: bool = False) -> tuple[float, Alignment]:
    """Root-mean-square position error after SE(3) (or Sim(3)) alignment."""
    al = umeyama(est, gt, with_scale)
    err = al.apply(est) - np.asarray(gt)
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1)))), al


def trajectory_length(positions: np.ndarray) -> float:
    p = np.asarray(positions, dtype=float)
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))


def drift_percent(rmse: float, length: float) -> float:
    """``rmse * 100 / length``."""
    if not length > 0:
        raise ValueError("trajectory length must be positive")
    return rmse * 100.0 / length


def scale_error_percent(est: np.ndarray, gt: np.ndarray) -> float:
    """Deviation of the optimal Sim(3) alignment scale from one, in percent."""
    return abs(umeyama(est, gt, with_scale=True).scale - 1.0) * 100.0


def up_angle_deg(u: np.ndarray, v: np.ndarray) -> float:
    """Angle between two directions in degrees."""
    u = np.asarray(u, float) / np.linalg.norm(u)
    v = np.asarray(v, float) / np.linalg.norm(v)
    return math.degrees(math.atan2(np.linalg.norm(np.cross(u, v)), float(u @ v)))


def associate(t_est: Sequence[float], t_gt: Sequence[float], max_dt: float = 1e-3):
    """Nearest-neighbour timestamp matching within ``max_dt`` seconds.

    Returns:
        Two index arrays ``(i_est, i_gt)``.
    """
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    order = np.argsort(t_gt)
    ts = t_gt[order]
    pos = np.clip(np.searchsorted(ts, t_est), 1, len(ts) - 1) if len(ts) > 1 else np.zeros(len(t_est), int)
    ie, ig = [], []
    for i, (t, p) in enumerate(zip(t_est, pos)):
        cands = [p - 1, p] if len(ts) > 1 else [0]
        j = min(cands, key=lambda c: abs(ts[c] - t))
        if abs(ts[j] - t) <= max_dt:
            ie.append(i)
            ig.append(int(order[j]))
    return np.array(ie, dtype=int), np.array(ig, dtype=int)


@dataclass
class EvaluationResult:
    rmse_ate: float
    scale_error: float
    drift: float
    length: float
    matched: int
    seed: int | None = None
    lost: bool = False
    timeline: list = field(default_factory=list)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("timeline")
        return d


def failed_result(seed: int | None = None) -> EvaluationResult:
    """Result for a run that lost tracking: infinite errors."""
    return EvaluationResult(math.inf, math.inf, math.inf, math.nan, 0, seed, lost=True)


def evaluate_trajectory(t_est, poses_est: Sequence[RigidTransform], t_gt,
                        poses_gt: Sequence[RigidTransform], seed: int | None = None,
                        max_dt: float = 1e-3) -> EvaluationResult:
    """SE(3)-aligned ATE, drift and Sim(3) scale error of ``est`` against ``gt``.

    Raises:
        ValueError: if fewer than three timestamps match.
    """
    ie, ig = associate(t_est, t_gt, max_dt)
    if len(ie) < 3:
        raise ValueError(f"only {len(ie)} matching timestamps")
    pe = np.array([poses_est[i].translation for i in ie])
    pg = np.array([poses_gt[i].translation for i in ig])
    rmse, _ = ate_rmse(pe, pg)
    length = trajectory_length(pg)
    return EvaluationResult(rmse, scale_error_percent(pe, pg), drift_percent(rmse, length),
                            length, len(ie), seed)


def median_row(rows: Sequence[EvaluationResult]) -> dict:
    """Per-metric median over runs (failed runs count as infinite error)."""
    out = {"seed": "median"}
    for name in ("rmse_ate", "scale_error", "drift"):
        out[name] = float(np.median([getattr(r, name) for r in rows]))
    out["lost"] = sum(r.lost for r in rows)
    return out


def cumulative_curve(errors: Iterable[float], thresholds: Sequence[float]) -> np.ndarray:
    """Fraction of runs with error at most each threshold (``inf`` never counts)."""
    e = np.asarray(list(errors), dtype=float)
    if e.size == 0:
        return np.zeros(len(thresholds))
    return np.array([np.mean(e <= t) for t in thresholds])


# -- file formats ------------------------------------------------------------
def write_tum(path: str | Path, timestamps: Sequence[float], poses: Sequence[RigidTransform]) -> None:
    """``timestamp tx ty tz qx qy qz qw`` per line."""
    with open(path, "w") as fh:
        for t, P in zip(timestamps, poses):
            w, x, y, z = P.rotation.quat
            tx, ty, tz = P.translation
            fh.write(f"{t:.9f} {tx:.9f} {ty:.9f} {tz:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f}\n")


def read_tum(path: str | Path) -> tuple[np.ndarray, list[RigidTransform]]:
    """Read a TUM trajectory (``#`` comments allowed).

    Raises:
        ValueError: on rows without eight columns.
    """
    data = np.loadtxt(path, comments="#", ndmin=2)
    if data.size and data.shape[1] != 8:
        raise ValueError(f"{path}: expected 8 columns, got {data.shape[1]}")
    poses = [RigidTransform(Rotation3(np.array([r[7], r[4], r[5], r[6]])), r[1:4].copy()) for r in data]
    return data[:, 0].copy(), poses


def write_results_csv(path: str | Path, rows: Sequence[EvaluationResult]) -> None:
    """Per-run rows followed by a median row."""
    fields = ["seed", "rmse_ate", "scale_error", "drift", "length", "matched", "lost"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r.row())
        if rows:
            w.writerow(median_row(rows))


def write_cumulative_csv(path: str | Path, rows: Sequence[EvaluationResult],
                         metrics: Sequence[str] = ("drift", "rmse_ate", "scale_error")) -> None:
    """Cumulative error table: ``metric, threshold, count`` with one step per finite error.

    ``count`` is the number of runs with error at most ``threshold``; lost runs
    carry infinite error and are never counted.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "threshold", "count", "runs"])
        for name in metrics:
            errors = np.array([getattr(r, name) for r in rows], dtype=float)
            steps = np.unique(errors[np.isfinite(errors)])
            w.writerow([name, 0.0, int(np.sum(errors <= 0.0)), len(rows)])
            for t, c in zip(steps, cumulative_curve(errors, steps) * len(rows)):
                w.writerow([name, repr(float(t)), int(round(c)), len(rows)])


def write_json(path: str | Path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")
