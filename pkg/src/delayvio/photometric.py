"""Direct photometric residuals on synthetic intensity patches.

Every point carries an 8-pixel pattern in its host keyframe. The residual of
pattern pixel ``k`` observed in target frame ``j`` is

    r_k = (I_j[p'_k] - b_j) - (t_j e^{a_j}) / (t_i e^{a_i}) (I_i[p_k] - b_i)

where ``p'_k`` is obtained by warping ``p_k`` with the relative pose and the
point's inverse depth. Each pixel contributes ``w_k * huber(r_k)`` with
``huber(r) = r^2`` for ``|r| <= gamma`` and ``2 gamma |r| - gamma^2`` beyond.

Images are not rasterized: each (point, target frame) pair carries an analytic
intensity function that is smooth in the warped pixel position, so Jacobians
are exact and finite differences are well defined.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import (
    Factor,
    Ordering,
    affine_key,
    idepth_key,
    pose_key,
)
from .lie import RigidTransform

# DSO residual pattern (8 pixels).
PATTERN = np.array([[0, -2], [-1, -1], [1, -1], [-2, 0], [0, 0], [2, 0], [-1, 1], [0, 1]],
                   dtype=float)
HUBER = 9.0
GRADIENT_WEIGHT_C = 50.0


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def unproject(self, uv: np.ndarray) -> np.ndarray:
        """Bearing ``(x, y, 1)`` of pixel(s) ``uv``."""
        uv = np.asarray(uv, dtype=float)
        x = (uv[..., 0] - self.cx) / self.fx
        y = (uv[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def project(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.stack([self.fx * X[..., 0] / X[..., 2] + self.cx,
                         self.fy * X[..., 1] / X[..., 2] + self.cy], axis=-1)

    def in_bounds(self, uv: np.ndarray, margin: float = 3.0) -> np.ndarray:
        uv = np.asarray(uv)
        return ((uv[..., 0] >= margin) & (uv[..., 0] < self.width - margin)
                & (uv[..., 1] >= margin) & (uv[..., 1] < self.height - margin))

    @classmethod
    def default(cls) -> PinholeCamera:
        return cls(380.0, 380.0, 376.0, 240.0, 752, 480)


def huber_energy(r: np.ndarray, gamma: float = HUBER) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= gamma, r * r, 2.0 * gamma * a - gamma * gamma)


def huber_weight(r: np.ndarray, gamma: float = HUBER) -> np.ndarray:
    """IRLS weight: ``huber(r) ~= w r^2`` locally."""
    a = np.abs(r)
    return np.where(a <= gamma, 1.0, gamma / np.maximum(a, 1e-300))


def gradient_weight(grad: np.ndarray, c: float = GRADIENT_WEIGHT_C) -> np.ndarray:
    """Down-weight high-gradient pixels: ``c^2 / (c^2 + |grad|^2)``."""
    g2 = np.sum(np.asarray(grad) ** 2, axis=-1)
    return c * c / (c * c + g2)


def dynamic_weight(e_photo: float, lam: float = 1.0, theta: float = 8.0) -> float:
    """Photometric weight that caps the weighted RMS error at ``sqrt(lam) * theta``."""
    if e_photo < 0:
        raise ValueError("RMS photometric error must be non-negative")
    if e_photo >= theta:
        return lam * (theta / e_photo) ** 2
    return lam


def warp(R_th: np.ndarray, t_th: np.ndarray, bearing: np.ndarray, idepth: float | np.ndarray,
         camera: PinholeCamera):
    """Warp host bearings into the target image.

    Uses ``X = R_th f + d t_th`` (the target-frame point scaled by ``d``).

    Returns:
        ``(uv, X, valid)`` where ``valid`` is False behind the camera.
    """
    X = bearing @ R_th.T + np.asarray(idepth)[..., None] * t_th
    valid = X[..., 2] > 1e-6
    Xz = np.where(valid[..., None], X, np.array([0.0, 0.0, 1.0]))
    return camera.project(Xz), X, valid


def project(point_pixel: np.ndarray, idepth: float, host: RigidTransform, target: RigidTransform,
            camera: PinholeCamera):
    """Project a host pixel with inverse depth into the target frame.

    Poses map camera coordinates to world coordinates. Jacobians are w.r.t.
    the left-perturbation tangents ``(omega, rho)`` of ``host`` and ``target``
    and w.r.t. the inverse depth.

    Returns:
        ``(uv, visible, J_host (2x6), J_target (2x6), J_idepth (2,))``.
        ``visible`` is False if the point is behind the camera or outside the image.
    """
    if idepth <= 0:
        raise ValueError("inverse depth must be positive")
    T_tw = target.inverse()
    R_th = T_tw.R @ host.R
    t_th = T_tw.R @ host.t + T_tw.t
    f = camera.unproject(point_pixel)
    uv, X, valid = warp(R_th, t_th, f, idepth, camera)
    visible = bool(valid) and bool(camera.in_bounds(uv))
    dpi = _projection_jacobian(X[None], camera)[0]
    Pw = host.R @ f + idepth * host.t  # world point scaled by idepth
    J_t = np.hstack([T_tw.R @ _hat(Pw), -idepth * T_tw.R])
    return uv, visible, -dpi @ J_t, dpi @ J_t, dpi @ t_th


def _hat(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _projection_jacobian(X: np.ndarray, camera: PinholeCamera) -> np.ndarray:
    z = X[..., 2]
    iz = 1.0 / np.where(np.abs(z) > 1e-12, z, 1e-12)
    J = np.zeros(X.shape[:-1] + (2, 3))
    J[..., 0, 0] = camera.fx * iz
    J[..., 0, 2] = -camera.fx * X[..., 0] * iz * iz
    J[..., 1, 1] = camera.fy * iz
    J[..., 1, 2] = -camera.fy * X[..., 1] * iz * iz
    return J


@dataclass
class QuadraticTexture:
    """Smooth intensity patch ``c0 + g.o + o^T Q o`` over pattern offsets ``o``."""

    c0: float
    g: np.ndarray
    Q: np.ndarray

    def value(self, o: np.ndarray) -> np.ndarray:
        return self.c0 + o @ self.g + np.einsum("...i,ij,...j->...", o, self.Q, o)

    def grad(self, o: np.ndarray) -> np.ndarray:
        return self.g + o @ (self.Q + self.Q.T)

    @classmethod
    def random(cls, rng: np.random.Generator) -> QuadraticTexture:
        ang = rng.uniform(0, 2 * math.pi)
        g = rng.uniform(12.0, 30.0) * np.array([math.cos(ang), math.sin(ang)])
        A = rng.normal(scale=2.0, size=(2, 2))
        return cls(float(rng.uniform(60.0, 180.0)), g, 0.5 * (A + A.T))


@dataclass
class PatchObservation:
    """Analytic image of one point's patch as seen by one target frame.

    ``I(x) = gain * T(pi(H_inv x) - p) + offset + noise_k`` where ``H_inv``
    maps target pixels back to the host image plane of the point.
    """

    target: int
    H_inv: np.ndarray
    gain: float
    offset: float
    noise: np.ndarray
    exposure: float


class PhotometricFactor(Factor):
    """All residuals of one point: its host pattern against every target frame.

    Keys are ordered ``host pose, host affine, (target pose, target affine)*, idepth``.
    """

    visual = True

    def __init__(self, point: int, host: int, pixel: np.ndarray, host_intensity: np.ndarray,
                 host_exposure: float, texture: QuadraticTexture,
                 observations: Sequence[PatchObservation], camera: PinholeCamera,
                 weights: np.ndarray | None = None, lam: float = 1.0, gamma: float = HUBER):
        self.point = point
        self.host = host
        self.pixel = np.asarray(pixel, dtype=float)
        self.host_intensity = np.asarray(host_intensity, dtype=float)
        self.host_exposure = float(host_exposure)
        self.texture = texture
        self.observations = list(observations)
        self.camera = camera
        self.gamma = gamma
        self.lam = lam
        self.weight = lam
        if weights is None:
            weights = gradient_weight(texture.grad(PATTERN))
        self.pixel_weights = np.asarray(weights, dtype=float)
        self.bearings = camera.unproject(self.pixel + PATTERN)
        self._rebuild_keys()

    def _rebuild_keys(self):
        ks = [pose_key(self.host), affine_key(self.host)]
        for o in self.observations:
            ks += [pose_key(o.target), affine_key(o.target)]
        ks.append(idepth_key(self.point))
        self.keys = tuple(ks)

    @property
    def targets(self) -> list[int]:
        return [o.target for o in self.observations]

    def drop_target(self, frame: int) -> None:
        self.observations = [o for o in self.observations if o.target != frame]
        self._rebuild_keys()

    def add_observation(self, obs: PatchObservation) -> None:
        self.observations.append(obs)
        self._rebuild_keys()

    def energy(self, values) -> float:
        return type(self).energy_batch([self], values)

    def linearize(self, values):
        ordering = Ordering(self.keys)
        H = np.zeros((ordering.dim, ordering.dim))
        b = np.zeros(ordering.dim)
        type(self).linearize_batch([self], values, ordering, H, b)
        return H, b

    def linearize_unweighted(self, values):
        """Linearization with the static weight instead of the dynamic one."""
        w = self.weight
        self.weight = self.lam
        try:
            return self.linearize(values)
        finally:
            self.weight = w

    def residuals(self, values, jacobians: bool = False):
        """Per-target residuals ``(n_targets, 8)`` and optionally Jacobians ``(n, 8, 17)``."""
        batch = _Batch([self])
        r, J = batch.evaluate(values, jacobians)
        return (r, J) if jacobians else r

    def photometric_energy(self, values) -> float:
        """Unweighted energy ``sum w_k huber(r_k)`` of this point."""
        r = self.residuals(values)
        return float(np.sum(self.pixel_weights * huber_energy(r, self.gamma)))

    @classmethod
    def energy_batch(cls, factors, values) -> float:
        batch = _Batch(factors)
        if batch.n == 0:
            return 0.0
        r = batch.evaluate(values, False)[0]
        e = batch.w_pix * huber_energy(r, factors[0].gamma)
        return float(0.5 * np.sum(batch.fweight[:, None] * e))

    @classmethod
    def linearize_batch(cls, factors, values, ordering: Ordering, H: np.ndarray, b: np.ndarray):
        batch = _Batch(factors)
        if batch.n == 0:
            return
        r, J = batch.evaluate(values, True)
        w = batch.w_pix * huber_weight(r, factors[0].gamma) * batch.fweight[:, None]
        Jw = J * w[..., None]
        Hn = np.transpose(Jw, (0, 2, 1)) @ J
        bn = -(np.transpose(Jw, (0, 2, 1)) @ r[..., None])[..., 0]
        idx = batch.global_indices(ordering)
        n = H.shape[0]
        mask = idx >= 0
        pair = mask[:, :, None] & mask[:, None, :]
        lin = (idx[:, :, None] * n + idx[:, None, :])[pair]
        H += np.bincount(lin, weights=Hn[pair], minlength=n * n).reshape(n, n)
        b += np.bincount(idx[mask], weights=bn[mask], minlength=n)

    def __repr__(self) -> str:
        return f"PhotometricFactor(point={self.point}, host={self.host}, targets={self.targets})"


class _Batch:
    """Flattened (point, target) observations of many photometric factors.

    Construction is cached on the identity, target frames and weight of
    each factor, since the optimizer evaluates the same set repeatedly.
    """

    _cache: tuple | None = None

    def __new__(cls, factors: Sequence[PhotometricFactor]):
        sig = tuple((id(f), tuple(f.targets), f.weight) for f in factors)
        if cls._cache is not None and cls._cache[0] == sig:
            return cls._cache[1]
        obj = super().__new__(cls)
        obj._build(factors)
        cls._cache = (sig, obj, list(factors))
        return obj

    def _build(self, factors: Sequence[PhotometricFactor]):
        self._index_cache = None
        self.factors = factors
        rows = [(fi, o) for fi, f in enumerate(factors) for o in f.observations]
        self.n = len(rows)
        if not self.n:
            return
        fidx = np.array([fi for fi, _ in rows])
        self.fidx = fidx
        self.point = np.array([f.point for f in factors])[fidx]
        self.upoints, self.point_inv = np.unique(self.point, return_inverse=True)
        self.host = np.array([f.host for f in factors])[fidx]
        self.target = np.array([o.target for _, o in rows])
        self.bearings = np.stack([f.bearings for f in factors])[fidx]
        self.host_int = np.stack([f.host_intensity for f in factors])[fidx]
        self.host_exp = np.array([f.host_exposure for f in factors])[fidx]
        self.w_pix = np.stack([f.pixel_weights for f in factors])[fidx]
        self.fweight = np.array([f.weight for f in factors])[fidx]
        self.H_inv = np.stack([o.H_inv for _, o in rows])
        self.gain = np.array([o.gain for _, o in rows])
        self.offset = np.array([o.offset for _, o in rows])
        self.noise = np.stack([o.noise for _, o in rows])
        self.t_exp = np.array([o.exposure for _, o in rows])
        self.pixel = np.stack([f.pixel for f in factors])[fidx]
        self.c0 = np.array([f.texture.c0 for f in factors])[fidx]
        self.g = np.stack([f.texture.g for f in factors])[fidx]
        self.Q = np.stack([f.texture.Q for f in factors])[fidx]
        self.camera = factors[0].camera

    def _frame_arrays(self, values):
        frames = np.unique(np.concatenate([self.host, self.target]))
        pos = {int(f): i for i, f in enumerate(frames)}
        R = np.stack([values[pose_key(int(f))].R for f in frames])
        t = np.stack([values[pose_key(int(f))].t for f in frames])
        ab = np.stack([values[affine_key(int(f))] for f in frames])
        hi = np.array([pos[int(f)] for f in self.host])
        ti = np.array([pos[int(f)] for f in self.target])
        return R, t, ab, hi, ti

    def evaluate(self, values, jacobians: bool):
        R, t, ab, hi, ti = self._frame_arrays(values)
        d = np.array([values[idepth_key(int(p))] for p in self.upoints])[self.point_inv]
        R_wh, t_wh, R_wt, t_wt = R[hi], t[hi], R[ti], t[ti]
        R_tw = np.transpose(R_wt, (0, 2, 1))
        Pw = self.bearings @ np.transpose(R_wh, (0, 2, 1)) + (d[:, None] * t_wh)[:, None, :]
        Pt = Pw - (d[:, None] * t_wt)[:, None, :]
        X = Pt @ R_wt  # target point scaled by idepth
        valid = X[..., 2] > 1e-6
        Xz = np.where(valid[..., None], X, np.array([0.0, 0.0, 1.0]))
        uv = self.camera.project(Xz)
        I, grad = self._sample(uv)
        a_h, b_h = ab[hi, 0], ab[hi, 1]
        a_t, b_t = ab[ti, 0], ab[ti, 1]
        ratio = (self.t_exp / self.host_exp) * np.exp(a_t - a_h)
        host_term = self.host_int - b_h[:, None]
        r = (I - b_t[:, None]) - ratio[:, None] * host_term
        r = np.where(valid, r, 0.0)
        if not jacobians:
            return r, None
        dpi = _projection_jacobian(Xz, self.camera)  # (n,8,2,3)
        dI_dX = (grad[..., None, :] @ dpi)[..., 0, :]  # (n,8,3)
        # Target pose (left perturbation in world): dX = R_tw([Pw_t]x w - d rho)
        A = dI_dX @ R_tw  # (n,8,3) row vectors dI/dX R_tw
        J = np.zeros(r.shape + (17,))
        J_t_rot = np.cross(A, Pw)  # a^T [P]x w = (a x P) . w
        J_t_trans = -d[:, None, None] * A
        J[..., 8:11] = J_t_rot
        J[..., 11:14] = J_t_trans
        J[..., 0:3] = -J_t_rot
        J[..., 3:6] = -J_t_trans
        rh = ratio[:, None] * host_term
        J[..., 6] = rh
        J[..., 7] = ratio[:, None]
        J[..., 14] = -rh
        J[..., 15] = -1.0
        t_th_rel = np.einsum("nij,nj->ni", R_tw, t_wh - t_wt)
        J[..., 16] = (dI_dX @ t_th_rel[..., None])[..., 0]
        J = np.where(valid[..., None], J, 0.0)
        return r, J

    def _sample(self, uv):
        """Analytic target intensity and its pixel gradient."""
        x = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
        y = x @ np.transpose(self.H_inv, (0, 2, 1))
        iz = 1.0 / y[..., 2]
        q = y[..., :2] * iz[..., None]
        o = q - self.pixel[:, None, :]
        oQ = o @ self.Q
        T = self.c0[:, None] + (o @ self.g[..., None])[..., 0] + np.sum(oQ * o, axis=-1)
        gT = self.g[:, None, :] + o @ (self.Q + np.transpose(self.Q, (0, 2, 1)))
        dq_dy = np.zeros(y.shape[:-1] + (2, 3))
        dq_dy[..., 0, 0] = iz
        dq_dy[..., 1, 1] = iz
        dq_dy[..., :, 2] = -q * iz[..., None]
        dq_dx = dq_dy @ self.H_inv[:, None, :, :2]
        grad = self.gain[:, None, None] * (gT[..., None, :] @ dq_dx)[..., 0, :]
        I = self.gain[:, None] * T + self.offset[:, None] + self.noise
        return I, grad

    def global_indices(self, ordering: Ordering) -> np.ndarray:
        """Column indices into ``ordering`` (``-1`` for keys held constant)."""
        cached = self._index_cache
        if cached is not None and cached[0] is ordering:
            return cached[1]
        idx = np.full((self.n, 17), -1, dtype=int)

        def block(make_key, ids, dim):
            uniq, inv = np.unique(ids, return_inverse=True)
            base = np.array([ordering.offsets[make_key(int(u))] if make_key(int(u)) in ordering else -1
                             for u in uniq])[inv]
            return np.where(base[:, None] >= 0, base[:, None] + np.arange(dim), -1)

        idx[:, 0:6] = block(pose_key, self.host, 6)
        idx[:, 6:8] = block(affine_key, self.host, 2)
        idx[:, 8:14] = block(pose_key, self.target, 6)
        idx[:, 14:16] = block(affine_key, self.target, 2)
        idx[:, 16:17] = block(idepth_key, self.point, 1)
        self._index_cache = (ordering, idx)
        return idx


def photometric_energy(factors: Iterable[PhotometricFactor], values) -> float:
    """``E_photo``: sum over points and observations of weighted Huber residuals."""
    factors = list(factors)
    batch = _Batch(factors)
    if batch.n == 0:
        return 0.0
    r = batch.evaluate(values, False)[0]
    return float(np.sum(batch.w_pix * huber_energy(r, factors[0].gamma)))


def photometric_rms(factors: Iterable[PhotometricFactor], values) -> float:
    """Root-mean-square photometric error ``sqrt(E_photo / n_residuals)``."""
    factors = list(factors)
    n = sum(8 * len(f.observations) for f in factors)
    if n == 0:
        return 0.0
    return math.sqrt(photometric_energy(factors, values) / n)


def homography_inverse(R_th: np.ndarray, t_th: np.ndarray, idepth: float,
                       camera: PinholeCamera) -> np.ndarray:
    """Inverse of the plane-induced homography ``K (R + d t e3^T) K^-1``.

    The plane is fronto-parallel in the host frame at depth ``1/d``, which is
    the surface implied by warping every pattern pixel with one inverse depth.
    """
    K = camera.K
    Hm = K @ (R_th + idepth * np.outer(t_th, [0.0, 0.0, 1.0])) @ np.linalg.inv(K)
    return np.linalg.inv(Hm)


def select_marginalization_victim(frames: Sequence[int], centers: Mapping[int, np.ndarray],
                                  visible_fraction: Mapping[int, float], max_frames: int = 8,
                                  min_visible: float = 0.05) -> int | None:
    """Choose the keyframe to marginalize next.

    Args:
        frames: Active keyframe ids in temporal order (newest last).
        centers: Camera centers per frame.
        visible_fraction: Per frame, share of its hosted points that are still
            visible in the newest frame.
        max_frames: Window size ``N_f``; nothing is removed while the window
            holds at most ``N_f - 1`` frames.

    Returns:
        The chosen frame, or ``None`` when under capacity. The two newest frames
        are never chosen.
    """
    frames = list(frames)
    if len(frames) <= max_frames - 1:
        return None
    candidates = frames[:-2]
    for f in candidates:
        if visible_fraction.get(f, 1.0) < min_visible:
            return f
    newest = frames[-1]
    best, best_score = None, -np.inf
    for f in candidates:
        c = np.asarray(centers[f])
        score = 0.0
        for g in frames:
            if g != f:
                score += 1.0 / (1e-5 + float(np.linalg.norm(c - centers[g])))
        score *= math.sqrt(float(np.linalg.norm(c - centers[newest])))
        if score > best_score:
            best, best_score = f, score
    return best
