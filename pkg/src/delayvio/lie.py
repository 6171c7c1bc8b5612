"""SO(3), SE(3) and Sim(3) value types and the boxplus/boxminus calculus.

Conventions used throughout the package:

* Rotations are stored as unit quaternions ``(w, x, y, z)`` and expose a
  cached 3x3 matrix.
* Perturbations are applied on the left: ``boxplus(X, d) = Exp(d) * X`` and
  ``boxminus(A, B) = Log(A * B^-1)``.
* SE(3) tangent vectors are ordered ``(rotation(3), translation(3))``.
* Vector-valued blocks use plain addition and subtraction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

SMALL_ANGLE = 1e-8


class StructureError(ValueError):
    """Raised when two state blocks do not share the same layout."""


def hat(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rotation matrix of the rotation vector ``omega`` (Rodrigues)."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    K = hat(omega)
    if theta2 < SMALL_ANGLE**2:
        return np.eye(3) + K + 0.5 * (K @ K)
    theta = math.sqrt(theta2)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix, valid on the whole group."""
    w = vee(R - R.T)  # 2 sin(theta) * axis
    s = 0.5 * float(np.linalg.norm(w))
    c = 0.5 * (float(np.trace(R)) - 1.0)
    theta = math.atan2(s, c)
    if theta < 1e-6:
        return 0.5 * (1.0 + theta * theta / 6.0) * w
    if math.pi - theta > 1e-4:
        return theta / (2.0 * math.sin(theta)) * w
    # Near pi the antisymmetric part vanishes; recover the axis from R + R^T.
    S = 0.5 * (R + R.T) - c * np.eye(3)
    i = int(np.argmax(np.diag(S)))
    axis = S[:, i] / math.sqrt(max(S[i, i], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ w < 0.0:
        axis = -axis
    return theta * axis


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """``Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)``."""
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    K = hat(phi)
    if theta2 < 1e-10:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    theta = math.sqrt(theta2)
    return (np.eye(3) - (1.0 - math.cos(theta)) / theta2 * K
            + (theta - math.sin(theta)) / (theta2 * theta) * (K @ K))


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    K = hat(phi)
    if theta2 < 1e-10:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    theta = math.sqrt(theta2)
    coef = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + coef * (K @ K)


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    return so3_right_jacobian(-np.asarray(phi, dtype=float))


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    return so3_right_jacobian_inv(-np.asarray(phi, dtype=float))


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` (Shepperd's method)."""
    tr = float(np.trace(R))
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        r = math.sqrt(1.0 + tr)
        q = np.array([0.5 * r, (R[2, 1] - R[1, 2]) / (2 * r),
                      (R[0, 2] - R[2, 0]) / (2 * r), (R[1, 0] - R[0, 1]) / (2 * r)])
    else:
        i = k - 1
        j, m = (i + 1) % 3, (i + 2) % 3
        r = math.sqrt(max(1.0 + R[i, i] - R[j, j] - R[m, m], 0.0))
        q = np.empty(4)
        q[1 + i] = 0.5 * r
        q[0] = (R[m, j] - R[j, m]) / (2 * r)
        q[1 + j] = (R[j, i] + R[i, j]) / (2 * r)
        q[1 + m] = (R[m, i] + R[i, m]) / (2 * r)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def matrix_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Rotation3:
    """Element of SO(3) backed by a normalized quaternion ``(w, x, y, z)``."""

    quat: np.ndarray
    matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float)
        q = q / np.linalg.norm(q)
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "matrix", matrix_from_quat(q))

    @classmethod
    def identity(cls) -> Rotation3:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, R: np.ndarray) -> Rotation3:
        return cls(quat_from_matrix(np.asarray(R, dtype=float)))

    @classmethod
    def exp(cls, omega: np.ndarray) -> Rotation3:
        omega = np.asarray(omega, dtype=float)
        theta = float(np.linalg.norm(omega))
        if theta < SMALL_ANGLE:
            half = 0.5 - theta * theta / 48.0
            return cls(np.array([1.0 - theta * theta / 8.0, *(half * omega)]))
        return cls(np.array([math.cos(0.5 * theta),
                             *(math.sin(0.5 * theta) / theta * omega)]))

    def log(self) -> np.ndarray:
        w, v = self.quat[0], self.quat[1:]
        n = float(np.linalg.norm(v))
        if n < SMALL_ANGLE:
            return 2.0 * v / w * (1.0 - n * n / (3.0 * w * w))
        return 2.0 * math.atan2(n, w) / n * v

    def inverse(self) -> Rotation3:
        q = self.quat
        return Rotation3(np.array([q[0], -q[1], -q[2], -q[3]]))

    def compose(self, other: Rotation3) -> Rotation3:
        return Rotation3(_quat_mul(self.quat, other.quat))

    __matmul__ = compose

    def act(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v

    def boxplus(self, delta: np.ndarray) -> Rotation3:
        return Rotation3.exp(delta).compose(self)

    def boxminus(self, other: Rotation3) -> np.ndarray:
        return self.compose(other.inverse()).log()

    def __repr__(self) -> str:
        return f"Rotation3(log={np.round(self.log(), 6).tolist()})"


def se3_exp(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    omega, rho = xi[:3], xi[3:]
    return so3_exp(omega), so3_left_jacobian(omega) @ rho


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3); maps ``x`` to ``R x + t``."""

    rotation: Rotation3
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(Rotation3.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> RigidTransform:
        return cls(Rotation3.from_matrix(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> RigidTransform:
        return cls(Rotation3.from_matrix(R), t)

    @classmethod
    def exp(cls, xi: np.ndarray) -> RigidTransform:
        xi = np.asarray(xi, dtype=float)
        omega = xi[:3]
        return cls(Rotation3.exp(omega), so3_left_jacobian(omega) @ xi[3:])

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def log(self) -> np.ndarray:
        omega = self.rotation.log()
        return np.concatenate([omega, so3_left_jacobian_inv(omega) @ self.translation])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> RigidTransform:
        inv = self.rotation.inverse()
        return RigidTransform(inv, -(inv.matrix @ self.translation))

    def compose(self, other: RigidTransform) -> RigidTransform:
        return RigidTransform(self.rotation.compose(other.rotation),
                              self.R @ other.translation + self.translation)

    __matmul__ = compose

    def act(self, p: np.ndarray) -> np.ndarray:
        return self.R @ p + self.translation

    def boxplus(self, xi: np.ndarray) -> RigidTransform:
        return RigidTransform.exp(xi).compose(self)

    def boxminus(self, other: RigidTransform) -> np.ndarray:
        return self.compose(other.inverse()).log()

    def __repr__(self) -> str:
        return (f"RigidTransform(rot={np.round(self.rotation.log(), 6).tolist()}, "
                f"t={np.round(self.translation, 6).tolist()})")


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """Element of Sim(3) acting as ``x -> s R x + t``."""

    rotation: Rotation3
    translation: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0.0:
            raise ValueError(f"similarity scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> SimilarityTransform:
        return cls(Rotation3.identity(), np.zeros(3), 1.0)

    @classmethod
    def pure_scale(cls, s: float) -> SimilarityTransform:
        return cls(Rotation3.identity(), np.zeros(3), s)

    @classmethod
    def from_rigid(cls, T: RigidTransform) -> SimilarityTransform:
        return cls(T.rotation, T.translation, 1.0)

    @classmethod
    def from_rotation(cls, rotation: Rotation3) -> SimilarityTransform:
        return cls(rotation, np.zeros(3), 1.0)

    def to_rigid(self, tol: float = 1e-9) -> RigidTransform:
        if abs(self.scale - 1.0) > tol:
            raise ValueError(f"scale {self.scale} is not 1; not an SE(3) element")
        return RigidTransform(self.rotation, self.translation)

    def inverse(self) -> SimilarityTransform:
        inv = self.rotation.inverse()
        return SimilarityTransform(inv, -(inv.matrix @ self.translation) / self.scale,
                                   1.0 / self.scale)

    def compose(self, other: SimilarityTransform) -> SimilarityTransform:
        return SimilarityTransform(
            self.rotation.compose(other.rotation),
            self.scale * (self.rotation.matrix @ other.translation) + self.translation,
            self.scale * other.scale)

    __matmul__ = compose

    def act(self, p: np.ndarray) -> np.ndarray:
        return self.scale * (self.rotation.matrix @ p) + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation.matrix
        T[:3, 3] = self.translation
        return T


@dataclass(frozen=True, eq=False)
class GravityRotation:
    """Rotation ``Rx(roll) Ry(pitch) Rz(yaw)`` whose yaw never changes.

    The yaw of the inertial frame is unobservable from inertial data, so only
    roll and pitch form the tangent space (dimension 2).
    """

    roll: float
    pitch: float
    yaw: float = 0.0

    @property
    def matrix(self) -> np.ndarray:
        return rot_x(self.roll) @ rot_y(self.pitch) @ rot_z(self.yaw)

    @property
    def rotation(self) -> Rotation3:
        return Rotation3.from_matrix(self.matrix)

    def tangent_axes(self) -> np.ndarray:
        """Columns ``u_k`` with ``dR/d(theta_k) = [u_k]x R``."""
        return np.column_stack([[1.0, 0.0, 0.0], rot_x(self.roll) @ np.array([0.0, 1.0, 0.0])])

    def up(self) -> np.ndarray:
        """The inertial z-axis expressed in the rotated frame."""
        return self.matrix[:, 2]

    @classmethod
    def from_up(cls, up: np.ndarray, yaw: float = 0.0) -> GravityRotation:
        """Roll/pitch that map the inertial z-axis onto ``up``."""
        u = np.asarray(up, dtype=float)
        u = u / np.linalg.norm(u)
        pitch = math.asin(float(np.clip(u[0], -1.0, 1.0)))
        roll = math.atan2(-u[1], u[2])
        return cls(roll, pitch, yaw)

    def boxplus(self, delta: np.ndarray) -> GravityRotation:
        return GravityRotation(self.roll + float(delta[0]), self.pitch + float(delta[1]), self.yaw)

    def boxminus(self, other: GravityRotation) -> np.ndarray:
        d = np.array([self.roll - other.roll, self.pitch - other.pitch])
        return (d + math.pi) % (2.0 * math.pi) - math.pi


def _flatten(x: Any) -> list:
    if isinstance(x, Mapping):
        return [(k, x[k]) for k in x]
    if isinstance(x, (list, tuple)):
        return list(enumerate(x))
    return [(None, x)]


def _value_dim(x: Any) -> tuple[type, int]:
    if isinstance(x, RigidTransform):
        return RigidTransform, 6
    if isinstance(x, Rotation3):
        return Rotation3, 3
    if isinstance(x, GravityRotation):
        return GravityRotation, 2
    return np.ndarray, np.size(x)


def boxminus(a: Any, b: Any) -> np.ndarray:
    """``a [-] b`` for single values or whole state blocks.

    State blocks are sequences or mappings of values; both arguments must share
    the same layout. Group elements use ``Log(A B^-1)`` and vectors use ``a - b``.
    """
    fa, fb = _flatten(a), _flatten(b)
    if len(fa) != len(fb):
        raise StructureError(f"block sizes differ: {len(fa)} vs {len(fb)}")
    out = []
    for (ka, va), (kb, vb) in zip(fa, fb):
        if ka != kb or _value_dim(va) != _value_dim(vb):
            raise StructureError(f"mismatched block layout at {ka!r} / {kb!r}")
        if isinstance(va, (RigidTransform, Rotation3, GravityRotation)):
            out.append(va.boxminus(vb))
        else:
            out.append(np.atleast_1d(np.asarray(va, dtype=float) - np.asarray(vb, dtype=float)))
    return np.concatenate(out) if out else np.zeros(0)


def boxplus(x: Any, delta: np.ndarray) -> Any:
    """Inverse of :func:`boxminus`: ``boxplus(b, boxminus(a, b)) == a``."""
    delta = np.asarray(delta, dtype=float)
    items = _flatten(x)
    results = []
    pos = 0
    for _, v in items:
        _, n = _value_dim(v)
        d = delta[pos:pos + n]
        pos += n
        if isinstance(v, (RigidTransform, Rotation3, GravityRotation)):
            results.append(v.boxplus(d))
        elif np.ndim(v) == 0:
            results.append(float(v) + float(d[0]))
        else:
            results.append(np.asarray(v, dtype=float) + d)
    if pos != delta.size:
        raise StructureError(f"tangent size {delta.size} does not match block dimension {pos}")
    if isinstance(x, Mapping):
        return {k: r for (k, _), r in zip(items, results)}
    if isinstance(x, (list, tuple)):
        return type(x)(results)
    return results[0]


def tangent_dim(x: Any) -> int:
    return sum(_value_dim(v)[1] for _, v in _flatten(x))


def random_rotation(rng: np.random.Generator, max_angle: float = math.pi) -> Rotation3:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Rotation3.exp(axis * rng.uniform(0.0, max_angle))


def random_transform(rng: np.random.Generator, translation_scale: float = 1.0,
                     max_angle: float = math.pi) -> RigidTransform:
    return RigidTransform(random_rotation(rng, max_angle), rng.normal(size=3) * translation_scale)


def mean_rotation_error_deg(a: Sequence[Rotation3], b: Sequence[Rotation3]) -> float:
    errs = [np.linalg.norm(x.boxminus(y)) for x, y in zip(a, b)]
    return float(np.degrees(np.mean(errs))) if errs else 0.0
