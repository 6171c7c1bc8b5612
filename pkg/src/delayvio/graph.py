"""Nonlinear least-squares factor graphs solved with Levenberg-Marquardt.

The objective minimized is ``F(x) = sum_f e_f(x)`` where a residual factor
contributes ``e_f = 1/2 r^T W r``. Linearizing around ``x`` gives
``F(x [+] d) ~= F(x) - b^T d + 1/2 d^T H d`` with ``H = sum J^T W J`` and
``b = -sum J^T W r``, so ``b`` is the negative gradient.
"""
from __future__ import annotations

import logging
import math
from collections import namedtuple
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg

from .lie import hat, so3_left_jacobian_inv

log = logging.getLogger(__name__)

Key = namedtuple("Key", ["kind", "index"])
Key.__repr__ = lambda self: f"{self.kind}{self.index}"

POSE, VEL, BIAS, AFFINE, IDEPTH, SCALE, GRAVITY = (
    "pose", "vel", "bias", "affine", "idepth", "scale", "gravity")


def pose_key(i: int) -> Key:
    return Key(POSE, i)


def vel_key(i: int) -> Key:
    return Key(VEL, i)


def bias_key(i: int) -> Key:
    return Key(BIAS, i)


def affine_key(i: int) -> Key:
    return Key(AFFINE, i)


def idepth_key(i: int) -> Key:
    return Key(IDEPTH, i)


SCALE_KEY = Key(SCALE, 0)
GRAVITY_KEY = Key(GRAVITY, 0)


class StructuralError(KeyError):
    """A factor or query references a key that the values do not contain."""


class DivergedError(RuntimeError):
    """The normal equations stayed singular up to the maximum damping."""


class UnobservableError(np.linalg.LinAlgError):
    """The information matrix is singular in the requested direction."""


def _plus_pose(x, d):
    return x.boxplus(d)


def _minus_pose(a, b):
    return a.boxminus(b)


def _plus_vec(x, d):
    return x + d


def _minus_vec(a, b):
    return a - b


def _plus_scalar(x, d):
    return x + float(d[0])


def _minus_scalar(a, b):
    return np.array([a - b])


def _plus_log(x, d):
    return x * math.exp(float(d[0]))


def _minus_log(a, b):
    return np.array([math.log(a / b)])


def _plus_grav(x, d):
    return x.boxplus(d)


def _minus_grav(a, b):
    return a.boxminus(b)


# kind -> (tangent dim, boxplus, boxminus)
MANIFOLDS: dict[str, tuple[int, Callable, Callable]] = {
    POSE: (6, _plus_pose, _minus_pose),
    VEL: (3, _plus_vec, _minus_vec),
    BIAS: (6, _plus_vec, _minus_vec),
    AFFINE: (2, _plus_vec, _minus_vec),
    IDEPTH: (1, _plus_scalar, _minus_scalar),
    SCALE: (1, _plus_log, _minus_log),
    GRAVITY: (2, _plus_grav, _minus_grav),
}


def key_dim(key: Key) -> int:
    return MANIFOLDS[key.kind][0]


def retract(key: Key, value, delta: np.ndarray):
    return MANIFOLDS[key.kind][1](value, delta)


def local(key: Key, a, b) -> np.ndarray:
    """``a [-] b`` for a value of the given key kind."""
    return MANIFOLDS[key.kind][2](a, b)


class Values(dict):
    """Mapping from :class:`Key` to state-block value."""

    def copy(self) -> Values:
        return Values(self)

    def retract(self, ordering: Ordering, delta: np.ndarray) -> Values:
        out = Values(self)
        for key, off, dim in ordering.blocks():
            out[key] = retract(key, self[key], delta[off:off + dim])
        return out

    def local(self, other: Values, ordering: Ordering) -> np.ndarray:
        return np.concatenate([local(k, self[k], other[k]) for k in ordering.keys]) \
            if ordering.keys else np.zeros(0)


class Ordering:
    """Assignment of keys to contiguous slices of the tangent vector."""

    def __init__(self, keys: Iterable[Key]):
        self.keys = list(keys)
        self.offsets: dict[Key, int] = {}
        off = 0
        for k in self.keys:
            if k in self.offsets:
                raise StructuralError(f"duplicate key {k}")
            self.offsets[k] = off
            off += key_dim(k)
        self.dim = off

    def __contains__(self, key) -> bool:
        return key in self.offsets

    def __len__(self) -> int:
        return len(self.keys)

    def slice(self, key: Key) -> slice:
        o = self.offsets[key]
        return slice(o, o + key_dim(key))

    def indices(self, keys: Iterable[Key]) -> np.ndarray:
        parts = [np.arange(self.offsets[k], self.offsets[k] + key_dim(k)) for k in keys]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=int)

    def blocks(self):
        for k in self.keys:
            yield k, self.offsets[k], key_dim(k)


@dataclass
class LinearSystem:
    H: np.ndarray
    b: np.ndarray
    ordering: Ordering


class Factor:
    """Base class: a term of the objective connected to ``keys``.

    Subclasses implement :meth:`linearize` returning ``(H, b)`` over the
    concatenated tangent spaces of ``keys`` and :meth:`energy`.
    """

    keys: tuple[Key, ...] = ()
    visual = False

    def energy(self, values: Values) -> float:
        raise NotImplementedError

    def linearize(self, values: Values) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    @property
    def dims(self) -> list[int]:
        return [key_dim(k) for k in self.keys]


class ResidualFactor(Factor):
    """Factor ``1/2 rho(r^T W r)`` with analytic Jacobians.

    Args:
        keys: Connected variables.
        information: Weight matrix ``W`` (or a scalar).
        huber: Optional Huber threshold on the whitened residual norm.
    """

    def __init__(self, keys: Sequence[Key], information=1.0, huber: float | None = None):
        self.keys = tuple(keys)
        self.information = information
        self.huber = huber

    def evaluate(self, values: Values, jacobians: bool = True):
        """Return ``(r, [J_k])`` with one Jacobian per key (``None`` if not requested)."""
        raise NotImplementedError

    def _weighted(self, r):
        W = self.information
        return W @ r if np.ndim(W) == 2 else W * r

    def _robust_weight(self, chi2: float) -> float:
        if self.huber is None:
            return 1.0
        e = math.sqrt(chi2)
        return 1.0 if e <= self.huber else self.huber / e

    def energy(self, values: Values) -> float:
        r, _ = self.evaluate(values, jacobians=False)
        chi2 = float(r @ self._weighted(r))
        if self.huber is not None and chi2 > self.huber**2:
            e = math.sqrt(chi2)
            return 0.5 * (2.0 * self.huber * e - self.huber**2)
        return 0.5 * chi2

    def linearize(self, values: Values):
        r, Js = self.evaluate(values, jacobians=True)
        J = np.hstack(Js)
        WJ = self._weighted(J)
        w = self._robust_weight(float(r @ self._weighted(r)))
        return w * (J.T @ WJ), -w * (WJ.T @ r)


class PriorFactor(ResidualFactor):
    """Unary factor ``r = x [-] x0``.

    ``visual`` marks gauge priors that belong to the visual subproblem and are
    therefore replayed in the delayed graph.
    """

    def __init__(self, key: Key, prior, information=1.0, visual: bool = False):
        super().__init__([key], information)
        self.prior = prior
        self.visual = visual

    def evaluate(self, values, jacobians=True):
        key = self.keys[0]
        r = local(key, values[key], self.prior)
        if not jacobians:
            return r, None
        if key.kind == POSE:
            # d/dd Log(Exp(d) X X0^-1) at the current error
            J = se3_left_jacobian_inv(r)
        elif key.kind == GRAVITY:
            J = np.eye(2)
        else:
            J = np.eye(r.size)
        return r, [J]


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse left Jacobian of SE(3) in (rotation, translation) ordering."""
    omega, rho = xi[:3], xi[3:]
    theta = float(np.linalg.norm(omega))
    Jl_inv = so3_left_jacobian_inv(omega)
    Q = _se3_q(omega, rho, theta)
    out = np.zeros((6, 6))
    out[:3, :3] = Jl_inv
    out[3:, 3:] = Jl_inv
    out[3:, :3] = -Jl_inv @ Q @ Jl_inv
    return out


def _se3_q(omega, rho, theta):
    W, P = hat(omega), hat(rho)
    WP, PW, WPW = W @ P, P @ W, W @ P @ W
    if theta < 1e-4:
        return 0.5 * P + (WP + PW + WPW) / 6.0 - (W @ WP + PW @ W - 3.0 * WPW) / 24.0
    t2 = theta * theta
    s, c = math.sin(theta), math.cos(theta)
    a = (theta - s) / (t2 * theta)
    bb = (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2)
    cc = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta)
    return (0.5 * P + a * (WP + PW + WPW) + bb * (W @ WP + PW @ W - 3.0 * WPW)
            + cc * (WPW @ W + W @ WPW))


class FactorGraph:
    """A bag of factors with dense linearization."""

    def __init__(self, factors: Iterable[Factor] = ()):
        self.factors: list[Factor] = list(factors)

    def add(self, factor: Factor) -> Factor:
        self.factors.append(factor)
        return factor

    def remove(self, factors: Iterable[Factor]) -> None:
        drop = {id(f) for f in factors}
        self.factors = [f for f in self.factors if id(f) not in drop]

    def keys(self) -> list[Key]:
        seen: dict[Key, None] = {}
        for f in self.factors:
            for k in f.keys:
                seen.setdefault(k, None)
        return list(seen)

    def touching(self, keys: Iterable[Key]) -> list[Factor]:
        ks = set(keys)
        return [f for f in self.factors if ks.intersection(f.keys)]

    def __len__(self) -> int:
        return len(self.factors)

    def _split(self):
        """Separate factors that provide vectorized batch evaluation."""
        plain, batched = [], {}
        for f in self.factors:
            if hasattr(type(f), "linearize_batch"):
                batched.setdefault(type(f), []).append(f)
            else:
                plain.append(f)
        return plain, batched

    def energy(self, values: Values) -> float:
        plain, batched = self._split()
        total = sum(f.energy(values) for f in plain)
        for cls, fs in batched.items():
            total += cls.energy_batch(fs, values)
        return float(total)

    def linearize(self, values: Values, ordering: Ordering | None = None) -> LinearSystem:
        """Dense normal equations over ``ordering`` (default: all keys).

        Keys absent from the ordering are treated as constants.
        """
        if ordering is None:
            ordering = Ordering(self.keys())
        H = np.zeros((ordering.dim, ordering.dim))
        b = np.zeros(ordering.dim)
        plain, batched = self._split()
        for f in self.factors:
            for k in f.keys:
                if k not in values:
                    raise StructuralError(f"factor {type(f).__name__} references missing key {k}")
        for cls, fs in batched.items():
            cls.linearize_batch(fs, values, ordering, H, b)
        for f in plain:
            Hf, bf = f.linearize(values)
            rows, idx = [], []
            off = 0
            for k in f.keys:
                d = key_dim(k)
                if k in ordering:
                    rows.append(np.arange(off, off + d))
                    o = ordering.offsets[k]
                    idx.append(np.arange(o, o + d))
                off += d
            if not rows:
                continue
            rows = np.concatenate(rows)
            idx = np.concatenate(idx)
            H[np.ix_(idx, idx)] += Hf[np.ix_(rows, rows)]
            b[idx] += bf[rows]
        H = 0.5 * (H + H.T)
        return LinearSystem(H, b, ordering)


def numeric_jacobians(factor: ResidualFactor, values: Values, eps: float = 1e-6) -> list[np.ndarray]:
    """Central-difference Jacobians of ``factor.evaluate`` w.r.t. each key's tangent."""
    out = []
    for k in factor.keys:
        d = key_dim(k)
        cols = []
        for i in range(d):
            e = np.zeros(d)
            e[i] = eps
            vp, vm = values.copy(), values.copy()
            vp[k] = retract(k, values[k], e)
            vm[k] = retract(k, values[k], -e)
            rp, _ = factor.evaluate(vp, jacobians=False)
            rm, _ = factor.evaluate(vm, jacobians=False)
            cols.append((rp - rm) / (2 * eps))
        out.append(np.column_stack(cols))
    return out


@dataclass
class LMConfig:
    initial_lambda: float = 1e-4
    max_lambda: float = 1e12
    max_iterations: int = 50
    rel_energy_tol: float = 1e-6
    step_tol: float = 1e-8


@dataclass
class LMResult:
    values: Values
    energy: float
    initial_energy: float
    iterations: int
    converged: bool
    energies: list


def _damped_solve(H, b, lam):
    D = np.maximum(np.diag(H), 1e-6)
    A = H + lam * np.diag(D)
    c, low = scipy.linalg.cho_factor(A, check_finite=False)
    return scipy.linalg.cho_solve((c, low), b, check_finite=False)


def solve_lm(graph: FactorGraph, initial: Values, config: LMConfig | None = None,
             fixed: Iterable[Key] = (), ordering: Ordering | None = None) -> LMResult:
    """Levenberg-Marquardt with Marquardt (diagonal) damping.

    Args:
        graph: Factors to minimize.
        initial: Starting values; not modified.
        config: Damping and stopping parameters.
        fixed: Keys held constant.
        ordering: Optional explicit variable ordering (overrides ``fixed``).

    Raises:
        DivergedError: if the damped system cannot be factorized at ``max_lambda``.
    """
    cfg = config or LMConfig()
    if ordering is None:
        fixed = set(fixed)
        ordering = Ordering(k for k in graph.keys() if k not in fixed)
    values = initial.copy()
    energy = graph.energy(values)
    e0 = energy
    energies = [energy]
    lam = cfg.initial_lambda
    converged = False
    it = 0
    if ordering.dim == 0:
        return LMResult(values, energy, e0, 0, True, energies)
    while it < cfg.max_iterations:
        it += 1
        sys_ = graph.linearize(values, ordering)
        while True:
            try:
                delta = _damped_solve(sys_.H, sys_.b, lam)
            except np.linalg.LinAlgError:
                lam *= 10.0
                if lam > cfg.max_lambda:
                    raise DivergedError("normal equations singular at maximum damping")
                continue
            if not np.all(np.isfinite(delta)):
                raise DivergedError("non-finite LM step")
            if np.linalg.norm(delta) < cfg.step_tol:
                return LMResult(values, energy, e0, it, True, energies)
            candidate = values.retract(ordering, delta)
            try:
                new_energy = graph.energy(candidate)
            except ValueError:  # step left a variable's domain (e.g. scale underflow)
                new_energy = math.inf
            if np.isfinite(new_energy) and new_energy <= energy:
                rel = (energy - new_energy) / max(energy, 1e-300)
                values, energy = candidate, new_energy
                energies.append(energy)
                lam = max(lam * 0.5, 1e-12)
                if rel < cfg.rel_energy_tol or energy == 0.0:
                    converged = True
                break
            lam *= 2.0
            if lam > cfg.max_lambda:
                log.debug("LM could not decrease energy; stopping at lambda %.3g", lam)
                return LMResult(values, energy, e0, it, True, energies)
        if converged:
            break
    return LMResult(values, energy, e0, it, converged, energies)


def information_cholesky(H: np.ndarray, rel_pivot_tol: float = 1e-12):
    """Jacobi-scaled Cholesky factor of ``H``.

    Raises:
        UnobservableError: if ``H`` is not numerically positive definite.
    """
    d = np.diag(H).copy()
    if np.any(d <= 0.0):
        raise UnobservableError("information matrix has a non-positive diagonal entry")
    s = 1.0 / np.sqrt(d)
    Hs = H * s[:, None] * s[None, :]
    try:
        c, low = scipy.linalg.cho_factor(Hs, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise UnobservableError("information matrix is not positive definite") from exc
    piv = np.diag(c)
    if np.min(piv) ** 2 < rel_pivot_tol:
        raise UnobservableError(f"information matrix is near singular (pivot {np.min(piv):.3g})")
    return (c, low), s


def covariance_block(H: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Rows/columns ``idx`` of ``H^-1`` without forming the full inverse."""
    factor, s = information_cholesky(H)
    E = np.zeros((H.shape[0], len(idx)))
    E[idx, np.arange(len(idx))] = s[idx]
    X = scipy.linalg.cho_solve(factor, E, check_finite=False)
    cov = s[idx][:, None] * X[idx]
    return 0.5 * (cov + cov.T)


def marginal_covariance(graph: FactorGraph, values: Values, key: Key | Sequence[Key],
                        fixed: Iterable[Key] = ()) -> np.ndarray:
    """Marginal covariance (diagonal block of ``H^-1``) of ``key`` in its tangent space."""
    keys = [key] if isinstance(key, Key) else list(key)
    fixed = set(fixed)
    ordering = Ordering(k for k in graph.keys() if k not in fixed)
    for k in keys:
        if k not in ordering:
            raise StructuralError(f"{k} is not a free variable of the graph")
    sys_ = graph.linearize(values, ordering)
    return covariance_block(sys_.H, ordering.indices(keys))
