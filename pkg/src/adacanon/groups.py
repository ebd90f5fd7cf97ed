"""Sampling and local refinement over O(m), SO(3) and small S_n.

Random draws always come from an ``RngStream``: a (seed, stream-id) pair
that is turned into a fresh counter-based generator on use, so the same
pair reproduces the same draws no matter who consumed what before.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import NumericsError, polar_orthogonal

DEFAULT_STEP_SIZE = 0.05
DEFAULT_REFINE_STEPS = 10
MAX_HALVINGS = 5
FD_STEP = 1e-5
MAX_PERMUTATION_N = 8


class NonFiniteGradient(ArithmeticError):
    pass


class TooLarge(ValueError):
    pass


def stream_id(*parts) -> int:
    """Stable 64-bit id for a tuple of labels such as (class, band, fold)."""
    digest = hashlib.blake2b(repr(tuple(parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        key = [self.seed & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))

    def child(self, *parts) -> "RngStream":
        return RngStream(self.seed, stream_id(self.stream, *parts))


def _gen(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng)!r}")


def haar_orthogonal_batch(m: int, count: int, rng) -> np.ndarray:
    """``count`` Haar draws from O(m), shape (count, m, m).

    Draws are generated candidate-major, so the first k of a batch of K
    equal a batch of k from the same stream.
    """
    if m < 0 or count < 0:
        raise ValueError("dimension and count must be non-negative")
    gen = _gen(rng)
    if m == 0:
        return np.zeros((count, 0, 0))
    z = gen.standard_normal((count, m, m))
    q, r = np.linalg.qr(z)
    d = np.diagonal(r, axis1=-2, axis2=-1)
    bad = np.min(np.abs(d), axis=-1) < 1e-12 if count else np.zeros(0, bool)
    for i in np.flatnonzero(bad):
        # probability zero for Gaussian input; redraw just that slot
        while True:
            qi, ri = np.linalg.qr(gen.standard_normal((m, m)))
            if np.min(np.abs(np.diag(ri))) >= 1e-12:
                q[i], d[i] = qi, np.diag(ri)
                break
    return q * np.sign(d)[..., None, :]


def haar_orthogonal(m: int, rng) -> np.ndarray:
    if m < 1:
        raise ValueError("m must be >= 1")
    return haar_orthogonal_batch(m, 1, rng)[0]


def haar_rotation3_batch(count: int, rng) -> np.ndarray:
    q = haar_orthogonal_batch(3, count, rng)
    flip = np.linalg.det(q) < 0
    q[flip, :, 0] *= -1.0
    return q


def haar_rotation3(rng) -> np.ndarray:
    return haar_rotation3_batch(1, rng)[0]


def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula; the axis must be a unit vector."""
    axis = np.asarray(axis, dtype=np.float64)
    if abs(np.linalg.norm(axis) - 1.0) > 1e-12:
        raise ValueError("axis must have unit norm")
    k = skew(axis)
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def rotation_from_vector(w) -> np.ndarray:
    """exp of the skew matrix of ``w`` (axis-angle packed as angle * axis)."""
    w = np.asarray(w, dtype=np.float64)
    angle = float(np.linalg.norm(w))
    if angle < 1e-15:
        return np.eye(3) + skew(w)
    return rotation_from_axis_angle(w / angle, angle)


def axis_angle_from_rotation(r) -> tuple[np.ndarray, float]:
    r = np.asarray(r, dtype=np.float64)
    angle = math.acos(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0))
    if angle < 1e-12:
        return np.array([0.0, 0.0, 1.0]), 0.0
    if math.pi - angle < 1e-6:
        # near pi the skew part vanishes; read the axis off R + I
        b = (r + np.eye(3)) / 2.0
        col = int(np.argmax(np.diag(b)))
        axis = b[:, col] / math.sqrt(b[col, col])
        return axis / np.linalg.norm(axis), angle
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return w / (2.0 * math.sin(angle)), angle


@dataclass
class RefineResult:
    point: np.ndarray
    value: float
    start_value: float
    history: list = field(default_factory=list)
    evaluations: int = 0

    @property
    def gain(self) -> float:
        return self.value - self.start_value


def _check_grad(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("objective returned a non-finite gradient")
    return g


def refine_orthogonal(
    u0,
    objective: Callable,
    steps: int = DEFAULT_REFINE_STEPS,
    step_size: float = DEFAULT_STEP_SIZE,
) -> RefineResult:
    """Gradient ascent on O(m) with polar retraction.

    ``u0`` is one orthogonal matrix or a list of blocks (a point of
    O(m_1) x ... x O(m_B)); ``objective`` returns ``(value, gradient)`` in
    the same shape. A step that lowers the objective is retried with half
    the step size, at most five times; if none of those help the search
    stops. The returned point is the best iterate, so the value never
    drops below the start.
    """
    blockwise = isinstance(u0, (list, tuple))
    u = [np.array(b, dtype=np.float64) for b in u0] if blockwise else np.array(u0, dtype=np.float64)

    def check(g):
        return [_check_grad(x) for x in g] if blockwise else _check_grad(g)

    def retract(x, g, eta):
        if blockwise:
            return [polar_orthogonal(b + eta * gb) for b, gb in zip(x, g)]
        return polar_orthogonal(x + eta * g)

    value, grad = objective(u)
    grad = check(grad)
    result = RefineResult(u, float(value), float(value), [float(value)], 1)
    eta = step_size
    for _ in range(steps):
        improved = False
        for _ in range(MAX_HALVINGS + 1):
            try:
                cand = retract(u, grad, eta)
            except NumericsError:
                eta *= 0.5
                continue
            cand_value, cand_grad = objective(cand)
            result.evaluations += 1
            if np.isfinite(cand_value) and cand_value >= value:
                u, value, grad = cand, float(cand_value), check(cand_grad)
                improved = True
                break
            eta *= 0.5
        if not improved:
            break
        result.history.append(value)
    result.point, result.value = u, value
    return result


def rotation3_gradient(objective, r, h: float = FD_STEP) -> np.ndarray:
    """Central differences of objective(exp(w) R) in the chart w at 0."""
    g = np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        g[i] = (objective(rotation_from_vector(e) @ r) - objective(rotation_from_vector(-e) @ r)) / (2 * h)
    return g


def refine_rotation3(
    r0,
    objective: Callable[[np.ndarray], float],
    steps: int = DEFAULT_REFINE_STEPS,
    step_size: float = DEFAULT_STEP_SIZE,
    gradient: Callable[[np.ndarray], np.ndarray] | None = None,
) -> RefineResult:
    """Ascent on SO(3) through left axis-angle increments.

    ``gradient(R)``, if given, returns the Euclidean gradient (3x3); it is
    pulled back to the chart as <G, skew(e_i) R>. Otherwise the chart
    gradient comes from central finite differences.
    """
    r = np.array(r0, dtype=np.float64)

    def chart_grad(rot):
        if gradient is None:
            return _check_grad(rotation3_gradient(objective, rot))
        gm = _check_grad(gradient(rot))
        return np.array([np.sum(gm * (skew(e) @ rot)) for e in np.eye(3)])

    value = float(objective(r))
    result = RefineResult(r, value, value, [value], 1)
    if steps <= 0:
        return result
    g = chart_grad(r)
    eta = step_size
    for _ in range(steps):
        improved = False
        for _ in range(MAX_HALVINGS + 1):
            cand = rotation_from_vector(eta * g) @ r
            cand = polar_orthogonal(cand)
            cand_value = float(objective(cand))
            result.evaluations += 1
            if np.isfinite(cand_value) and cand_value >= value:
                r, value = cand, cand_value
                improved = True
                break
            eta *= 0.5
        if not improved:
            break
        result.history.append(value)
        g = chart_grad(r)
    result.point, result.value = r, value
    return result


def enumerate_permutations(n: int) -> np.ndarray:
    """All n! permutations in lexicographic order, one per row."""
    if n > MAX_PERMUTATION_N:
        raise TooLarge(f"refusing to enumerate {n}! permutations")
    if n < 0:
        raise ValueError("n must be non-negative")
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)


def is_permutation(mapping) -> bool:
    mapping = np.asarray(mapping)
    return mapping.ndim == 1 and np.array_equal(np.sort(mapping), np.arange(mapping.size))
