"""Dense float64 linear algebra kernels.

Everything downstream (band decompositions, Haar sampling, retractions)
goes through these few functions so the tolerance and sign conventions
live in one place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMMETRY_TOL = 1e-12
RANK_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


class NumericsError(ValueError):
    pass


class NotSquare(NumericsError):
    pass


class NotSymmetric(NumericsError):
    pass


class NoConvergence(NumericsError):
    pass


class RankDeficient(NumericsError):
    pass


class Singular(NumericsError):
    pass


@dataclass(frozen=True)
class EigenPairs:
    values: np.ndarray
    vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def _as_square(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NotSquare(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericsError("matrix has non-finite entries")
    return m


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so the largest-magnitude entry of each is positive.

    Ties in magnitude go to the lowest row index (``argmax`` semantics).
    """
    if vectors.size == 0:
        return vectors
    rows = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[rows, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def jacobi_eigh(m, tol: float = 1e-12, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Cyclic Jacobi with a threshold sweep. Returns unsorted (values, vectors)."""
    a = np.array(m, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n < 2 or scale == 0.0:
        return np.diag(a).copy(), v
    target = tol * scale
    mask = ~np.eye(n, dtype=bool)
    for sweep in range(max_sweeps):
        # sum(a*a) - sum(diag**2) cancels catastrophically near convergence
        off = np.linalg.norm(a[mask])
        if off <= target:
            return np.diag(a).copy(), v
        # skip rotations on entries already negligible relative to the sweep
        threshold = 0.2 * off / (n * n) if sweep < 3 else 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= threshold or apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q]
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :]
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")


def eigh_symmetric(m, method: str = "lapack") -> EigenPairs:
    """Symmetric eigendecomposition with ascending values and fixed signs.

    ``method="jacobi"`` runs the in-house cyclic Jacobi solver; the default
    calls LAPACK, which is orders of magnitude faster on grids with a few
    thousand nodes. Both go through the same sign convention.
    """
    m = _as_square(m)
    asym = np.max(np.abs(m - m.T)) if m.size else 0.0
    if asym > SYMMETRY_TOL * max(1.0, np.max(np.abs(m), initial=0.0)):
        raise NotSymmetric(f"max asymmetry {asym:.3e}")
    m = 0.5 * (m + m.T)
    if method == "jacobi":
        values, vectors = jacobi_eigh(m)
    elif method == "lapack":
        try:
            values, vectors = np.linalg.eigh(m)
        except np.linalg.LinAlgError as exc:
            raise NoConvergence(str(exc)) from exc
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    order = np.argsort(values, kind="stable")
    return EigenPairs(values[order], fix_signs(vectors[:, order]))


def qr(m) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR. Raises RankDeficient when a diagonal entry of r vanishes."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < m.shape[1]:
        raise NumericsError(f"qr needs rows >= cols, got {m.shape}")
    q, r = np.linalg.qr(m)
    if m.shape[1] and np.min(np.abs(np.diag(r))) < RANK_TOL:
        raise RankDeficient("diagonal of r below 1e-12")
    return q, r


def polar_orthogonal(m) -> np.ndarray:
    """Nearest orthogonal matrix in Frobenius norm, U @ Vt from the SVD.

    Also accepts a stack of square matrices (leading batch axes).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise NotSquare(f"expected square matrices, got shape {m.shape}")
    if m.shape[-1] == 0:
        return m.copy()
    u, s, vt = np.linalg.svd(m)
    if np.min(s) < RANK_TOL:
        raise Singular("smallest singular value below 1e-12")
    return u @ vt


def orthogonality_error(q: np.ndarray) -> float:
    q = np.asarray(q)
    if q.size == 0:
        return 0.0
    return float(np.max(np.abs(q.T @ q - np.eye(q.shape[1]))))
