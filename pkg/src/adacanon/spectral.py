"""Graph spectral machinery and the anisotropic nonlinear spectral filter.

Pipeline for one graph: GSO -> eigenpairs -> dyadic bands -> per-band
coefficients C_k = X_k^T S -> per-class orientation U_k in O(M_k) ->
truncate/pad to J_k rows -> flatten -> phi -> Psi_d -> logit s_d.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .canon import Budget, Prior, Scorer, TransformationFamily
from .groups import (MAX_HALVINGS, RefineResult, RngStream, haar_orthogonal_batch,
                     refine_orthogonal)
from .nn import MlpParams, ShapeMismatch, bce_with_logits, init_mlp, mlp_backward, mlp_forward
from .numerics import EigenPairs, eigh_symmetric

BOUNDARY_SNAP = 1e-9
CACHE_MAGIC = b"ACDECMP1"


class AsymmetricAdjacency(ValueError):
    pass


class NegativeWeight(ValueError):
    pass


class BadDecay(ValueError):
    pass


class BlockDimMismatch(ValueError):
    pass


class DimMismatch(ValueError):
    pass


@dataclass
class Graph:
    adjacency: np.ndarray
    signal: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        self.signal = np.asarray(self.signal, dtype=np.float64)
        if self.signal.ndim == 1:
            self.signal = self.signal[:, None]
        if self.signal.shape[0] != self.adjacency.shape[0]:
            raise ShapeMismatch("signal rows must match node count")

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    def fingerprint(self) -> str:
        a = np.ascontiguousarray(self.adjacency, dtype="<f8")
        return hashlib.sha256(a.tobytes()).hexdigest()[:16]


def _check_adjacency(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise AsymmetricAdjacency(f"adjacency must be square, got {a.shape}")
    if a.size and np.max(np.abs(a - a.T)) > 1e-12:
        raise AsymmetricAdjacency("adjacency is not symmetric")
    if np.any(a < 0):
        raise NegativeWeight("adjacency has negative weights")
    return a


def normalized_laplacian(adjacency) -> np.ndarray:
    """I - D^-1/2 A D^-1/2; isolated nodes keep an identity row."""
    if isinstance(adjacency, Graph):
        adjacency = adjacency.adjacency
    a = _check_adjacency(adjacency)
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    lap = np.eye(a.shape[0]) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    return 0.5 * (lap + lap.T)


def graph_shift_operator(adjacency, kind: str = "normalized-laplacian") -> np.ndarray:
    if isinstance(adjacency, Graph):
        adjacency = adjacency.adjacency
    if kind == "normalized-laplacian":
        return normalized_laplacian(adjacency)
    a = _check_adjacency(adjacency)
    if kind == "adjacency":
        return a.copy()
    if kind == "combinatorial-laplacian":
        return np.diag(a.sum(axis=1)) - a
    raise ValueError(f"unknown GSO {kind!r}")


def apply_scalar_function(lap, f, eig: EigenPairs | None = None) -> np.ndarray:
    """f(L) = V f(Lambda) V^T."""
    eig = eig or eigh_symmetric(lap)
    return (eig.vectors * f(eig.values)) @ eig.vectors.T


@dataclass(frozen=True)
class BandPlan:
    boundaries: tuple
    decay: float | None = None

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if b.size < 2 or np.any(np.diff(b) <= 0):
            raise ValueError("band boundaries must be strictly increasing")

    @property
    def count(self) -> int:
        return len(self.boundaries) - 1

    def assign(self, values) -> np.ndarray:
        """Band index (0-based) per eigenvalue, -1 when outside the plan.

        Band k covers [b_k, b_{k+1}); the lowest band reaches down to 0 and
        the top band is closed. Values within 1e-9 * b_B of a boundary snap
        onto it first.
        """
        values = np.asarray(values, dtype=float)
        b = np.asarray(self.boundaries, dtype=float)
        tol = BOUNDARY_SNAP * b[-1]
        snapped = values.copy()
        for edge in b:
            near = np.abs(snapped - edge) <= tol
            snapped[near] = edge
        idx = np.searchsorted(b, snapped, side="right") - 1
        idx[snapped == b[-1]] = self.count - 1
        idx[(snapped < b[0]) & (snapped >= -tol)] = 0
        idx[(snapped > b[-1]) | (snapped < -tol)] = -1
        return idx

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps([float(x) for x in self.boundaries]).encode()).hexdigest()[:16]


def dyadic_band_plan(lam_max: float, decay: float, count: int) -> BandPlan:
    """b_k = lam_max * decay**(count - k), k = 0..count."""
    if not 0.0 < decay < 1.0:
        raise BadDecay(f"decay must lie in (0, 1), got {decay}")
    if count < 1 or lam_max <= 0:
        raise ValueError("need count >= 1 and lam_max > 0")
    b = [lam_max * decay ** (count - k) for k in range(count + 1)]
    return BandPlan(tuple(b), decay)


@dataclass
class BandDecomposition:
    bases: list
    values: list
    plan: BandPlan

    @property
    def dims(self) -> tuple:
        return tuple(x.shape[1] for x in self.bases)

    @property
    def n(self) -> int:
        return self.bases[0].shape[0]

    def projector(self, k: int) -> np.ndarray:
        return self.bases[k] @ self.bases[k].T

    def change_basis(self, blocks) -> "BandDecomposition":
        """Replace every X_k by X_k W_k."""
        return BandDecomposition([x @ w for x, w in zip(self.bases, blocks)], self.values, self.plan)


def band_decompose(lap, plan: BandPlan, eig: EigenPairs | None = None) -> BandDecomposition:
    eig = eig or eigh_symmetric(lap)
    idx = plan.assign(eig.values)
    bases, vals = [], []
    for k in range(plan.count):
        sel = idx == k
        bases.append(eig.vectors[:, sel])
        vals.append(eig.values[sel])
    return BandDecomposition(bases, vals, plan)


def decompose_graph(g: Graph, decay: float, count: int, gso: str = "normalized-laplacian") -> BandDecomposition:
    """Eigendecompose the GSO and cut a dyadic plan at this graph's lambda_max."""
    eig = eigh_symmetric(graph_shift_operator(g, gso))
    lam_max = float(eig.values[-1])
    if lam_max <= 0:
        lam_max = 1.0
    return band_decompose(None, dyadic_band_plan(lam_max, decay, count), eig)


@dataclass
class SpectralCoeffs:
    bands: list

    @property
    def dims(self) -> tuple:
        return tuple(c.shape[0] for c in self.bands)

    @property
    def channels(self) -> int:
        return self.bands[0].shape[1]

    def padded(self, target_dims) -> np.ndarray:
        return pad_truncate(self, target_dims)


def spectral_coefficients(dec: BandDecomposition, signal) -> SpectralCoeffs:
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim == 1:
        signal = signal[:, None]
    if signal.shape[0] != dec.n:
        raise ShapeMismatch(f"signal has {signal.shape[0]} rows, graph has {dec.n} nodes")
    return SpectralCoeffs([x.T @ signal for x in dec.bases])


def pad_truncate(coeffs, target_dims) -> np.ndarray:
    """Keep the first min(M_k, J_k) rows of each band, zero-fill to J_k, stack."""
    bands = coeffs.bands if isinstance(coeffs, SpectralCoeffs) else coeffs
    if len(bands) != len(target_dims):
        raise DimMismatch("band count differs from target dims")
    t = bands[0].shape[-1]
    out = []
    for c, j in zip(bands, target_dims):
        block = np.zeros(c.shape[:-2] + (j, t))
        keep = min(c.shape[-2], j)
        block[..., :keep, :] = c[..., :keep, :]
        out.append(block)
    return np.concatenate(out, axis=-2)


def rotate_pad_flatten(blocks, bands, target_dims) -> np.ndarray:
    """flatten(pad_truncate(U_k C_k)), band-major, then row, then channel.

    Works on stacked inputs: blocks[k] is (..., M_k, M_k) and bands[k] is
    (..., M_k, T) with broadcastable leading axes.
    """
    parts = []
    for u, c, j in zip(blocks, bands, target_dims):
        if j == 0:
            continue
        keep = min(c.shape[-2], j)
        rotated = u[..., :keep, :] @ c
        lead = np.broadcast_shapes(u.shape[:-2], c.shape[:-2])
        block = np.zeros(lead + (j, c.shape[-1]))
        block[..., :keep, :] = rotated
        parts.append(block.reshape(lead + (j * c.shape[-1],)))
    return np.concatenate(parts, axis=-1)


def _split_point_grad(grad, dims, target_dims, channels):
    """Undo the flattening: per band an (..., M_k, T) array, zeros past J_k."""
    out, pos = [], 0
    lead = grad.shape[:-1]
    for m, j in zip(dims, target_dims):
        g = np.zeros(lead + (m, channels))
        if j:
            piece = grad[..., pos:pos + j * channels].reshape(lead + (j, channels))
            keep = min(m, j)
            g[..., :keep, :] = piece[..., :keep, :]
            pos += j * channels
        out.append(g)
    return out


def identity_blocks(dims) -> list:
    return [np.eye(m) for m in dims]


class AnlsfFamily(TransformationFamily):
    """Per-band orthogonal re-orientations of spectral coefficients.

    Raw input is a SpectralCoeffs; a transform is a list of blocks U_k.
    Acting with a basis change W (X_k -> X_k W_k) sends C_k to W_k^T C_k,
    so kappa_{U W^T} = kappa_U o act(W).
    """

    supports_compose = True

    def __init__(self, dims, target_dims, regularizer=None):
        self.dims = tuple(int(m) for m in dims)
        self.target_dims = tuple(int(j) for j in target_dims)
        if len(self.dims) != len(self.target_dims):
            raise BlockDimMismatch("dims and target dims differ in length")
        # callable(blocks) -> (bonus, grads), added to the refine objective
        self.regularizer = regularizer

    def sample(self, rng: RngStream, count: int) -> list:
        # bands truncated to zero rows never reach the network: keep them at I
        per_band = [haar_orthogonal_batch(m, count, rng.child("band", k)) if j else
                    np.broadcast_to(np.eye(m), (count, m, m))
                    for k, (m, j) in enumerate(zip(self.dims, self.target_dims))]
        return [[pb[i] for pb in per_band] for i in range(count)]

    def _check(self, coeffs: SpectralCoeffs):
        if coeffs.dims != self.dims:
            raise BlockDimMismatch(f"coefficient dims {coeffs.dims} vs family dims {self.dims}")

    def apply(self, u, coeffs):
        self._check(coeffs)
        return rotate_pad_flatten(u, coeffs.bands, self.target_dims)

    def apply_many(self, us, coeffs):
        self._check(coeffs)
        stacked = [np.stack([u[k] for u in us]) for k in range(len(self.dims))]
        return rotate_pad_flatten(stacked, coeffs.bands, self.target_dims)

    def refine(self, u, coeffs, scorer: Scorer, prior: Prior, steps: int, step_size: float) -> RefineResult:
        if scorer.grad is None:
            return None

        def objective(blocks):
            point = self.apply(blocks, coeffs)[None, :]
            logit = scorer(point)
            value = float(prior.objective(logit)[0])
            gpt = scorer.grad(point)[0] * prior.objective_grad(logit)[0]
            gbands = _split_point_grad(gpt, self.dims, self.target_dims, coeffs.channels)
            grads = [gb @ c.T for gb, c in zip(gbands, coeffs.bands)]
            if self.regularizer is not None:
                bonus, rgrads = self.regularizer(blocks)
                value += bonus
                grads = [a + b for a, b in zip(grads, rgrads)]
            return value, grads

        return refine_orthogonal(list(u), objective, steps, step_size)

    def compose(self, u, w):
        return [a @ b.T for a, b in zip(u, w)]

    def inverse(self, w):
        return [b.T for b in w]

    def act(self, w, coeffs):
        return SpectralCoeffs([b.T @ c for b, c in zip(w, coeffs.bands)])

    def perturb(self, coeffs, delta):
        flat = np.concatenate([c.ravel() for c in coeffs.bands])
        moved = flat + delta
        out, pos = [], 0
        for c in coeffs.bands:
            out.append(moved[pos:pos + c.size].reshape(c.shape))
            pos += c.size
        return SpectralCoeffs(out)

    def input_shape(self, coeffs):
        return (sum(c.size for c in coeffs.bands),)


def orientation_regularizer(blocks_per_class):
    """sum_k sum_{d < d'} ||U_k^(d) - U_k^(d')||_F^2 and its block gradients.

    Each unordered class pair counts once; the ordered-pair sum is twice this.
    """
    n = len(blocks_per_class)
    if n == 0:
        return 0.0, []
    nb = len(blocks_per_class[0])
    for blocks in blocks_per_class:
        if len(blocks) != nb or any(a.shape != b.shape for a, b in zip(blocks, blocks_per_class[0])):
            raise DimMismatch("classes disagree on band block shapes")
    penalty = 0.0
    grads = [[np.zeros_like(b) for b in blocks] for blocks in blocks_per_class]
    for k in range(nb):
        stack = np.stack([blocks[k] for blocks in blocks_per_class])
        total = stack.sum(axis=0)
        sq = np.einsum("dij,dij->d", stack, stack)
        # sum over unordered pairs = n sum_d |U_d|^2 - |sum_d U_d|^2
        penalty += float(n * sq.sum() - np.sum(total * total))
        for d in range(n):
            grads[d][k] = 2 * (n * stack[d] - total)
    return penalty, grads


@dataclass
class AnlsfModel:
    """Shared phi plus one head per class; s_d = Psi_d(phi(x_d))."""

    phi: MlpParams
    heads: list
    dims: tuple  # J_k, the padded band sizes phi sees
    channels: int

    @classmethod
    def init(cls, target_dims, channels, n_classes, rng: RngStream, hidden=128, phi_layers=2, head_layers=2):
        in_dim = sum(target_dims) * channels
        phi = init_mlp([in_dim] + [hidden] * phi_layers, rng.child("phi"))
        heads = [init_mlp([hidden] * head_layers + [1], rng.child("head", d)) for d in range(n_classes)]
        return cls(phi, heads, tuple(int(j) for j in target_dims), int(channels))

    @property
    def n_classes(self) -> int:
        return len(self.heads)

    def params(self) -> list:
        out = self.phi.arrays()
        for h in self.heads:
            out += h.arrays()
        return out

    def nets(self) -> dict:
        nets = {"phi": self.phi}
        nets.update({f"head{d}": h for d, h in enumerate(self.heads)})
        return nets

    def logits(self, d: int, points) -> np.ndarray:
        h, _ = mlp_forward(self.phi, points)
        s, _ = mlp_forward(self.heads[d], h)
        return s[..., 0]

    def logits_and_input_grad(self, d: int, points):
        points = np.atleast_2d(points)
        h, tp = mlp_forward(self.phi, points)
        s, ts = mlp_forward(self.heads[d], h)
        _, dh = mlp_backward(self.heads[d], ts, np.ones_like(s), params=False)
        _, dx = mlp_backward(self.phi, tp, dh, params=False)
        return s[:, 0], dx

    def scorer(self, d: int) -> Scorer:
        return Scorer(lambda pts: self.logits(d, pts), lambda pts: self.logits_and_input_grad(d, pts)[1])

    def loss_and_grads(self, points_per_class, targets, class_weights=None):
        """Summed one-vs-rest BCE over a batch; gradients follow params()."""
        targets = np.asarray(targets, dtype=float)
        loss = 0.0
        phi_grads = self.phi.zeros_like()
        head_grads = []
        logits = np.zeros(targets.shape)
        for d, pts in enumerate(points_per_class):
            h, tp = mlp_forward(self.phi, pts)
            s, ts = mlp_forward(self.heads[d], h)
            w = None if class_weights is None else class_weights[d]
            l, ds = bce_with_logits(s[:, 0], targets[:, d], w)
            loss += l
            logits[:, d] = s[:, 0]
            gh, dh = mlp_backward(self.heads[d], ts, ds[:, None])
            gp, _ = mlp_backward(self.phi, tp, dh)
            head_grads.append(gh)
            for a, b in zip(phi_grads.arrays(), gp.arrays()):
                a += b
        grads = phi_grads.arrays()
        for gh in head_grads:
            grads += gh.arrays()
        return loss, grads, logits


def sample_stream(base: RngStream, sample_key, class_id: int) -> RngStream:
    return base.child("sample", sample_key, "class", class_id)


@dataclass
class BatchCanon:
    blocks: list          # per band, (B, M_k, M_k)
    logits: np.ndarray    # (B,)
    points: np.ndarray    # (B, J*T)
    candidate_index: np.ndarray
    refine_gain: np.ndarray
    evaluations: np.ndarray


def _batched_polar(m):
    if m.shape[-1] == 0:
        return m.copy()
    u, _, vt = np.linalg.svd(m)
    return u @ vt


def canonicalize_batch(model: AnlsfModel, dims, bands, streams, d: int, budget: Budget,
                       prior: Prior = Prior(), frozen: bool = False, fixed_blocks=None,
                       regularizer=None) -> BatchCanon:
    """Vectorized prior maximization of class ``d`` for a batch of graphs.

    ``bands[k]`` is (B, M_k, T); every graph in the batch shares the dims.
    Candidate draws come from ``streams[i].child("band", k)`` exactly as
    AnlsfFamily.sample does, and the refinement mirrors refine_orthogonal
    step for step, so results match the per-graph engine.
    """
    nb = len(dims)
    batch = bands[0].shape[0] if nb else 0
    target = model.dims
    if frozen or fixed_blocks is not None:
        if fixed_blocks is None:
            blocks = [np.broadcast_to(np.eye(m), (batch, m, m)) for m in dims]
        else:
            blocks = [np.asarray(b) for b in fixed_blocks]
        pts = rotate_pad_flatten(blocks, bands, target)
        s = model.logits(d, pts)
        return BatchCanon(blocks, s, pts, np.zeros(batch, int), np.zeros(batch), np.ones(batch, int))

    active = [k for k, j in enumerate(target) if j > 0]
    a_dims = [dims[k] for k in active]
    a_target = tuple(target[k] for k in active)
    a_bands = [bands[k] for k in active]
    kc = budget.candidates
    cands = [np.stack([haar_orthogonal_batch(dims[k], kc, streams[i].child("band", k)) for i in range(batch)])
             for k in active]  # (B, K, M, M)
    pts = rotate_pad_flatten(cands, [c[:, None] for c in a_bands], a_target)  # (B, K, JT)
    s = model.logits(d, pts.reshape(batch * kc, -1)).reshape(batch, kc)
    obj = prior.objective(s)
    obj = np.where(np.isfinite(obj), obj, -np.inf)
    evaluations = np.full(batch, kc)
    gains = np.zeros((batch, kc))

    if budget.refine_steps > 0:
        if budget.refine_top_only:
            pick = np.argmax(obj, axis=1)[:, None]
        else:
            pick = np.broadcast_to(np.arange(kc), (batch, kc))
        sel_b = np.repeat(np.arange(batch), pick.shape[1])
        sel_k = pick.reshape(-1)
        u0 = [c[sel_b, sel_k] for c in cands]
        cs = [c[sel_b] for c in a_bands]
        u, val, start, ev = _refine_batched(model, d, prior, u0, cs, a_dims, a_target, budget,
                                            _restrict(regularizer, active))
        np.add.at(evaluations, sel_b, ev)
        better = val >= obj[sel_b, sel_k]
        for i in range(len(active)):
            cands[i][sel_b[better], sel_k[better]] = u[i][better]
        gains[sel_b[better], sel_k[better]] = val[better] - obj[sel_b[better], sel_k[better]]
        obj[sel_b[better], sel_k[better]] = val[better]

    best = np.argmax(obj, axis=1)
    ar = np.arange(batch)
    blocks = [np.broadcast_to(np.eye(m), (batch, m, m)) for m in dims]
    for i, k in enumerate(active):
        blocks[k] = cands[i][ar, best]
    pts = rotate_pad_flatten(blocks, bands, target)
    s_best = model.logits(d, pts)
    return BatchCanon(blocks, s_best, pts, best, gains[ar, best], evaluations)


def _restrict(regularizer, active):
    if regularizer is None:
        return None

    def reg(u, idx):
        return regularizer(u, idx, active)

    return reg


def _refine_batched(model, d, prior, u0, cs, dims, target, budget: Budget, regularizer=None):
    """Item-parallel copy of refine_orthogonal over block lists."""
    n = u0[0].shape[0] if u0 else 0
    channels = model.channels

    def objective(u, idx):
        pts = rotate_pad_flatten(u, [c[idx] for c in cs], target)
        s, dx = model.logits_and_input_grad(d, pts)
        value = prior.objective(s)
        dx = dx * prior.objective_grad(s)[:, None]
        gb = _split_point_grad(dx, dims, target, channels)
        grads = [g @ np.swapaxes(c[idx], -1, -2) for g, c in zip(gb, cs)]
        if regularizer is not None:
            bonus, rg = regularizer(u, idx)
            value = value + bonus
            grads = [a + b for a, b in zip(grads, rg)]
        return value, grads

    u = [x.copy() for x in u0]
    all_idx = np.arange(n)
    value, grad = objective(u, all_idx)
    start = value.copy()
    evals = np.ones(n, dtype=int)
    eta = np.full(n, float(budget.step_size))
    active = np.isfinite(value)
    for _ in range(budget.refine_steps):
        if not active.any():
            break
        improved = np.zeros(n, bool)
        trying = active.copy()
        for _ in range(MAX_HALVINGS + 1):
            idx = np.flatnonzero(trying)
            if idx.size == 0:
                break
            cand = [_batched_polar(b[idx] + eta[idx, None, None] * g[idx]) for b, g in zip(u, grad)]
            cv, cg = objective(cand, idx)
            evals[idx] += 1
            ok = np.isfinite(cv) & (cv >= value[idx])
            acc = idx[ok]
            for k in range(len(u)):
                u[k][acc] = cand[k][ok]
                grad[k][acc] = cg[k][ok]
            value[acc] = cv[ok]
            improved[acc] = True
            fail = idx[~ok]
            eta[fail] *= 0.5
            trying = np.zeros(n, bool)
            trying[fail] = True
        active &= improved
    return u, value, start, evals


def anlsf_forward(model: AnlsfModel, coeffs: SpectralCoeffs, blocks, d: int) -> float:
    if len(blocks) != len(coeffs.bands) or any(
            b.shape != (m, m) for b, m in zip(blocks, coeffs.dims)):
        raise BlockDimMismatch("orientation blocks do not match band dimensions")
    pts = rotate_pad_flatten(blocks, coeffs.bands, model.dims)
    return float(model.logits(d, pts[None, :])[0])


def anlsf_node_synthesis(dec: BandDecomposition, coeffs: SpectralCoeffs, blocks, phi, target_dims=None):
    """Back to the node domain: sum_k X_k U_k^T (band-k slice of phi's output).

    ``phi`` maps the padded (J x T) oriented coefficient matrix to a
    (J x T') matrix; rows past M_k in a band are dropped on the way back.
    """
    target_dims = tuple(coeffs.dims if target_dims is None else target_dims)
    oriented = pad_truncate([u @ c for u, c in zip(blocks, coeffs.bands)], target_dims)
    y = np.asarray(phi(oriented), dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    out = np.zeros((dec.n, y.shape[1]))
    pos = 0
    for x, u, m, j in zip(dec.bases, blocks, coeffs.dims, target_dims):
        keep = min(m, j)
        slab = np.zeros((m, y.shape[1]))
        slab[:keep] = y[pos:pos + keep]
        out += x @ (u.T @ slab)
        pos += j
    return out


def p90_dims(dims_list, cap: int | None = None, keep_bands: int | None = None) -> tuple:
    """J_k as the 90th percentile of observed M_k, optionally capped."""
    arr = np.asarray(dims_list, dtype=float)
    j = np.ceil(np.percentile(arr, 90, axis=0, method="linear")).astype(int)
    if cap is not None:
        j = np.minimum(j, cap)
    if keep_bands is not None:
        j[keep_bands:] = 0
    return tuple(int(x) for x in j)


def save_decomposition(path, dec: BandDecomposition, graph_key: str = "") -> None:
    """Little-endian cache: magic, header length, JSON header, float64 data."""
    header = {"plan": [float(b) for b in dec.plan.boundaries], "plan_fingerprint": dec.plan.fingerprint(),
              "decay": dec.plan.decay, "n": dec.n, "dims": list(dec.dims), "graph": graph_key,
              "byteorder": "little"}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v, x in zip(dec.values, dec.bases):
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(x, dtype="<f8").tobytes())


def load_decomposition(path, expect_plan: BandPlan | None = None) -> BandDecomposition:
    raw = Path(path).read_bytes()
    if raw[:8] != CACHE_MAGIC:
        raise ValueError("not a decomposition cache file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    plan = BandPlan(tuple(header["plan"]), header["decay"])
    if expect_plan is not None and expect_plan.fingerprint() != header["plan_fingerprint"]:
        raise ValueError("cached decomposition was built with a different band plan")
    data = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    n, pos = header["n"], 0
    bases, vals = [], []
    for m in header["dims"]:
        vals.append(data[pos:pos + m].copy())
        pos += m
        bases.append(data[pos:pos + n * m].reshape(n, m).copy())
        pos += n * m
    return BandDecomposition(bases, vals, plan)


@dataclass
class DecompositionCache:
    """Write-once memo of band decompositions keyed by (graph, plan params)."""

    decay: float
    count: int
    gso: str = "normalized-laplacian"
    _store: dict = field(default_factory=dict)
    _keys: dict = field(default_factory=dict)

    def get(self, g: Graph) -> BandDecomposition:
        # graphs generated together often share one adjacency array; skip rehashing
        ref = id(g.adjacency)
        hit = self._keys.get(ref)
        if hit is None or hit[0] is not g.adjacency:
            hit = (g.adjacency, g.fingerprint())
            self._keys[ref] = hit
        key = hit[1]
        if key not in self._store:
            self._store[key] = decompose_graph(g, self.decay, self.count, self.gso)
        return self._store[key]
