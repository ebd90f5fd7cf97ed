"""Point clouds: multiset metric, kNN graphs, DeepSet / PointNet / DGCNN
backbones, and their SO(3)-canonicalized one-vs-rest classifiers.

Rotations act on rows, ``x -> x @ R.T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .canon import Budget, Prior, Scorer, TransformationFamily, classify
from .groups import (MAX_HALVINGS, RngStream, TooLarge, enumerate_permutations, haar_rotation3_batch,
                     refine_rotation3)
from .nn import (MlpParams, ShapeMismatch, bce_with_logits, init_mlp, mlp_backward, mlp_forward, pool,
                 pool_backward)

BRUTE_MAX_N = 8


class SizeMismatch(ValueError):
    pass


class TooLargeForBrute(TooLarge):
    pass


def _cloud(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeMismatch(f"expected an (N, J) point array, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("point cloud has non-finite coordinates")
    return x


def multiset_distance(x, y, mode: str = "brute") -> float:
    """min over row permutations s of ||X - s(Y)||_F.

    ``brute`` is exact (N <= 8); ``greedy`` matches rows after sorting
    both clouds lexicographically, which is only an upper bound.
    """
    x, y = _cloud(x), _cloud(y)
    if x.shape != y.shape:
        raise SizeMismatch(f"{x.shape} vs {y.shape}")
    n = x.shape[0]
    if mode == "brute":
        if n > BRUTE_MAX_N:
            raise TooLargeForBrute(f"brute force needs N <= {BRUTE_MAX_N}")
        perms = enumerate_permutations(n)
    elif mode == "greedy":
        ix, iy = np.lexsort(x.T[::-1]), np.lexsort(y.T[::-1])
        perm = np.empty(n, dtype=int)
        perm[ix] = iy
        perms = perm[None]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    diff = x[:, None, :] - y[None, :, :]
    pair = np.einsum("ijc,ijc->ij", diff, diff)
    # summing sorted matched terms makes d(x, y) == d(y, x) exact, and keeps
    # greedy >= brute exact since both go through the same arithmetic
    terms = np.sort(pair[np.arange(n), perms], axis=1)
    return float(np.sqrt(np.min(terms.sum(axis=1))))


def knn_batch(x, k: int) -> np.ndarray:
    """Neighbour indices (..., N, min(k, N-1)); ties go to the lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-2]
    kk = min(k, n - 1)
    sq = np.sum(x * x, axis=-1)
    d2 = sq[..., :, None] + sq[..., None, :] - 2 * x @ np.swapaxes(x, -1, -2)
    diag = np.arange(n)
    d2[..., diag, diag] = np.inf
    return np.argsort(d2, axis=-1, kind="stable")[..., :kk]


def knn_graph(x, k: int) -> np.ndarray:
    """Exact kNN by pairwise differences (no norm expansion), self excluded."""
    x = _cloud(x)
    if k < 1:
        raise ValueError("k must be >= 1")
    n = x.shape[0]
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :min(k, n - 1)]


# ------------------------------------------------------------------ backbones

def deepset_forward(x, phi: MlpParams, xi: MlpParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return mlp_forward(xi, mlp_forward(phi, x)[0].sum(axis=-2))[0]


def pointnet_forward(x, phi: MlpParams, head: MlpParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    pooled, _ = pool(mlp_forward(phi, x)[0], "max")
    return mlp_forward(head, pooled)[0]


def edge_features(x, nbrs) -> np.ndarray:
    """(x_j - x_i, x_i) for every (i, j in kNN(i)); shape (..., N, k, 2J)."""
    x = np.asarray(x, dtype=np.float64)
    xj = np.take_along_axis(x[..., None, :, :], nbrs[..., :, :, None], axis=-2) if x.ndim > 2 else x[nbrs]
    xi = np.broadcast_to(x[..., :, None, :], xj.shape)
    return np.concatenate([xj - xi, xi], axis=-1)


def dgcnn_edgeconv(x, nbrs, psi: MlpParams) -> np.ndarray:
    """x_i' = max_j ReLU(psi(x_j - x_i, x_i)) over the kNN edges of i."""
    e = edge_features(x, nbrs)
    h = np.maximum(mlp_forward(psi, e.reshape(-1, e.shape[-1]))[0], 0.0)
    return h.reshape(e.shape[:-1] + (h.shape[-1],)).max(axis=-2)


BACKBONES = ("deepset", "pointnet", "dgcnn")


@dataclass
class PointBackbone:
    """Shared feature extractor; ``nets`` holds its MLPs by role."""

    kind: str
    nets: dict
    k: int = 8

    @classmethod
    def init(cls, kind, rng: RngStream, hidden=64, features=64, k=8, dims=3):
        if kind == "deepset":
            nets = {"phi": init_mlp([dims, hidden, hidden], rng.child("phi")),
                    "xi": init_mlp([hidden, hidden, features], rng.child("xi"))}
        elif kind == "pointnet":
            nets = {"phi": init_mlp([dims, hidden, hidden], rng.child("phi")),
                    "head": init_mlp([hidden, features], rng.child("head"))}
        elif kind == "dgcnn":
            nets = {"psi": init_mlp([2 * dims, hidden], rng.child("psi")),
                    "head": init_mlp([hidden, hidden, features], rng.child("head"))}
        else:
            raise ValueError(f"unknown backbone {kind!r}")
        return cls(kind, nets, k)

    @property
    def out_dim(self) -> int:
        return self.nets["xi" if self.kind == "deepset" else "head"].out_dim

    def params(self) -> list:
        out = []
        for name in sorted(self.nets):
            out += self.nets[name].arrays()
        return out

    def forward(self, x):
        """x: (C, N, 3) stack of clouds -> (features (C, F), tape)."""
        x = np.asarray(x, dtype=np.float64)
        c, n, dim = x.shape
        if self.kind in ("deepset", "pointnet"):
            h, tphi = mlp_forward(self.nets["phi"], x.reshape(c * n, dim))
            h = h.reshape(c, n, -1)
            if self.kind == "deepset":
                pooled, win = h.sum(axis=1), None
                out, tout = mlp_forward(self.nets["xi"], pooled)
            else:
                pooled, win = pool(h, "max")
                out, tout = mlp_forward(self.nets["head"], pooled)
            return out, {"x": x, "tphi": tphi, "win": win, "tout": tout, "n": n}
        nbrs = knn_batch(x, self.k)
        e = edge_features(x, nbrs)  # (C, N, k, 6)
        kk = e.shape[2]
        z, tpsi = mlp_forward(self.nets["psi"], e.reshape(-1, e.shape[-1]))
        a = np.maximum(z, 0.0).reshape(c, n, kk, -1)
        local, win_edge = pool(a, "max")  # over neighbours -> (C, N, H)
        glob, win_pt = pool(local, "max")  # over points -> (C, H)
        out, tout = mlp_forward(self.nets["head"], glob)
        return out, {"x": x, "nbrs": nbrs, "z": z, "tpsi": tpsi, "win_edge": win_edge, "win_pt": win_pt,
                     "tout": tout, "n": n, "kk": kk}

    def backward(self, tape, upstream, params=True):
        """Returns (dict of MLP gradients or None, d x of shape (C, N, 3))."""
        grads = {}
        if self.kind in ("deepset", "pointnet"):
            out_name = "xi" if self.kind == "deepset" else "head"
            g_out, d_pool = mlp_backward(self.nets[out_name], tape["tout"], upstream, params)
            mode = "sum" if self.kind == "deepset" else "max"
            dh = pool_backward(d_pool, tape["n"], mode, tape["win"])
            c, n, hdim = dh.shape
            g_phi, dx = mlp_backward(self.nets["phi"], tape["tphi"], dh.reshape(c * n, hdim), params)
            grads = {out_name: g_out, "phi": g_phi}
            return (grads if params else None), dx.reshape(tape["x"].shape)
        g_head, d_glob = mlp_backward(self.nets["head"], tape["tout"], upstream, params)
        d_local = pool_backward(d_glob, tape["n"], "max", tape["win_pt"])
        d_a = pool_backward(d_local, tape["kk"], "max", tape["win_edge"])
        d_z = d_a.reshape(tape["z"].shape) * (tape["z"] > 0)
        g_psi, d_e = mlp_backward(self.nets["psi"], tape["tpsi"], d_z, params)
        x = tape["x"]
        c, n, dim = x.shape
        d_e = d_e.reshape(c, n, tape["kk"], 2 * dim)
        d_diff, d_anchor = d_e[..., :dim], d_e[..., dim:]
        dx = (d_anchor - d_diff).sum(axis=2)
        flat = (np.arange(c)[:, None, None] * n + tape["nbrs"]).reshape(-1)
        np.add.at(dx.reshape(c * n, dim), flat, d_diff.reshape(-1, dim))
        grads = {"head": g_head, "psi": g_psi}
        return (grads if params else None), dx

    def grad_list(self, grads: dict) -> list:
        out = []
        for name in sorted(self.nets):
            out += grads[name].arrays()
        return out


@dataclass
class PointCloudModel:
    backbone: PointBackbone
    heads: list

    @classmethod
    def init(cls, kind, n_classes, rng: RngStream, hidden=64, features=64, k=8):
        bb = PointBackbone.init(kind, rng.child("backbone"), hidden, features, k)
        heads = [init_mlp([features, hidden, 1], rng.child("head", d)) for d in range(n_classes)]
        return cls(bb, heads)

    @property
    def n_classes(self) -> int:
        return len(self.heads)

    def params(self) -> list:
        out = self.backbone.params()
        for h in self.heads:
            out += h.arrays()
        return out

    def nets(self) -> dict:
        nets = {f"backbone.{k}": v for k, v in self.backbone.nets.items()}
        nets.update({f"head{d}": h for d, h in enumerate(self.heads)})
        return nets

    def logits(self, d, clouds, chunk=512):
        clouds = np.asarray(clouds, dtype=np.float64)
        out = []
        for s in range(0, clouds.shape[0], chunk):
            f, _ = self.backbone.forward(clouds[s:s + chunk])
            out.append(mlp_forward(self.heads[d], f)[0][:, 0])
        return np.concatenate(out) if out else np.zeros(0)

    def logits_and_input_grad(self, d, clouds):
        clouds = np.asarray(clouds, dtype=np.float64)
        f, tb = self.backbone.forward(clouds)
        s, th = mlp_forward(self.heads[d], f)
        _, df = mlp_backward(self.heads[d], th, np.ones_like(s), params=False)
        _, dx = self.backbone.backward(tb, df, params=False)
        return s[:, 0], dx

    def scorer(self, d) -> Scorer:
        return Scorer(lambda pts: self.logits(d, pts), lambda pts: self.logits_and_input_grad(d, pts)[1])

    def loss_and_grads(self, clouds_per_class, targets):
        targets = np.asarray(targets, dtype=float)
        loss = 0.0
        bb_grads = None
        head_grads = []
        for d, clouds in enumerate(clouds_per_class):
            f, tb = self.backbone.forward(clouds)
            s, th = mlp_forward(self.heads[d], f)
            l, ds = bce_with_logits(s[:, 0], targets[:, d])
            loss += l
            gh, df = mlp_backward(self.heads[d], th, ds[:, None])
            gb, _ = self.backbone.backward(tb, df)
            head_grads.append(gh)
            gl = self.backbone.grad_list(gb)
            bb_grads = gl if bb_grads is None else [a + b for a, b in zip(bb_grads, gl)]
        grads = list(bb_grads)
        for gh in head_grads:
            grads += gh.arrays()
        return loss, grads


def rotate(x, r) -> np.ndarray:
    """x R^T for one cloud or a stack; r may be stacked to match."""
    return np.asarray(x) @ np.swapaxes(np.asarray(r), -1, -2)


class RotationFamily(TransformationFamily):
    """SO(3) acting on raw coordinates; compose is the rotation product."""

    supports_compose = True

    def sample(self, rng: RngStream, count: int) -> list:
        return list(haar_rotation3_batch(count, rng))

    def apply(self, r, x):
        return rotate(x, r)

    def apply_many(self, rs, x):
        return rotate(np.asarray(x)[None], np.stack(rs))

    def refine(self, r, x, scorer: Scorer, prior: Prior, steps: int, step_size: float):
        x = np.asarray(x, dtype=np.float64)

        def objective(rot):
            return float(prior.objective(scorer(rotate(x, rot)[None]))[0])

        gradient = None
        if scorer.grad is not None:
            def gradient(rot):
                pts = rotate(x, rot)[None]
                g = scorer.grad(pts)[0] * prior.objective_grad(scorer(pts))[0]
                return g.T @ x

        return refine_rotation3(r, objective, steps, step_size, gradient)

    def compose(self, r, q):
        return r @ q

    def inverse(self, q):
        return q.T

    def act(self, q, x):
        return rotate(x, q)


class PermutationFamily(TransformationFamily):
    """Row orderings of an (n, J) array, flattened; small enough to enumerate."""

    supports_compose = True

    def __init__(self, n: int):
        self.n = int(n)

    def sample(self, rng, count: int) -> list:
        gen = rng.generator() if isinstance(rng, RngStream) else rng
        return [gen.permutation(self.n) for _ in range(count)]

    def apply(self, s, x):
        return np.asarray(x, dtype=np.float64)[np.asarray(s)].reshape(-1)

    def enumerate(self) -> list:
        return list(enumerate_permutations(self.n))

    def compose(self, s, w):
        # apply(w[s], x[v]) = x[v[w[s]]] = x[s] when w = v^-1
        return np.asarray(w)[np.asarray(s)]

    def inverse(self, v):
        return np.argsort(v)

    def act(self, v, x):
        return np.asarray(x, dtype=np.float64)[np.asarray(v)]


def _rodrigues_batch(w):
    theta = np.linalg.norm(w, axis=-1)
    safe = np.where(theta > 1e-15, theta, 1.0)
    k = w / safe[:, None]
    kx = np.zeros(w.shape[:-1] + (3, 3))
    kx[:, 0, 1], kx[:, 0, 2] = -k[:, 2], k[:, 1]
    kx[:, 1, 0], kx[:, 1, 2] = k[:, 2], -k[:, 0]
    kx[:, 2, 0], kx[:, 2, 1] = -k[:, 1], k[:, 0]
    s = np.sin(theta)[:, None, None]
    c = (1 - np.cos(theta))[:, None, None]
    r = np.eye(3) + s * kx + c * (kx @ kx)
    small = theta <= 1e-15
    if small.any():
        ws = w[small]
        sk = np.zeros((ws.shape[0], 3, 3))
        sk[:, 0, 1], sk[:, 0, 2] = -ws[:, 2], ws[:, 1]
        sk[:, 1, 0], sk[:, 1, 2] = ws[:, 2], -ws[:, 0]
        sk[:, 2, 0], sk[:, 2, 1] = -ws[:, 1], ws[:, 0]
        r[small] = np.eye(3) + sk
    return r


_GENERATORS = np.array([[[0, 0, 0], [0, 0, -1], [0, 1, 0]],
                        [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
                        [[0, -1, 0], [1, 0, 0], [0, 0, 0]]], dtype=float)


def _polar3(m):
    u, _, vt = np.linalg.svd(m)
    return u @ vt


def _refine_so3_batched(model, d, prior, r0, clouds, budget: Budget):
    """Item-parallel copy of refine_rotation3 with analytic chart gradients."""
    n = r0.shape[0]

    def value_and_chart_grad(r, idx):
        pts = rotate(clouds[idx], r)
        s, dx = model.logits_and_input_grad(d, pts)
        val = prior.objective(s)
        eg = np.swapaxes(dx, -1, -2) @ clouds[idx] * prior.objective_grad(s)[:, None, None]
        # <G, E_i R> for the three generators
        chart = np.einsum("nab,iac,ncb->ni", eg, _GENERATORS, r)
        return val, chart

    def value_only(r, idx):
        return prior.objective(model.logits(d, rotate(clouds[idx], r)))

    r = r0.copy()
    all_idx = np.arange(n)
    value, grad = value_and_chart_grad(r, all_idx)
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
            cand = _polar3(_rodrigues_batch(eta[idx, None] * grad[idx]) @ r[idx])
            cv = value_only(cand, idx)
            evals[idx] += 1
            ok = np.isfinite(cv) & (cv >= value[idx])
            acc = idx[ok]
            r[acc] = cand[ok]
            value[acc] = cv[ok]
            improved[acc] = True
            fail = idx[~ok]
            eta[fail] *= 0.5
            trying = np.zeros(n, bool)
            trying[fail] = True
        active &= improved
        upd = np.flatnonzero(improved)
        if upd.size:
            _, grad[upd] = value_and_chart_grad(r[upd], upd)
    return r, value, start, evals


@dataclass
class RotationCanon:
    rotations: np.ndarray   # (B, 3, 3)
    logits: np.ndarray
    clouds: np.ndarray      # canonicalized clouds
    candidate_index: np.ndarray
    refine_gain: np.ndarray
    evaluations: np.ndarray


def canonicalize_clouds(model: PointCloudModel, clouds, streams, d: int, budget: Budget,
                        prior: Prior = Prior(), frozen: bool = False) -> RotationCanon:
    """Batched prior maximization over SO(3) for class ``d``.

    Candidate draws use ``haar_rotation3_batch(K, streams[i])`` exactly as
    RotationFamily.sample does.
    """
    clouds = np.asarray(clouds, dtype=np.float64)
    b = clouds.shape[0]
    if frozen:
        rots = np.broadcast_to(np.eye(3), (b, 3, 3)).copy()
        s = model.logits(d, clouds)
        return RotationCanon(rots, s, clouds, np.zeros(b, int), np.zeros(b), np.ones(b, int))
    kc = budget.candidates
    cands = np.stack([haar_rotation3_batch(kc, st) for st in streams])  # (B, K, 3, 3)
    pts = rotate(clouds[:, None], cands)  # (B, K, N, 3)
    s = model.logits(d, pts.reshape((b * kc,) + clouds.shape[1:])).reshape(b, kc)
    obj = prior.objective(s)
    obj = np.where(np.isfinite(obj), obj, -np.inf)
    evaluations = np.full(b, kc)
    gains = np.zeros((b, kc))
    if budget.refine_steps > 0:
        pick = np.argmax(obj, axis=1)[:, None] if budget.refine_top_only else \
            np.broadcast_to(np.arange(kc), (b, kc))
        sel_b = np.repeat(np.arange(b), pick.shape[1])
        sel_k = pick.reshape(-1)
        r, val, _, ev = _refine_so3_batched(model, d, prior, cands[sel_b, sel_k], clouds[sel_b], budget)
        np.add.at(evaluations, sel_b, ev)
        better = val >= obj[sel_b, sel_k]
        cands[sel_b[better], sel_k[better]] = r[better]
        gains[sel_b[better], sel_k[better]] = val[better] - obj[sel_b[better], sel_k[better]]
        obj[sel_b[better], sel_k[better]] = val[better]
    best = np.argmax(obj, axis=1)
    ar = np.arange(b)
    rots = cands[ar, best]
    canon = rotate(clouds, rots)
    return RotationCanon(rots, model.logits(d, canon), canon, best, gains[ar, best], evaluations)


def ac_classify(x, model: PointCloudModel, budget: Budget, rng: RngStream | None = None, priors=None,
                candidates=None):
    """Per-class SO(3) prior maximization through the generic engine.

    ``candidates``, if given, is one list of rotations per class.
    """
    fam = RotationFamily()
    n = model.n_classes
    priors = priors or [Prior()] * n
    rngs = None if rng is None else [rng.child("class", d) for d in range(n)]
    return classify(fam, priors, [model.scorer(d) for d in range(n)], _cloud(x), budget, rngs=rngs,
                    candidates=candidates)
