"""Training loops: one-vs-rest heads over adaptively canonicalized inputs.

Each step canonicalizes the batch at the current parameters, freezes the
chosen transforms, and backpropagates the summed BCE through the networks
only. Per-sample RNG streams make the result independent of batching.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .canon import Budget, Prior
from .groups import RngStream
from .nn import (MlpParams, OptimizerState, bce_with_logits, init_mlp, mlp_backward, mlp_forward,
                 optimizer_step)
from .pointcloud import PointCloudModel, canonicalize_clouds
from .spectral import (AnlsfModel, DecompositionCache, canonicalize_batch, orientation_regularizer,
                       p90_dims, sample_stream, spectral_coefficients)

log = logging.getLogger(__name__)


class DivergedLoss(ArithmeticError):
    pass


@dataclass
class TrainSettings:
    epochs: int = 100
    batch_size: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.0
    patience: int = 100
    hidden: int = 128
    val_fraction: float = 0.1


@dataclass
class SpectralSettings:
    decay: float = 0.5
    bands: int = 8
    band_cap: int | None = None
    keep_bands: int | None = None
    gso: str = "normalized-laplacian"
    reg_weight: float = 0.0


@dataclass
class EncodedGraphs:
    """Band coefficients for a list of graphs, grouped by band signature."""

    coeffs: list
    labels: np.ndarray
    keys: list
    groups: dict = field(default_factory=dict)

    def __post_init__(self):
        self.groups = {}
        for i, c in enumerate(self.coeffs):
            self.groups.setdefault(c.dims, []).append(i)

    def subset(self, idx) -> "EncodedGraphs":
        idx = list(idx)
        return EncodedGraphs([self.coeffs[i] for i in idx], self.labels[idx], [self.keys[i] for i in idx])

    def __len__(self):
        return len(self.coeffs)


def encode_graphs(graphs, spec: SpectralSettings, cache: DecompositionCache | None = None, keys=None):
    cache = cache or DecompositionCache(spec.decay, spec.bands, spec.gso)
    coeffs = [spectral_coefficients(cache.get(g), g.signal) for g in graphs]
    labels = np.array([-1 if g.label is None else g.label for g in graphs])
    keys = list(range(len(graphs))) if keys is None else list(keys)
    return EncodedGraphs(coeffs, labels, keys)


def _stack_group(enc: EncodedGraphs, idx):
    nb = len(enc.coeffs[idx[0]].bands)
    return [np.stack([enc.coeffs[i].bands[k] for i in idx]) for k in range(nb)]


def _regularizer_for(chosen, weight):
    """Reward distance from orientations already picked by earlier classes."""
    if not chosen or weight == 0.0:
        return None

    def reg(u, idx, active):
        bonus = np.zeros(len(idx))
        grads = [np.zeros_like(b) for b in u]
        for other in chosen:
            for k, (b, o) in enumerate(zip(u, [other[a] for a in active])):
                diff = b - o[idx]
                bonus += weight * np.einsum("nij,nij->n", diff, diff)
                grads[k] += weight * 2 * diff
        return bonus, grads

    return reg


def canonical_points(model: AnlsfModel, enc: EncodedGraphs, idx, base: RngStream, budget: Budget,
                     priors=None, frozen=False, reg_weight=0.0, with_decisions=False):
    """Per class, the canonicalized flat inputs for samples ``idx`` (in order)."""
    idx = list(idx)
    pos = {s: i for i, s in enumerate(idx)}
    n_classes = model.n_classes
    priors = priors or [Prior()] * n_classes
    points = [np.zeros((len(idx), sum(model.dims) * model.channels)) for _ in range(n_classes)]
    logits = np.zeros((len(idx), n_classes))
    evals = np.zeros(len(idx), dtype=int)
    decisions = [dict() for _ in range(n_classes)]
    by_group = {}
    for s in idx:
        by_group.setdefault(enc.coeffs[s].dims, []).append(s)
    for dims, members in by_group.items():
        bands = _stack_group(enc, members)
        rows = [pos[s] for s in members]
        chosen = []
        for d in range(n_classes):
            streams = [sample_stream(base, enc.keys[s], d) for s in members]
            reg = _regularizer_for(chosen, reg_weight)
            res = canonicalize_batch(model, dims, bands, streams, d, budget, priors[d], frozen=frozen,
                                     regularizer=reg)
            # class d is rewarded for distance to every earlier class' choice
            chosen.append(res.blocks)
            points[d][rows] = res.points
            logits[rows, d] = res.logits
            evals[rows] += res.evaluations
            if with_decisions:
                decisions[d].update({s: res for s in members})
    if with_decisions:
        return points, logits, evals, decisions
    return points, logits, evals


@dataclass
class FitResult:
    model: object
    history: list
    best_epoch: int
    evaluations: int


def _onehot(labels, n):
    y = np.zeros((len(labels), n))
    y[np.arange(len(labels)), labels] = 1.0
    return y


def target_dims_for(enc: EncodedGraphs, spec: SpectralSettings) -> tuple:
    return p90_dims([c.dims for c in enc.coeffs], spec.band_cap, spec.keep_bands)


def _fit_loop(params, n_samples, settings: TrainSettings, root: RngStream, batch_step, val_loss=None):
    """Shared epoch loop: shuffle, step, early-stop on validation loss.

    ``batch_step(idx, base)`` returns (summed loss, grads aligned with
    ``params``, candidate evaluations); ``val_loss()`` the mean val loss.
    Returns (history, best epoch, evaluations); the best params are
    restored in place.
    """
    opt = OptimizerState(lr=settings.lr, weight_decay=settings.weight_decay)
    order_gen = root.child("order").generator()
    history, best, best_epoch, best_params, total = [], np.inf, -1, None, 0
    for epoch in range(settings.epochs):
        order = order_gen.permutation(n_samples)
        base = root.child("epoch", epoch)
        epoch_loss = 0.0
        for start in range(0, n_samples, settings.batch_size):
            idx = order[start:start + settings.batch_size]
            loss, grads, ev = batch_step(idx, base)
            if not np.isfinite(loss):
                raise DivergedLoss(f"loss became {loss} at epoch {epoch}")
            total += int(ev)
            optimizer_step(opt, params, [g / len(idx) for g in grads])
            epoch_loss += loss
        entry = {"epoch": epoch, "train_loss": epoch_loss / n_samples}
        if val_loss is not None:
            vl = val_loss()
            entry["val_loss"] = vl
            if vl < best - 1e-12:
                best, best_epoch = vl, epoch
                best_params = [p.copy() for p in params]
            elif epoch - best_epoch >= settings.patience:
                history.append(entry)
                break
        history.append(entry)
    if best_params is not None:
        for p, b in zip(params, best_params):
            p[...] = b
    return history, best_epoch, total


def fit_anlsf(train: EncodedGraphs, val: EncodedGraphs | None, n_classes: int, settings: TrainSettings,
              spec: SpectralSettings, budget: Budget, seed: int, frozen: bool = False,
              target_dims=None) -> FitResult:
    root = RngStream(seed, 0)
    target_dims = target_dims or target_dims_for(train, spec)
    channels = train.coeffs[0].channels
    model = AnlsfModel.init(target_dims, channels, n_classes, root.child("init"), hidden=settings.hidden)
    y_train = _onehot(train.labels, n_classes)

    def step(idx, base):
        pts, _, ev = canonical_points(model, train, idx, base, budget, frozen=frozen, reg_weight=spec.reg_weight)
        loss, grads, _ = model.loss_and_grads(pts, y_train[idx])
        return loss, grads, ev.sum()

    val_loss = None
    if val is not None and len(val):
        def val_loss():
            return evaluate_loss(model, val, n_classes, budget, root.child("val"), frozen)

    history, best_epoch, total = _fit_loop(model.params(), len(train), settings, root, step, val_loss)
    return FitResult(model, history, best_epoch, total)


def evaluate_loss(model, enc: EncodedGraphs, n_classes, budget, base, frozen=False) -> float:
    pts, _, _ = canonical_points(model, enc, range(len(enc)), base, budget, frozen=frozen)
    loss, _, _ = model.loss_and_grads(pts, _onehot(enc.labels, n_classes))
    return loss / len(enc)


def predict_anlsf(model, enc: EncodedGraphs, budget: Budget, base: RngStream, frozen=False):
    """Returns (predictions, logits, candidate evaluations per sample)."""
    _, logits, evals = canonical_points(model, enc, range(len(enc)), base, budget, frozen=frozen)
    return np.argmax(logits, axis=1), logits, evals


# ---------------------------------------------------------------- point clouds

def cloud_stream(base: RngStream, key, class_id: int) -> RngStream:
    return base.child("cloud", key, "class", class_id)


def canonical_clouds(model: PointCloudModel, clouds, keys, base: RngStream, budget: Budget, priors=None,
                     frozen=False):
    """Per class, the canonicalized clouds plus logits (B, D) and evaluations (B,)."""
    priors = priors or [Prior()] * model.n_classes
    per_class, logits = [], np.zeros((len(clouds), model.n_classes))
    evals = np.zeros(len(clouds), dtype=int)
    for d in range(model.n_classes):
        streams = [cloud_stream(base, k, d) for k in keys]
        res = canonicalize_clouds(model, clouds, streams, d, budget, priors[d], frozen=frozen)
        per_class.append(res.clouds)
        logits[:, d] = res.logits
        evals += res.evaluations
    return per_class, logits, evals


def fit_pointcloud(clouds, labels, n_classes: int, kind: str, settings: TrainSettings, budget: Budget,
                   seed: int, frozen: bool = False, val=None, features: int = 64, k: int = 8) -> FitResult:
    """``clouds`` is (S, N, 3); ``val`` an optional (clouds, labels) pair."""
    clouds = np.asarray(clouds, dtype=np.float64)
    root = RngStream(seed, 0)
    model = PointCloudModel.init(kind, n_classes, root.child("init"), settings.hidden, features, k)
    y = _onehot(np.asarray(labels), n_classes)

    def step(idx, base):
        per_class, _, ev = canonical_clouds(model, clouds[idx], idx, base, budget, frozen=frozen)
        loss, grads = model.loss_and_grads(per_class, y[idx])
        return loss, grads, ev.sum()

    val_loss = None
    if val is not None and len(val[1]):
        vc, vy = np.asarray(val[0], dtype=np.float64), _onehot(np.asarray(val[1]), n_classes)

        def val_loss():
            pc, _, _ = canonical_clouds(model, vc, range(len(vc)), root.child("val"), budget, frozen=frozen)
            return model.loss_and_grads(pc, vy)[0] / len(vy)

    history, best_epoch, total = _fit_loop(model.params(), len(clouds), settings, root, step, val_loss)
    return FitResult(model, history, best_epoch, total)


def predict_pointcloud(model: PointCloudModel, clouds, budget: Budget, base: RngStream, frozen=False, keys=None):
    clouds = np.asarray(clouds, dtype=np.float64)
    keys = range(len(clouds)) if keys is None else keys
    _, logits, evals = canonical_clouds(model, clouds, keys, base, budget, frozen=frozen)
    return np.argmax(logits, axis=1), logits, evals


# ---------------------------------------------------------------- node-wise MLP baseline

@dataclass
class NodeMlp:
    """Shared per-node MLP, mean pooling over nodes, one head per class.

    Sees each node's channel values but not the graph, so it cannot tell
    apart signals that are node permutations of each other.
    """

    phi: MlpParams
    heads: list

    @classmethod
    def init(cls, channels, n_classes, rng: RngStream, hidden=128):
        phi = init_mlp([channels, hidden, hidden], rng.child("phi"))
        return cls(phi, [init_mlp([hidden, hidden, 1], rng.child("head", d)) for d in range(n_classes)])

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

    def _embed(self, signals):
        signals = np.asarray(signals, dtype=np.float64)
        b, n, c = signals.shape
        h, tape = mlp_forward(self.phi, signals.reshape(b * n, c))
        return h.reshape(b, n, -1).mean(axis=1), tape, (b, n)

    def logits(self, signals) -> np.ndarray:
        z, _, _ = self._embed(signals)
        return np.stack([mlp_forward(h, z)[0][:, 0] for h in self.heads], axis=1)

    def loss_and_grads(self, signals, targets):
        z, tape, (b, n) = self._embed(signals)
        loss, dz, head_grads = 0.0, np.zeros_like(z), []
        for d, head in enumerate(self.heads):
            s, th = mlp_forward(head, z)
            l, ds = bce_with_logits(s[:, 0], targets[:, d])
            loss += l
            gh, dzd = mlp_backward(head, th, ds[:, None])
            head_grads.append(gh)
            dz += dzd
        dh = np.repeat(dz[:, None, :] / n, n, axis=1).reshape(b * n, -1)
        gp, _ = mlp_backward(self.phi, tape, dh)
        grads = gp.arrays()
        for gh in head_grads:
            grads += gh.arrays()
        return loss, grads


def fit_node_mlp(signals, labels, n_classes: int, settings: TrainSettings, seed: int, val=None) -> FitResult:
    signals = np.asarray(signals, dtype=np.float64)
    root = RngStream(seed, 0)
    model = NodeMlp.init(signals.shape[-1], n_classes, root.child("init"), settings.hidden)
    y = _onehot(np.asarray(labels), n_classes)

    def step(idx, base):
        loss, grads = model.loss_and_grads(signals[idx], y[idx])
        return loss, grads, 0

    val_loss = None
    if val is not None and len(val[1]):
        vs, vy = np.asarray(val[0], dtype=np.float64), _onehot(np.asarray(val[1]), n_classes)

        def val_loss():
            return model.loss_and_grads(vs, vy)[0] / len(vy)

    history, best_epoch, total = _fit_loop(model.params(), len(signals), settings, root, step, val_loss)
    return FitResult(model, history, best_epoch, total)
