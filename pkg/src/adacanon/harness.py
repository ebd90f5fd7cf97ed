"""Experiment configs, k-fold evaluation, search-strategy comparison and
invariance audits.

Every random choice is drawn from a stream derived from the master seed
and a label (fold, sample, class, ...), so results do not depend on how
folds are scheduled across worker threads.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .canon import Budget, Prior, invariance_oracle
from .data import (GridTaskConfig, make_band_orientation_graphs, make_grid_task, make_shape_dataset)
from .groups import RngStream, haar_orthogonal, haar_rotation3_batch
from .pointcloud import BACKBONES, PointCloudModel, RotationFamily, rotate
from .spectral import AnlsfFamily, AnlsfModel, DecompositionCache
from .training import (EncodedGraphs, NodeMlp, SpectralSettings, TrainSettings, encode_graphs, fit_anlsf,
                       fit_node_mlp, fit_pointcloud, predict_anlsf, predict_pointcloud)

log = logging.getLogger(__name__)

THREADS_ENV = "ACANON_THREADS"
GRAPH_TASKS = ("grid", "band-orientation")
GRAPH_MODELS = ("anlsf", "node-mlp")
TASKS = GRAPH_TASKS + ("shapes",)
MODELS = GRAPH_MODELS + BACKBONES


class BadConfig(ValueError):
    pass


class BadFoldCount(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "grid"
    model: str = "anlsf"
    frozen: bool = False
    # grid task
    side: int = 40
    period: int = 20
    noise: float = 0.1
    samples: int = 1000
    # band-orientation task
    n_nodes: int = 16
    separation: float = float(np.pi / 2)
    # shapes task
    n_points: int = 64
    per_class: int = 100
    rotate_test: bool = True
    knn: int = 8
    features: int = 64
    # band plan
    decay: float = 0.5
    bands: int = 8
    band_cap: int | None = None
    keep_bands: int | None = None
    gso: str = "normalized-laplacian"
    # canonicalization budget
    candidates: int = 8
    refine_steps: int = 0
    step_size: float = 0.05
    refine_top_only: bool = False
    # training
    epochs: int = 100
    batch_size: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.0
    patience: int = 100
    hidden: int = 128
    val_fraction: float = 0.1
    folds: int = 10
    seed: int = 0
    reg_weight: float = 0.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise BadConfig(f"unknown task {self.task!r}")
        if self.model not in MODELS:
            raise BadConfig(f"unknown model {self.model!r}")
        if (self.task == "shapes") != (self.model in BACKBONES):
            raise BadConfig(f"model {self.model!r} does not fit task {self.task!r}")
        if self.folds < 2:
            raise BadFoldCount("need at least two folds")
        if not 0.0 <= self.val_fraction < 1.0:
            raise BadConfig("val_fraction must lie in [0, 1)")

    @property
    def budget(self) -> Budget:
        return Budget(self.candidates, self.refine_steps, self.step_size, self.refine_top_only)

    @property
    def train_settings(self) -> TrainSettings:
        return TrainSettings(self.epochs, self.batch_size, self.lr, self.weight_decay, self.patience,
                             self.hidden, self.val_fraction)

    @property
    def spectral(self) -> SpectralSettings:
        return SpectralSettings(self.decay, self.bands, self.band_cap, self.keep_bands, self.gso,
                                self.reg_weight)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key, text):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    if "None" in kind and text.lower() in ("none", ""):
        return None
    try:
        if kind.startswith("bool"):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise BadConfig(f"bad value for {key}: {text!r}") from None
    return text


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """``key = value`` lines; ``#`` starts a comment; dashes in keys map to underscores."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadConfig(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise BadConfig(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return dataclasses.replace(base or ExperimentConfig(), **values)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    cfg = parse_config(Path(path).read_text())
    return cfg.replace(**overrides) if overrides else cfg


def config_text(cfg: ExperimentConfig) -> str:
    def fmt(v):
        return "none" if v is None else str(v).lower() if isinstance(v, bool) else str(v)
    return "".join(f"{k} = {fmt(v)}\n" for k, v in cfg.to_dict().items())


def resolve_threads(explicit: int | None = None) -> int:
    if explicit is not None:
        return max(1, int(explicit))
    return max(1, int(os.environ.get(THREADS_ENV, "1")))


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    """Either encoded graphs (plus raw signals) or an (S, N, 3) cloud stack."""

    kind: str
    labels: np.ndarray
    n_classes: int
    encoded: EncodedGraphs | None = None
    signals: np.ndarray | None = None
    clouds: np.ndarray | None = None
    graphs: list | None = None

    def __len__(self):
        return len(self.labels)


def build_graphs(cfg: ExperimentConfig) -> list:
    if cfg.task == "grid":
        return make_grid_task(GridTaskConfig(cfg.side, cfg.period, cfg.noise, cfg.samples, cfg.seed))
    return make_band_orientation_graphs(cfg.n_nodes, cfg.samples, 2, cfg.separation, cfg.noise, seed=cfg.seed)


def dataset_from_graphs(graphs, cfg: ExperimentConfig) -> Dataset:
    enc = encode_graphs(graphs, cfg.spectral, DecompositionCache(cfg.decay, cfg.bands, cfg.gso))
    labels = np.array([g.label for g in graphs])
    signals = None
    if len({g.n for g in graphs}) == 1:
        signals = np.stack([g.signal for g in graphs])
    return Dataset("graphs", labels, int(labels.max()) + 1, encoded=enc, signals=signals, graphs=graphs)


def dataset_from_clouds(pairs) -> Dataset:
    clouds = np.stack([np.asarray(p, dtype=np.float64) for p, _ in pairs])
    labels = np.array([int(y) for _, y in pairs])
    return Dataset("clouds", labels, int(labels.max()) + 1, clouds=clouds)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.task in GRAPH_TASKS:
        return dataset_from_graphs(build_graphs(cfg), cfg)
    return dataset_from_clouds(make_shape_dataset(n_points=cfg.n_points, per_class=cfg.per_class, seed=cfg.seed))


def test_poses(clouds, seed: int, keys) -> np.ndarray:
    """Each test cloud rotated by its own Haar rotation, keyed by sample index."""
    base = RngStream(seed, 0).child("test-pose")
    rots = np.stack([haar_rotation3_batch(1, base.child(int(k)))[0] for k in keys])
    return rotate(clouds, rots)


# ---------------------------------------------------------------- folds

def stratified_folds(labels, folds: int, seed: int) -> list:
    """Test index arrays; each class is shuffled and dealt round-robin."""
    labels = np.asarray(labels)
    if folds < 2 or folds > len(labels):
        raise BadFoldCount(f"cannot split {len(labels)} samples into {folds} folds")
    base = RngStream(seed, 0).child("folds")
    buckets = [[] for _ in range(folds)]
    offset = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        members = members[base.child("class", int(c)).generator().permutation(len(members))]
        for j, i in enumerate(members):
            buckets[(offset + j) % folds].append(int(i))
        offset += len(members)
    return [np.array(sorted(b), dtype=int) for b in buckets]


def split_validation(train_idx, labels, fraction: float, rng: RngStream):
    """Stratified (train, val) split of ``train_idx``; val may be empty."""
    train_idx = np.asarray(train_idx)
    if fraction <= 0:
        return train_idx, train_idx[:0]
    labels = np.asarray(labels)
    val = []
    for c in np.unique(labels[train_idx]):
        members = train_idx[labels[train_idx] == c]
        members = members[rng.child("class", int(c)).generator().permutation(len(members))]
        take = int(round(fraction * len(members)))
        if take >= len(members):
            take = len(members) - 1
        val.extend(members[:take].tolist())
    val = np.array(sorted(val), dtype=int)
    return np.setdiff1d(train_idx, val), val


def _logit_summary(logits) -> dict:
    logits = np.asarray(logits)
    return {"mean": [float(x) for x in logits.mean(axis=0)], "std": [float(x) for x in logits.std(axis=0)]}


@dataclass
class TrainedModel:
    cfg: ExperimentConfig
    model: object
    history: list
    best_epoch: int
    train_evaluations: int


def train_one_vs_rest(cfg: ExperimentConfig, data: Dataset, train_idx, seed: int) -> TrainedModel:
    """Fit cfg.model on ``train_idx``, carving a stratified validation split."""
    train_idx = np.asarray(train_idx)
    if len(train_idx) == 0:
        raise BadConfig("empty training set")
    root = RngStream(seed, 0)
    tr, va = split_validation(train_idx, data.labels, cfg.val_fraction, root.child("val-split"))
    ts = cfg.train_settings
    if cfg.model == "anlsf":
        res = fit_anlsf(data.encoded.subset(tr), data.encoded.subset(va) if len(va) else None, data.n_classes,
                        ts, cfg.spectral, cfg.budget, seed, frozen=cfg.frozen)
    elif cfg.model == "node-mlp":
        val = (data.signals[va], data.labels[va]) if len(va) else None
        res = fit_node_mlp(data.signals[tr], data.labels[tr], data.n_classes, ts, seed, val=val)
    else:
        val = (data.clouds[va], data.labels[va]) if len(va) else None
        res = fit_pointcloud(data.clouds[tr], data.labels[tr], data.n_classes, cfg.model, ts, cfg.budget, seed,
                             frozen=cfg.frozen, val=val, features=cfg.features, k=cfg.knn)
    return TrainedModel(cfg, res.model, res.history, res.best_epoch, res.evaluations)


def predict(trained: TrainedModel, data: Dataset, idx, base: RngStream, budget: Budget | None = None):
    """(predictions, logits, evaluations) for samples ``idx``."""
    cfg = trained.cfg
    budget = budget or cfg.budget
    idx = np.asarray(idx)
    if cfg.model == "anlsf":
        return predict_anlsf(trained.model, data.encoded.subset(idx), budget, base, frozen=cfg.frozen)
    if cfg.model == "node-mlp":
        logits = trained.model.logits(data.signals[idx])
        return np.argmax(logits, axis=1), logits, np.zeros(len(idx), dtype=int)
    clouds = data.clouds[idx]
    if cfg.rotate_test:
        clouds = test_poses(clouds, cfg.seed, idx)
    return predict_pointcloud(trained.model, clouds, budget, base, frozen=cfg.frozen, keys=idx)


def run_fold(cfg: ExperimentConfig, data: Dataset, test_idx, fold: int) -> tuple[dict, float]:
    start = time.perf_counter()
    seed = RngStream(cfg.seed, 0).child("fold", fold).stream
    train_idx = np.setdiff1d(np.arange(len(data)), test_idx)
    trained = train_one_vs_rest(cfg, data, train_idx, seed)
    preds, logits, evals = predict(trained, data, test_idx, RngStream(seed, 0).child("test"))
    acc = float(np.mean(preds == data.labels[test_idx]))
    out = {"fold": fold, "accuracy": acc, "n_test": int(len(test_idx)), "best_epoch": int(trained.best_epoch),
           "epochs_run": len(trained.history), "train_evaluations": int(trained.train_evaluations),
           "test_evaluations": int(np.sum(evals)), "logits": _logit_summary(logits)}
    return out, time.perf_counter() - start


@dataclass
class MetricsReport:
    """Deterministic metrics plus wall-clock timings kept apart.

    ``to_json`` never includes ``timing``; it goes to a sidecar file so the
    metrics file is byte-identical across runs.
    """

    config: dict
    folds: list
    mean: float
    std: float
    evaluations: dict
    audit: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @classmethod
    def from_folds(cls, cfg: ExperimentConfig, folds: list, timing: dict | None = None) -> "MetricsReport":
        accs = np.array([f["accuracy"] for f in folds])
        evals = {"train": int(sum(f["train_evaluations"] for f in folds)),
                 "test": int(sum(f["test_evaluations"] for f in folds))}
        audit = {"logit_mean_per_class": np.mean([f["logits"]["mean"] for f in folds], axis=0).tolist()}
        return cls(cfg.to_dict(), folds, float(accs.mean()), float(accs.std()), evals, audit, timing or {})

    def content(self) -> dict:
        return {"config": self.config, "folds": self.folds, "accuracy_mean": self.mean,
                "accuracy_std": self.std, "evaluations": self.evaluations, "audit": self.audit}

    def to_json(self) -> str:
        return json.dumps(self.content(), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        timing_path = path.with_name(path.stem + ".timing.json")
        timing_path.write_text(json.dumps(self.timing, indent=2, sort_keys=True) + "\n")
        return timing_path


def kfold_evaluate(cfg: ExperimentConfig, data: Dataset | None = None, threads: int | None = None,
                   fold_limit: int | None = None) -> MetricsReport:
    """Stratified k-fold CV with a fresh initialization per fold.

    ``fold_limit`` runs only the first folds (for quick checks); the split
    itself is always the full k-way one.
    """
    data = data or build_dataset(cfg)
    splits = stratified_folds(data.labels, cfg.folds, cfg.seed)
    todo = list(range(len(splits) if fold_limit is None else min(fold_limit, len(splits))))
    workers = resolve_threads(threads)
    started = time.time()
    if workers == 1:
        results = [run_fold(cfg, data, splits[f], f) for f in todo]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda f: run_fold(cfg, data, splits[f], f), todo))
    folds = [r[0] for r in results]
    timing = {"started_unix": started, "total_seconds": time.time() - started,
              "fold_seconds": [r[1] for r in results], "threads": workers}
    return MetricsReport.from_folds(cfg, folds, timing)


# ---------------------------------------------------------------- search strategies

DEFAULT_STRATEGIES = (
    ("K=8", Budget(8)),
    ("K=40", Budget(40)),
    ("K=80", Budget(80)),
    ("K=8+refine", Budget(8, 5, 0.05, True)),
)


def compare_search_strategies(cfg: ExperimentConfig, strategies=DEFAULT_STRATEGIES, data: Dataset | None = None,
                              train_budget: Budget | None = None, csv_path=None) -> list:
    """Accuracy, evaluation count and wall-clock per inference budget.

    One model is trained per config (under ``train_budget``, default the
    config's own budget) on a stratified 80/20 split, then every strategy
    canonicalizes the same test samples from the same per-sample streams,
    so candidate sets are nested across K.
    """
    if len(strategies) < 2:
        raise BadConfig("need at least two strategies")
    data = data or build_dataset(cfg)
    splits = stratified_folds(data.labels, 5, cfg.seed)
    test_idx = splits[0]
    train_idx = np.setdiff1d(np.arange(len(data)), test_idx)
    tcfg = cfg if train_budget is None else cfg.replace(
        candidates=train_budget.candidates, refine_steps=train_budget.refine_steps,
        step_size=train_budget.step_size, refine_top_only=train_budget.refine_top_only)
    seed = RngStream(cfg.seed, 0).child("compare").stream
    trained = train_one_vs_rest(tcfg, data, train_idx, seed)
    rows = []
    for name, budget in strategies:
        start = time.perf_counter()
        preds, _, evals = predict(trained, data, test_idx, RngStream(seed, 0).child("test"), budget)
        rows.append({"strategy": name, "candidates": budget.candidates, "refine_steps": budget.refine_steps,
                     "accuracy": float(np.mean(preds == data.labels[test_idx])),
                     "evaluations": int(np.sum(evals)), "seconds": time.perf_counter() - start})
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows


def search_ordering_checks(rows, large: str = "K=80", refined: str = "K=8+refine", max_ratio: float = 0.25):
    """The two asserted orderings: refine vs large K, and monotonicity in K."""
    by = {r["strategy"]: r for r in rows}
    plain = sorted((r for r in rows if r["refine_steps"] == 0), key=lambda r: r["candidates"])
    accs = [r["accuracy"] for r in plain]
    return {
        "refine_beats_large_k": by[refined]["accuracy"] >= by[large]["accuracy"],
        "refine_cheaper": by[refined]["evaluations"] <= max_ratio * by[large]["evaluations"],
        "monotone_in_k": all(a <= b for a, b in zip(accs, accs[1:])),
    }


# ---------------------------------------------------------------- invariance audit

def _graph_family(model: AnlsfModel, coeffs):
    return AnlsfFamily(coeffs.dims, model.dims)


def invariance_audit(trained: TrainedModel, data: Dataset, trials: int = 100, mode: str = "orbit-consistent",
                     budget: Budget | None = None, seed: int = 0, tol: float = 1e-9) -> dict:
    """Classify g and v.g for random group elements v.

    Graphs: v is a Haar basis change in every band. Point clouds: v is a
    Haar rotation. Orbit-consistent trials must match exactly (within
    ``tol`` on logits); resampled trials report an agreement rate.
    """
    cfg = trained.cfg
    if cfg.model == "node-mlp":
        raise BadConfig("the node MLP has no canonicalization to audit")
    budget = budget or cfg.budget
    model = trained.model
    base = RngStream(seed, 0).child("audit", mode)
    n = len(data)
    priors = [Prior()] * model.n_classes
    scorers = [model.scorer(d) for d in range(model.n_classes)]
    records = []
    for t in range(trials):
        i = t % n
        tr = base.child("trial", t)
        if cfg.model == "anlsf":
            g = data.encoded.coeffs[i]
            fam = _graph_family(model, g)
            v = [haar_orthogonal(m, tr.child("v", k)) if m else np.eye(0) for k, m in enumerate(g.dims)]
        else:
            g = data.clouds[i]
            fam = RotationFamily()
            v = haar_rotation3_batch(1, tr.child("v"))[0]
        res = invariance_oracle(fam, priors, scorers, g, v, budget, tr.child("search"), mode)
        records.append({"trial": t, "sample": i, "agree": bool(res.agree), "max_dlogit": res.max_dlogit})
    agree = sum(r["agree"] for r in records)
    exact = sum(r["agree"] and r["max_dlogit"] <= tol for r in records)
    report = {"mode": mode, "trials": trials, "agreement": agree / trials, "exact": exact,
              "max_dlogit": max(r["max_dlogit"] for r in records), "tolerance": tol,
              "budget": dataclasses.asdict(budget), "records": records}
    report["passed"] = exact == trials if mode == "orbit-consistent" else None
    return report
