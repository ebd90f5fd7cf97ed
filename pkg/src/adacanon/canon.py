"""Prior maximization over a transformation family, plus property oracles.

A family maps (transform, raw input) to a point in the network's input
space. For each class head we pick the transform whose prior-transformed
logit is largest among sampled (and optionally refined) candidates.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .groups import DEFAULT_STEP_SIZE, RefineResult, RngStream

log = logging.getLogger(__name__)


class NonFiniteScore(ArithmeticError):
    pass


class MissingClass(ValueError):
    pass


class ComposeUnsupported(TypeError):
    pass


@dataclass(frozen=True)
class Prior:
    """Monotone map h applied to a raw logit; descending priors are negated."""

    direction: str = "ascending"
    transform: Callable = lambda s: s
    derivative: Callable = lambda s: np.ones_like(np.asarray(s, dtype=float))

    def __post_init__(self):
        if self.direction not in ("ascending", "descending"):
            raise ValueError(f"bad prior direction {self.direction!r}")

    @property
    def sign(self) -> float:
        return 1.0 if self.direction == "ascending" else -1.0

    def value(self, logits):
        return self.transform(np.asarray(logits, dtype=float))

    def objective(self, logits):
        return self.sign * self.value(logits)

    def objective_grad(self, logits):
        return self.sign * self.derivative(np.asarray(logits, dtype=float))


IDENTITY_PRIOR = Prior()


class Scorer:
    """A batched logit function with an optional input gradient.

    ``fn(points)`` maps a stack of canonical points (leading axis = batch)
    to a 1-D array of logits; ``grad(points)`` returns d logit / d point
    with the same shape as ``points``.
    """

    def __init__(self, fn, grad=None):
        self.fn = fn
        self.grad = grad

    def __call__(self, points):
        return np.asarray(self.fn(points), dtype=np.float64).reshape(-1)


class TransformationFamily:
    """Interface for kappa_u. Subclasses override what they support."""

    supports_compose = False

    def sample(self, rng, count: int) -> list:
        raise NotImplementedError

    def apply(self, u, g):
        raise NotImplementedError

    def apply_many(self, us: Sequence, g):
        return np.stack([self.apply(u, g) for u in us])

    def refine(self, u, g, scorer: Scorer, prior: Prior, steps: int, step_size: float) -> RefineResult | None:
        return None

    def compose(self, u, v):
        raise ComposeUnsupported(type(self).__name__)

    def inverse(self, v):
        raise ComposeUnsupported(type(self).__name__)

    def act(self, v, g):
        raise ComposeUnsupported(type(self).__name__)

    def enumerate(self) -> list:
        raise NotImplementedError(f"{type(self).__name__} has no finite candidate set")

    def perturb(self, g, delta):
        return np.asarray(g, dtype=np.float64) + delta

    def input_shape(self, g):
        return np.shape(g)


@dataclass
class Budget:
    candidates: int = 8
    refine_steps: int = 0
    step_size: float = DEFAULT_STEP_SIZE
    refine_top_only: bool = False

    def __post_init__(self):
        if self.candidates < 1:
            raise ValueError("need at least one candidate")


@dataclass
class CanonDecision:
    class_id: int
    transform: Any
    logit: float
    prior_value: float
    candidate_index: int
    refine_gain: float = 0.0
    evaluations: int = 0
    trajectory: list = field(default_factory=list)

    def record(self, sample_id=None) -> dict:
        return {
            "sample": sample_id,
            "class": int(self.class_id),
            "candidate_index": int(self.candidate_index),
            "logit": float(self.logit),
            "prior_value": float(self.prior_value),
            "refine_gain": float(self.refine_gain),
            "evaluations": int(self.evaluations),
        }


def prior_maximize(
    fam: TransformationFamily,
    prior: Prior,
    score: Scorer,
    g,
    budget: Budget,
    rng: RngStream | None = None,
    candidates: Sequence | None = None,
    class_id: int = 0,
) -> CanonDecision:
    """argmax over candidates of prior(score(fam.apply(u, g))).

    Candidates come from ``fam.sample(rng, K)`` unless given explicitly.
    Non-finite candidates are dropped; ties go to the lowest index.
    """
    if candidates is None:
        if rng is None:
            raise ValueError("need an rng stream or an explicit candidate list")
        candidates = fam.sample(rng, budget.candidates)
    candidates = list(candidates)
    if not candidates:
        raise ValueError("empty candidate set")
    logits = score(fam.apply_many(candidates, g))
    objective = prior.objective(logits)
    finite = np.isfinite(objective)
    if not finite.any():
        raise NonFiniteScore("score was non-finite for every candidate")
    if not finite.all():
        log.warning("dropping %d non-finite candidates", int((~finite).sum()))
    objective = np.where(finite, objective, -np.inf)
    evaluations = len(candidates)
    gains = np.zeros(len(candidates))
    trajectories: dict[int, list] = {}

    if budget.refine_steps > 0:
        if budget.refine_top_only:
            todo = [int(np.argmax(objective))]
        else:
            todo = [int(i) for i in np.flatnonzero(finite)]
        for i in todo:
            res = fam.refine(candidates[i], g, score, prior, budget.refine_steps, budget.step_size)
            if res is None:
                break
            evaluations += res.evaluations
            if res.value >= objective[i]:
                gains[i] = res.value - objective[i]
                candidates[i] = res.point
                objective[i] = res.value
            trajectories[i] = res.history

    best = int(np.argmax(objective))
    logit = float(score(fam.apply_many([candidates[best]], g))[0])
    return CanonDecision(
        class_id=class_id,
        transform=candidates[best],
        logit=logit,
        prior_value=float(prior.value(logit)),
        candidate_index=best,
        refine_gain=float(gains[best]),
        evaluations=evaluations,
        trajectory=trajectories.get(best, []),
    )


def one_vs_rest_decide(decisions: Sequence[CanonDecision], n_classes: int | None = None) -> int:
    """Class with the largest raw logit; lowest class id on ties."""
    by_class = {d.class_id: d.logit for d in decisions}
    n = n_classes if n_classes is not None else len(decisions)
    if n < 2:
        raise MissingClass("one-vs-rest needs at least two classes")
    missing = [c for c in range(n) if c not in by_class]
    if missing:
        raise MissingClass(f"no decision for classes {missing}")
    return int(np.argmax([by_class[c] for c in range(n)]))


def classify(fam, priors, scorers, g, budget: Budget, rngs=None, candidates=None):
    """Per-class prior maximization followed by one-vs-rest argmax."""
    decisions = []
    for d, (prior, scorer) in enumerate(zip(priors, scorers)):
        cands = None if candidates is None else candidates[d]
        rng = None if rngs is None else rngs[d]
        decisions.append(prior_maximize(fam, prior, scorer, g, budget, rng, cands, class_id=d))
    return decisions, one_vs_rest_decide(decisions, len(decisions))


@dataclass
class LipschitzCheck:
    lhs: float
    rhs: float

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + 1e-12


def lipschitz_oracle(fam: TransformationFamily, f: Scorer, y: Scorer, g) -> LipschitzCheck:
    """|max_u f(k_u g) - max_u y(k_u g)| <= max_u |f - y| over a finite family."""
    points = fam.apply_many(fam.enumerate(), g)
    fv, yv = f(points), y(points)
    return LipschitzCheck(float(abs(fv.max() - yv.max())), float(np.max(np.abs(fv - yv))))


@dataclass
class InvarianceResult:
    pred: int
    pred_acted: int
    logits: np.ndarray
    logits_acted: np.ndarray

    @property
    def agree(self) -> bool:
        return self.pred == self.pred_acted

    @property
    def max_dlogit(self) -> float:
        return float(np.max(np.abs(self.logits - self.logits_acted)))


def invariance_oracle(fam, priors, scorers, g, v, budget: Budget, rng: RngStream,
                      mode: str = "orbit-consistent") -> InvarianceResult:
    """Classify g and act(v, g) and compare.

    orbit-consistent: the second run uses the first run's candidates
    composed with v^-1, so the two searches see identical canonical points.
    resampled: the second run draws its own candidates.
    """
    n = len(scorers)
    rngs = [rng.child("class", d) for d in range(n)]
    cands = [fam.sample(r, budget.candidates) for r in rngs]
    dec_a, pred_a = classify(fam, priors, scorers, g, budget, candidates=cands)
    g_acted = fam.act(v, g)
    if mode == "orbit-consistent":
        if not fam.supports_compose:
            raise ComposeUnsupported(type(fam).__name__)
        v_inv = fam.inverse(v)
        moved = [[fam.compose(u, v_inv) for u in cs] for cs in cands]
        dec_b, pred_b = classify(fam, priors, scorers, g_acted, budget, candidates=moved)
    elif mode == "resampled":
        other = [rng.child("resample", d) for d in range(n)]
        dec_b, pred_b = classify(fam, priors, scorers, g_acted, budget, rngs=other)
    else:
        raise ValueError(f"unknown invariance mode {mode!r}")
    return InvarianceResult(pred_a, pred_b,
                            np.array([d.logit for d in dec_a]),
                            np.array([d.logit for d in dec_b]))


def continuity_probe(fam, score: Scorer, g, eps_grid, rng: RngStream, candidates=None, count: int = 16):
    """Max-logit change under random perturbations of norm eps.

    Uses one fixed candidate set (the family's enumeration when available)
    so the only moving part is the input.
    """
    if candidates is None:
        try:
            candidates = fam.enumerate()
        except NotImplementedError:
            candidates = fam.sample(rng.child("candidates"), count)
    base = float(score(fam.apply_many(candidates, g)).max())
    gen = rng.child("direction").generator()
    direction = gen.standard_normal(fam.input_shape(g))
    direction /= np.linalg.norm(direction)
    table = []
    for eps in eps_grid:
        moved = fam.perturb(g, eps * direction)
        table.append((float(eps), abs(float(score(fam.apply_many(candidates, moved)).max()) - base)))
    return table


def write_audit_log(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
