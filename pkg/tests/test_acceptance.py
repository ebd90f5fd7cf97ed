"""End-to-end acceptance checks, one ``criterion N PASS|FAIL`` line each.

The summary is also printed at the end of the pytest run. Set
``ACANON_SKIP_FULL=1`` to skip the full-size grid run (about 20 minutes).
"""

import os
import time

import numpy as np
import pytest

from adacanon.canon import Budget, Scorer, lipschitz_oracle
from adacanon.groups import RngStream
from adacanon.harness import (ExperimentConfig, build_dataset, compare_search_strategies, invariance_audit,
                              kfold_evaluate, search_ordering_checks, train_one_vs_rest)
from adacanon.nn import init_mlp, mlp_apply
from adacanon.pointcloud import PermutationFamily, PointBackbone, PointCloudModel, multiset_distance
from adacanon.spectral import Graph, apply_scalar_function, decompose_graph, normalized_laplacian
from adacanon.training import NodeMlp, canonical_points

from conftest import random_graph, record
from gradcheck import jitter_biases, probe_params

GRID = dict(task="grid", keep_bands=4, candidates=8, refine_steps=5, refine_top_only=True, epochs=15,
            batch_size=50, hidden=64, folds=10, patience=100)
SCALED = dict(side=20, period=10, samples=200)
SHAPES = dict(task="shapes", n_points=64, per_class=50, knn=8, features=32, hidden=32, lr=3e-3, batch_size=32,
              epochs=20, candidates=16, refine_steps=3, refine_top_only=True, folds=5)
BANDS = dict(task="band-orientation", n_nodes=16, samples=400, separation=float(np.pi / 4), noise=0.05, bands=4,
             epochs=60, batch_size=50, hidden=64, lr=1e-3, folds=5)


@pytest.fixture(scope="module")
def toy():
    cfg = ExperimentConfig(**GRID, **SCALED)
    data = build_dataset(cfg)
    return cfg, data, train_one_vs_rest(cfg, data, np.arange(len(data)), 0)


@pytest.fixture(scope="module")
def shapes_model():
    cfg = ExperimentConfig(**{**SHAPES, "per_class": 10, "epochs": 2, "model": "deepset"})
    data = build_dataset(cfg)
    return cfg, data, train_one_vs_rest(cfg, data, np.arange(len(data)), 0)


# 1 ----------------------------------------------------------------- toy grid

def test_criterion_1_scaled_grid():
    cfg = ExperimentConfig(**GRID, **SCALED)
    start = time.perf_counter()
    report = kfold_evaluate(cfg, threads=1)
    secs = time.perf_counter() - start
    ok = record(1, report.mean >= 0.90 and secs <= 180,
                f"scaled 20x20/200 A-NLSF {100 * report.mean:.2f} +- {100 * report.std:.2f} in {secs:.0f}s "
                f"(need >= 90 in <= 180s)")
    assert ok


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get("ACANON_SKIP_FULL") == "1", reason="full-size grid run disabled")
def test_criterion_1_full_grid():
    cfg = ExperimentConfig(**GRID)
    data = build_dataset(cfg)
    start = time.perf_counter()
    report = kfold_evaluate(cfg, data, threads=1)
    secs = time.perf_counter() - start
    ok = record(1, report.mean >= 0.95 and secs <= 1800,
                f"40x40/1000 A-NLSF {100 * report.mean:.2f} +- {100 * report.std:.2f} in {secs:.0f}s "
                f"(need >= 95 in <= 1800s)")
    frozen = kfold_evaluate(cfg.replace(frozen=True), data, threads=1)
    ok &= record(1, frozen.mean <= 0.60, f"U=I frozen {100 * frozen.mean:.2f} (need <= 60)")
    mlp = kfold_evaluate(cfg.replace(model="node-mlp"), data, threads=1)
    ok &= record(1, mlp.mean <= 0.60, f"node MLP {100 * mlp.mean:.2f} (need <= 60)")
    assert ok


# 2, 3 ------------------------------------------------------------ invariance

def test_criterion_2_orbit_consistent(toy, shapes_model):
    cfg, data, trained = toy
    graphs = invariance_audit(trained, data, trials=100, seed=1)
    scfg, sdata, strained = shapes_model
    clouds = invariance_audit(strained, sdata, trials=100, seed=1)
    ok = record(2, graphs["exact"] == 100 and clouds["exact"] == 100,
                f"basis changes {graphs['exact']}/100 exact (max dlogit {graphs['max_dlogit']:.1e}), "
                f"rotations {clouds['exact']}/100 exact (max dlogit {clouds['max_dlogit']:.1e})")
    assert ok


def test_criterion_3_resampled(toy):
    cfg, data, trained = toy
    report = invariance_audit(trained, data, trials=100, mode="resampled", budget=Budget(64, 10, 0.05, True),
                              seed=2)
    ok = record(3, report["agreement"] >= 0.95,
                f"K=64 + 10 refine steps, agreement {report['agreement']:.2f} over 100 actions (need >= 0.95)")
    assert ok


# 4, 5 ---------------------------------------------------------- metric facts

def test_criterion_4_lipschitz():
    gen = np.random.default_rng(4)
    fam = PermutationFamily(4)
    worst = np.inf
    for t in range(1000):
        act = ("tanh", "relu")[t % 2]
        pf = init_mlp([8, 6, 1], RngStream(t, 1), hidden_activation=act)
        py = init_mlp([8, 6, 1], RngStream(t, 2), hidden_activation=act)
        f = Scorer(lambda pts, p=pf: mlp_apply(p, pts)[:, 0])
        y = Scorer(lambda pts, p=py: mlp_apply(p, pts)[:, 0])
        worst = min(worst, lipschitz_oracle(fam, f, y, gen.standard_normal((4, 2))).slack)
    ok = record(4, worst >= -1e-12, f"1000 S_4 trials, min slack {worst:.2e} (need >= -1e-12)")
    assert ok


def test_criterion_5_multiset_metric():
    gen = np.random.default_rng(5)
    sym = tri = zero = greedy = True
    for _ in range(500):
        n = int(gen.integers(1, 7))
        x, y, z = (gen.standard_normal((n, 3)) for _ in range(3))
        dxy, dyx = multiset_distance(x, y), multiset_distance(y, x)
        sym &= dxy == dyx
        tri &= dxy <= multiset_distance(x, z) + multiset_distance(z, y) + 1e-12
        zero &= multiset_distance(x, x[gen.permutation(n)]) <= 1e-12 and dxy > 1e-12
        greedy &= multiset_distance(x, y, mode="greedy") >= dxy
    ok = record(5, sym and tri and zero and greedy,
                f"500 triples: symmetry {sym}, triangle {tri}, zero iff permutation {zero}, greedy bound {greedy}")
    assert ok


# 6 ---------------------------------------------------------- spectral algebra

def test_criterion_6_spectral_algebra():
    gen = np.random.default_rng(6)
    proj = 0.0
    for t in range(100):
        n = int(gen.integers(4, 14))
        dec = decompose_graph(Graph(random_graph(gen, n, weighted=t % 2 == 1), np.zeros(n)), 0.5, 4)
        ps = [dec.projector(k) for k in range(len(dec.bases))]
        for k, p in enumerate(ps):
            proj = max(proj, np.abs(p @ p - p).max(), np.abs(p - p.T).max())
            for j in range(k):
                proj = max(proj, np.abs(p @ ps[j]).max())
        proj = max(proj, np.abs(sum(ps) - np.eye(n)).max())

    lap = normalized_laplacian(random_graph(gen, 9))
    coef = [0.3, -1.2, 0.5, 2.0]
    horner = np.zeros_like(lap)
    for c in reversed(coef):
        horner = horner @ lap + c * np.eye(9)
    calc = np.abs(apply_scalar_function(lap, lambda v: np.polyval(coef[::-1], v)) - horner).max()

    cyc = 0.0
    auto = 0.0
    for n in range(3, 20):
        a = np.roll(np.eye(n), 1, axis=1)
        a = a + a.T
        lap = normalized_laplacian(a)
        want = np.sort(1 - np.cos(2 * np.pi * np.arange(n) / n))
        cyc = max(cyc, np.abs(np.linalg.eigvalsh(lap) - want).max())
        shift = np.roll(np.eye(n), 1, axis=0)
        p = apply_scalar_function(lap, lambda v: np.exp(-v) + v ** 2)
        auto = max(auto, np.abs(shift @ p @ shift.T - p).max())
    ok = record(6, max(proj, calc, cyc, auto) <= 1e-9,
                f"projections {proj:.1e}, functional calculus {calc:.1e}, cycle spectrum {cyc:.1e}, "
                f"automorphism {auto:.1e} (need <= 1e-9)")
    assert ok


# 7 ---------------------------------------------------------- point clouds

@pytest.mark.parametrize("kind", ["deepset", "dgcnn"])
def test_criterion_7_point_clouds(kind):
    cfg = ExperimentConfig(**SHAPES, model=kind)
    data = build_dataset(cfg)
    ac = kfold_evaluate(cfg, data, threads=1, fold_limit=1)
    frozen = kfold_evaluate(cfg.replace(frozen=True), data, threads=1, fold_limit=1)
    gap = 100 * (ac.mean - frozen.mean)
    bb = PointBackbone.init(kind, RngStream(7), hidden=16, features=8, k=cfg.knn)
    x = np.random.default_rng(7).standard_normal((4, 64, 3))
    perm = np.random.default_rng(8).permutation(64)
    drift = np.abs(bb.forward(x)[0] - bb.forward(x[:, perm])[0]).max()
    ok = record(7, gap >= 15 and drift <= 1e-9,
                f"{kind}: AC {100 * ac.mean:.1f} vs frozen {100 * frozen.mean:.1f} on rotated test poses "
                f"(gap {gap:.1f}, need >= 15); permutation drift {drift:.1e}")
    assert ok


# 8 ---------------------------------------------------------- gradients

def _anlsf_terms(model, pts, y):
    """Per-sample, per-class BCE terms; they sum to the training loss."""
    s = np.stack([model.logits(d, p) for d, p in enumerate(pts)], axis=1)
    return y * np.logaddexp(0.0, -s) + (1 - y) * np.logaddexp(0.0, s)


def test_criterion_8_gradients(toy):
    gen = np.random.default_rng(8)
    worst = {}
    cfg, data, trained = toy
    model = trained.model
    idx = np.arange(8)
    pts, _, _ = canonical_points(model, data.encoded, idx, RngStream(8), cfg.budget)
    y = np.eye(2)[data.labels[idx]]
    loss, grads, _ = model.loss_and_grads(pts, y)
    assert np.isclose(_anlsf_terms(model, pts, y).sum(), loss, rtol=1e-12)
    worst["anlsf"] = probe_params(lambda: _anlsf_terms(model, pts, y), model.params(), grads, gen,
                                  probes=200).max()

    node = NodeMlp.init(2, 2, RngStream(8), hidden=16)
    jitter_biases(node.nets().values(), gen)
    sig = gen.standard_normal((6, 12, 2))
    y = np.eye(2)[[0, 1, 0, 1, 1, 0]]
    worst["node-mlp"] = probe_params(lambda: node.loss_and_grads(sig, y)[0], node.params(),
                                     node.loss_and_grads(sig, y)[1], gen, probes=200).max()

    for kind in ("deepset", "pointnet", "dgcnn"):
        pc = PointCloudModel.init(kind, 3, RngStream(9), hidden=12, features=6, k=4)
        jitter_biases(pc.nets().values(), gen)
        clouds = [gen.standard_normal((4, 10, 3)) for _ in range(3)]
        yy = np.eye(3)[[0, 1, 2, 1]]
        worst[kind] = probe_params(lambda: pc.loss_and_grads(clouds, yy)[0], pc.params(),
                                   pc.loss_and_grads(clouds, yy)[1], gen, probes=200).max()
    ok = record(8, max(worst.values()) <= 1e-5,
                "200 probes each, max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


# 9 ---------------------------------------------------------- search strategies

def test_criterion_9_search_ordering(tmp_path):
    cfg = ExperimentConfig(**BANDS)
    rows = compare_search_strategies(cfg, train_budget=Budget(8, 5, 0.05, True), csv_path=tmp_path / "s.csv")
    checks = search_ordering_checks(rows)
    table = ", ".join(f"{r['strategy']} {r['accuracy']:.3f}/{r['evaluations']}" for r in rows)
    ok = record(9, all(checks.values()), f"{table}; " + ", ".join(f"{k} {v}" for k, v in checks.items()))
    assert ok


# 10 --------------------------------------------------------- determinism

def test_criterion_10_thread_determinism():
    cfgs = [ExperimentConfig(**{**BANDS, "samples": 60, "epochs": 3, "folds": 8}),
            ExperimentConfig(**{**SHAPES, "model": "deepset", "per_class": 8, "epochs": 2, "folds": 8})]
    same = []
    for cfg in cfgs:
        a = kfold_evaluate(cfg, threads=1).to_json()
        b = kfold_evaluate(cfg, threads=8).to_json()
        same.append(a == b)
    ok = record(10, all(same), f"metrics JSON byte-identical at 1 vs 8 threads: graphs {same[0]}, "
                               f"point clouds {same[1]}")
    assert ok
