import json

import numpy as np
import pytest

from adacanon.data import (SHAPE_CLASSES, BadConfig, GridTaskConfig, grid_coordinates, grid_templates,
                           make_band_orientation_graphs, make_grid_task, make_shape_dataset, read_clouds,
                           read_graphs, relative_angle_oracle, shape_points, torus_adjacency, write_clouds,
                           write_graphs, write_manifest)
from adacanon.groups import RngStream, haar_rotation3
from adacanon.numerics import eigh_symmetric
from adacanon.pointcloud import multiset_distance, rotate
from adacanon.spectral import normalized_laplacian


def eigenspace_energies(adj, signal, tol=1e-8):
    eig = eigh_symmetric(normalized_laplacian(adj))
    coeffs = eig.vectors.T @ signal
    # cluster ascending eigenvalues into eigenspaces by gaps larger than tol
    keys = np.concatenate([[0], np.cumsum(np.diff(eig.values) > tol)])
    out = {}
    for key, c in zip(keys.tolist(), coeffs):
        out[key] = out.get(key, 0.0) + float(c @ c)
    return out


def test_grid_config_errors():
    for bad in ({"side": 7}, {"side": 40, "period": 7}, {"samples": 1}, {"noise": -0.1}):
        with pytest.raises(BadConfig):
            GridTaskConfig(**bad)


def test_torus_is_four_regular():
    a = torus_adjacency(6)
    assert np.array_equal(a, a.T) and np.all(a.sum(axis=1) == 4)
    # node (x=5, y=0) wraps to (0, 0)
    assert a[5, 0] == 1 and a[0, 30] == 1


def test_noiseless_grid_is_exact():
    cfg = GridTaskConfig(side=8, period=4, noise=0.0, samples=10)
    x, y = grid_coordinates(8)
    left = x < 4
    for g in make_grid_task(cfg):
        ch1 = np.where(left, np.sin(2 * np.pi * x / 4), 0.0)
        wave = np.sin(2 * np.pi * (y if g.label else x) / 4)
        assert np.array_equal(g.signal[:, 0], ch1)
        assert np.array_equal(g.signal[:, 1], np.where(left, 0.0, wave))


def test_grid_balance_and_determinism():
    cfg = GridTaskConfig(side=8, period=4, samples=11, seed=3)
    a, b = make_grid_task(cfg), make_grid_task(cfg)
    labels = [g.label for g in a]
    assert abs(labels.count(0) - labels.count(1)) <= 1
    assert all(np.array_equal(g.signal, h.signal) for g, h in zip(a, b))
    c = make_grid_task(GridTaskConfig(side=8, period=4, samples=11, seed=4))
    assert not all(np.array_equal(g.signal, h.signal) for g, h in zip(a, c))


def test_grid_noise_stays_on_support():
    g = make_grid_task(GridTaskConfig(side=8, period=4, noise=0.5, samples=2))[0]
    x, _ = grid_coordinates(8)
    assert np.all(g.signal[x >= 4, 0] == 0) and np.all(g.signal[x < 4, 1] == 0)


def test_default_grid_configuration():
    cfg = GridTaskConfig()
    assert (cfg.side, cfg.period, cfg.noise, cfg.samples) == (40, 20, 0.1, 1000)
    graphs = make_grid_task(cfg)
    assert len(graphs) == 1000 and graphs[0].n == 1600
    assert sum(g.label for g in graphs) == 500


def test_transpose_automorphism_preserves_eigenspace_energy():
    side, period = 8, 4
    adj = torus_adjacency(side)
    x, y = grid_coordinates(side)
    perm = x * side + y
    assert np.array_equal(adj[np.ix_(perm, perm)], adj)
    sx, sy = np.sin(2 * np.pi * x / period), np.sin(2 * np.pi * y / period)
    assert np.array_equal(sx[perm], sy)
    ex, ey = eigenspace_energies(adj, sx[:, None]), eigenspace_energies(adj, sy[:, None])
    assert ex.keys() == ey.keys()
    assert all(abs(ex[k] - ey[k]) < 1e-9 for k in ex)


def test_half_masked_classes_do_not_share_energy_profiles():
    # the half-support mask breaks the transpose symmetry, so isotropic energies differ
    side, period = 8, 4
    adj = torus_adjacency(side)
    sig0, sig1, _ = grid_templates(side, period)
    e0 = eigenspace_energies(adj, sig0[:, 1:])
    e1 = eigenspace_energies(adj, sig1[:, 1:])
    assert max(abs(e0.get(k, 0) - e1.get(k, 0)) for k in set(e0) | set(e1)) > 1e-3


def test_ellipsoid_quadric():
    pts = shape_points("ellipsoid", 200, np.random.default_rng(0))
    q = (pts[:, 0] / 1.0) ** 2 + (pts[:, 1] / 0.5) ** 2 + (pts[:, 2] / 0.25) ** 2
    assert np.max(np.abs(q - 1)) < 1e-9
    raw = make_shape_dataset(classes=("ellipsoid",), n_points=50, per_class=3, jitter=0.0, center=False)
    for p, _ in raw:
        assert np.max(np.abs(p[:, 0] ** 2 + 4 * p[:, 1] ** 2 + 16 * p[:, 2] ** 2 - 1)) < 1e-9


def test_shape_dataset_balance():
    ds = make_shape_dataset(n_points=16, per_class=100)
    assert len(ds) == 300
    assert np.bincount([y for _, y in ds]).tolist() == [100, 100, 100]
    assert all(p.shape == (16, 3) and np.allclose(p.mean(axis=0), 0) for p, _ in ds)
    assert len(SHAPE_CLASSES) == 3


def test_shape_errors():
    with pytest.raises(BadConfig):
        make_shape_dataset(n_points=7)
    with pytest.raises(BadConfig):
        make_shape_dataset(per_class=0)
    with pytest.raises(BadConfig):
        shape_points("torus", 10, np.random.default_rng(0))


def test_rotated_copies_under_multiset_metric():
    (pts, _), = make_shape_dataset(classes=("helix",), n_points=8, per_class=1)
    a = rotate(pts, haar_rotation3(RngStream(1)))
    b = rotate(pts, haar_rotation3(RngStream(2)))
    assert multiset_distance(a, b) > 0
    assert multiset_distance(a, a[np.random.default_rng(0).permutation(8)]) == 0


def test_band_orientation_quarter_turn_noiseless_is_separable():
    graphs = make_band_orientation_graphs(n_nodes=12, n_samples=40, separation=np.pi / 2, noise=0.0)
    assert all(relative_angle_oracle(g, 2, np.pi / 2) == g.label for g in graphs)
    # linear readout on the oriented coefficients: |sin| of the relative angle is 0 or 1
    for g in graphs:
        vecs = eigh_symmetric(normalized_laplacian(g.adjacency)).vectors[:, 1:3]
        c1, c2 = vecs.T @ g.signal[:, 0], vecs.T @ g.signal[:, 1]
        cross = abs(c1[0] * c2[1] - c1[1] * c2[0])
        assert abs(cross - g.label) < 1e-9


def test_band_orientation_zero_separation_is_degenerate():
    graphs = make_band_orientation_graphs(n_nodes=12, n_samples=20, separation=0.0, noise=0.0)
    assert all(np.array_equal(g.signal[:, 0], g.signal[:, 1]) for g in graphs)
    assert {g.label for g in graphs} == {0, 1}


def test_band_orientation_grid_oracle():
    graphs = make_band_orientation_graphs(n_nodes=16, n_samples=200, separation=np.pi / 4, noise=0.05)
    acc = np.mean([relative_angle_oracle(g, 2, np.pi / 4) == g.label for g in graphs])
    assert acc >= 0.99


def test_band_orientation_errors():
    with pytest.raises(BadConfig):
        make_band_orientation_graphs(n_nodes=6)
    with pytest.raises(BadConfig):
        make_band_orientation_graphs(n_nodes=9, degree=3)


def test_graph_file_round_trip(tmp_path):
    graphs = make_band_orientation_graphs(n_nodes=10, n_samples=6)
    digest = write_graphs(tmp_path / "g.jsonl", graphs)
    back = read_graphs(tmp_path / "g.jsonl")
    assert len(digest) == 64
    for g, h in zip(graphs, back):
        assert np.array_equal(g.adjacency, h.adjacency)
        assert np.array_equal(g.signal, h.signal) and g.label == h.label


def test_cloud_file_round_trip_and_manifest(tmp_path):
    clouds = make_shape_dataset(n_points=10, per_class=2)
    digest = write_clouds(tmp_path / "c.jsonl", clouds)
    back = read_clouds(tmp_path / "c.jsonl")
    assert all(np.array_equal(p, q) and y == z for (p, y), (q, z) in zip(clouds, back))
    assert write_clouds(tmp_path / "d.jsonl", back) == digest
    write_manifest(tmp_path / "m.json", "shapes", {"n_points": 10}, 0, digest, {"jitter": 0.01})
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["sha256"] == digest and m["generator"] == "shapes" and m["notes"]["jitter"] == 0.01
