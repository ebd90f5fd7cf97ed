"""Synthetic datasets: the torus grid orientation task, 3D shapes, and
random regular graphs whose label lives in an in-band orientation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import networkx as nx
import numpy as np

from .groups import RngStream
from .numerics import eigh_symmetric
from .spectral import Graph, normalized_laplacian


class BadConfig(ValueError):
    pass


@dataclass(frozen=True)
class GridTaskConfig:
    side: int = 40
    period: int = 20
    noise: float = 0.1
    samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.side < 2 or self.side % 2:
            raise BadConfig("grid side must be even")
        if self.period < 1 or self.side % self.period:
            raise BadConfig("period must divide the grid side")
        if self.samples < 2 or self.noise < 0:
            raise BadConfig("need at least two samples and non-negative noise")


def torus_adjacency(side: int) -> np.ndarray:
    """4-neighbour torus, unit weights; node index = y * side + x."""
    n = side * side
    a = np.zeros((n, n))
    xs, ys = np.meshgrid(np.arange(side), np.arange(side))
    here = (ys * side + xs).ravel()
    right = (ys * side + (xs + 1) % side).ravel()
    up = (((ys + 1) % side) * side + xs).ravel()
    for nb in (right, up):
        a[here, nb] = 1.0
        a[nb, here] = 1.0
    return a


def grid_coordinates(side: int):
    xs, ys = np.meshgrid(np.arange(side), np.arange(side))
    return xs.ravel(), ys.ravel()


def grid_templates(side: int, period: int):
    """Noise-free (class-0 signal, class-1 signal, support mask) on the torus."""
    x, y = grid_coordinates(side)
    left = x < side // 2
    wave_x = np.sin(2 * np.pi * x / period)
    wave_y = np.sin(2 * np.pi * y / period)
    ch1 = np.where(left, wave_x, 0.0)
    sig0 = np.stack([ch1, np.where(~left, wave_x, 0.0)], axis=1)
    sig1 = np.stack([ch1, np.where(~left, wave_y, 0.0)], axis=1)
    support = np.stack([left, ~left], axis=1)
    return sig0, sig1, support


def make_grid_task(cfg: GridTaskConfig) -> list:
    """Two-channel sinusoids on a split torus; label = channel-2 orientation."""
    gen = RngStream(cfg.seed, 0).child("grid").generator()
    adj = torus_adjacency(cfg.side)
    sig0, sig1, support = grid_templates(cfg.side, cfg.period)
    labels = np.arange(cfg.samples) % 2
    gen.shuffle(labels)
    graphs = []
    for lab in labels:
        base = sig1 if lab else sig0
        noise = cfg.noise * gen.standard_normal(base.shape) * support
        graphs.append(Graph(adj, base + noise, int(lab)))
    return graphs


SHAPE_CLASSES = ("ellipsoid", "planar-cross", "helix")


def _unit_directions(gen, n):
    v = gen.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def shape_points(kind: str, n_points: int, gen, axes=(1.0, 0.5, 0.25)) -> np.ndarray:
    if kind == "ellipsoid":
        return _unit_directions(gen, n_points) * np.asarray(axes)
    if kind == "planar-cross":
        # a wide sheet in the xy plane crossed by a narrower one in xz
        half = n_points // 2
        a = np.column_stack([gen.uniform(-1, 1, half), gen.uniform(-0.6, 0.6, half), np.zeros(half)])
        b = np.column_stack([gen.uniform(-0.5, 0.5, n_points - half), np.zeros(n_points - half),
                             gen.uniform(-0.8, 0.8, n_points - half)])
        return np.vstack([a, b])
    if kind == "helix":
        t = np.sort(gen.uniform(0, 4 * np.pi, n_points))
        return np.column_stack([0.5 * np.cos(t), 0.5 * np.sin(t), (t - 2 * np.pi) / (2 * np.pi) * 0.6])
    raise BadConfig(f"unknown shape {kind!r}")


def make_shape_dataset(classes=SHAPE_CLASSES, n_points: int = 64, per_class: int = 100, seed: int = 0,
                       jitter: float = 0.01, center: bool = True) -> list:
    """Canonical-pose point clouds as (points, label) pairs, class-balanced."""
    if n_points < 8:
        raise BadConfig("need at least 8 points per cloud")
    if per_class < 1:
        raise BadConfig("need at least one sample per class")
    out = []
    for label, kind in enumerate(classes):
        gen = RngStream(seed, 0).child("shape", kind).generator()
        for _ in range(per_class):
            pts = shape_points(kind, n_points, gen)
            if jitter:
                pts = pts + jitter * gen.standard_normal(pts.shape)
            if center:
                pts = pts - pts.mean(axis=0)
            out.append((pts, label))
    order = RngStream(seed, 0).child("shape-order").generator().permutation(len(out))
    return [out[i] for i in order]


def make_band_orientation_graphs(n_nodes: int = 16, n_samples: int = 200, n_classes: int = 2,
                                 separation: float = np.pi / 2, noise: float = 0.05, degree: int = 3,
                                 seed: int = 0) -> list:
    """Random regular graphs; both channels live in span(v_1, v_2).

    Channel 1 sits at a random angle phi in that plane and channel 2 at
    phi + label * separation, where v_1, v_2 are the eigenvectors of the
    two smallest non-zero normalized-Laplacian eigenvalues. Only the
    relative in-plane angle carries the label.
    """
    if n_nodes < 8 or n_classes < 2 or n_samples < n_classes:
        raise BadConfig("need n_nodes >= 8, >= 2 classes and a sample per class")
    if (n_nodes * degree) % 2:
        raise BadConfig("n_nodes * degree must be even")
    gen = RngStream(seed, 0).child("band-orientation").generator()
    labels = np.arange(n_samples) % n_classes
    gen.shuffle(labels)
    graphs = []
    for lab in labels:
        nx_seed = int(gen.integers(2**31))
        while True:
            g = nx.random_regular_graph(degree, n_nodes, seed=nx_seed)
            if nx.is_connected(g):
                break
            nx_seed += 1
        adj = nx.to_numpy_array(g, nodelist=range(n_nodes))
        vecs = eigh_symmetric(normalized_laplacian(adj)).vectors
        v1, v2 = vecs[:, 1], vecs[:, 2]
        phi = gen.uniform(0, 2 * np.pi)
        theta = phi + lab * separation
        ch1 = np.cos(phi) * v1 + np.sin(phi) * v2
        ch2 = np.cos(theta) * v1 + np.sin(theta) * v2
        sig = np.stack([ch1, ch2], axis=1) + noise * gen.standard_normal((n_nodes, 2))
        graphs.append(Graph(adj, sig, int(lab)))
    return graphs


def relative_angle_oracle(g: Graph, n_classes: int, separation: float, grid_step_deg: float = 1.0) -> int:
    """Label by exhaustive search over planar orientations of span(v_1, v_2).

    For each grid rotation, channel 1 is rotated and the one that points
    closest to +e_1 wins; channel 2's angle under that rotation, folded
    into [0, pi], is rounded to the nearest class angle.
    """
    vecs = eigh_symmetric(normalized_laplacian(g.adjacency)).vectors
    basis = vecs[:, 1:3]
    c1, c2 = basis.T @ g.signal[:, 0], basis.T @ g.signal[:, 1]
    angles = np.deg2rad(np.arange(0.0, 360.0, grid_step_deg))
    cos, sin = np.cos(angles), np.sin(angles)
    rot_c1_x = cos * c1[0] - sin * c1[1]
    best = int(np.argmax(rot_c1_x))
    a = angles[best]
    r2 = np.array([np.cos(a) * c2[0] - np.sin(a) * c2[1], np.sin(a) * c2[0] + np.cos(a) * c2[1]])
    rel = abs(np.arctan2(r2[1], r2[0]))
    class_angles = np.array([min(c * separation % (2 * np.pi), 2 * np.pi - c * separation % (2 * np.pi))
                             for c in range(n_classes)])
    return int(np.argmin(np.abs(class_angles - rel)))


# ---------------------------------------------------------------- file formats

def graph_to_record(g: Graph) -> dict:
    iu, ju = np.nonzero(np.triu(g.adjacency))
    return {"n": g.n,
            "edges": [[int(i), int(j), float(g.adjacency[i, j])] for i, j in zip(iu, ju)],
            "signal": g.signal.tolist(),
            "label": None if g.label is None else int(g.label)}


def graph_from_record(rec: dict) -> Graph:
    n = int(rec["n"])
    adj = np.zeros((n, n))
    for i, j, w in rec["edges"]:
        adj[i, j] = adj[j, i] = float(w)
    return Graph(adj, np.asarray(rec["signal"], dtype=np.float64).reshape(n, -1), rec.get("label"))


def write_jsonl(path, records) -> str:
    """Write one JSON object per line; returns the sha256 of the file."""
    h = hashlib.sha256()
    with open(path, "w") as fh:
        for rec in records:
            line = json.dumps(rec) + "\n"
            fh.write(line)
            h.update(line.encode())
    return h.hexdigest()


def read_jsonl(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_graphs(path, graphs) -> str:
    return write_jsonl(path, (graph_to_record(g) for g in graphs))


def read_graphs(path) -> list:
    return [graph_from_record(r) for r in read_jsonl(path)]


def write_clouds(path, clouds) -> str:
    return write_jsonl(path, ({"points": np.asarray(p).tolist(), "label": int(y)} for p, y in clouds))


def read_clouds(path) -> list:
    return [(np.asarray(r["points"], dtype=np.float64), r["label"]) for r in read_jsonl(path)]


def write_manifest(path, generator: str, config: dict, seed: int, checksum: str, notes: dict | None = None):
    manifest = {"generator": generator, "config": config, "seed": seed, "sha256": checksum,
                "notes": notes or {}}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


GRID_NOTES = {
    "connectivity": "4-neighbour torus, unit edge weights",
    "sinusoid_argument": "node index x, y in 0..side-1",
    "halves": "left = columns [0, side/2), right = [side/2, side)",
}


def grid_config_dict(cfg: GridTaskConfig) -> dict:
    return asdict(cfg)
