"""Small numpy MLPs with hand-written backprop, pooling, BCE and Adam.

Weights use the (out, in) convention, so a layer computes
``x @ W.T + b`` on a batch of row vectors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .groups import NonFiniteGradient, _gen

ACTIVATIONS = ("relu", "tanh", "identity")
CHECKPOINT_MAGIC = b"ACNNPAR1"


class ShapeMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass
class MlpParams:
    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeMismatch("weights, biases and activations differ in length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ShapeMismatch(f"layer {i}: bias {b.shape} vs weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeMismatch(f"layer {i} input {w.shape[1]} != previous output")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases], list(self.activations))

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], list(self.activations))


Gradients = MlpParams


def init_mlp(sizes, rng, hidden_activation: str = "relu") -> MlpParams:
    """He-uniform for relu layers, Xavier-uniform otherwise. Last layer is linear."""
    gen = _gen(rng)
    weights, biases, acts = [], [], []
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        act = "identity" if i == n_layers - 1 else hidden_activation
        if act == "relu":
            bound = np.sqrt(6.0 / max(fan_in, 1))
        else:
            bound = np.sqrt(6.0 / max(fan_in + fan_out, 1))
        weights.append(gen.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
        acts.append(act)
    return MlpParams(weights, biases, acts)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def mlp_forward(p: MlpParams, x):
    """Returns (output, tape). ``x`` is one vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != p.in_dim:
        raise ShapeMismatch(f"input width {h.shape[-1]} != {p.in_dim}")
    inputs, pre, post = [], [], []
    for w, b, act in zip(p.weights, p.biases, p.activations):
        inputs.append(h)
        z = h @ w.T + b
        h = _act(act, z)
        pre.append(z)
        post.append(h)
    out = h[0] if single else h
    return out, {"inputs": inputs, "pre": pre, "post": post, "single": single}


def mlp_backward(p: MlpParams, tape, upstream, params: bool = True):
    """Gradient of <upstream, output> w.r.t. params and input.

    For batched input, parameter gradients are summed over rows.
    Returns (Gradients, d_input); Gradients is None when ``params`` is off.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if tape["single"]:
        g = g[None, :]
    if g.shape != tape["post"][-1].shape:
        raise ShapeMismatch(f"upstream {g.shape} != output {tape['post'][-1].shape}")
    grads = p.zeros_like() if params else None
    for i in reversed(range(len(p.weights))):
        dz = g * _act_grad(p.activations[i], tape["pre"][i], tape["post"][i])
        if params:
            grads.weights[i] = dz.T @ tape["inputs"][i]
            grads.biases[i] = dz.sum(axis=0)
        g = dz @ p.weights[i]
    return grads, (g[0] if tape["single"] else g)


def mlp_apply(p: MlpParams, x) -> np.ndarray:
    return mlp_forward(p, x)[0]


def bce_with_logits(s, y, weights=None):
    """Summed weighted binary cross-entropy on logits, stable form.

    Returns (loss, d loss / d s).
    """
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if s.shape != y.shape:
        raise ShapeMismatch(f"logits {s.shape} vs targets {y.shape}")
    w = np.ones_like(s) if weights is None else np.broadcast_to(np.asarray(weights, float), s.shape)
    # -y log sig(s) - (1-y) log sig(-s), kept split so saturated logits
    # do not cancel (softplus(s) - s loses the tail for large s)
    per = y * np.logaddexp(0.0, -s) + (1 - y) * np.logaddexp(0.0, s)
    sig_pos = np.exp(-np.logaddexp(0.0, -s))
    sig_neg = np.exp(-np.logaddexp(0.0, s))
    return float(np.sum(w * per)), w * ((1 - y) * sig_pos - y * sig_neg)


def pool(rows, mode: str = "max"):
    """Column-wise reduction over the second-to-last axis.

    Returns (pooled, winners); ``winners`` holds max-pool row indices
    (lowest index on ties) and is None for sum/mean.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim < 2 or rows.shape[-2] == 0:
        raise EmptyInput("pool needs at least one row")
    if mode == "max":
        idx = np.argmax(rows, axis=-2)
        return np.take_along_axis(rows, idx[..., None, :], axis=-2)[..., 0, :], idx
    if mode == "sum":
        return rows.sum(axis=-2), None
    if mode == "mean":
        return rows.mean(axis=-2), None
    raise ValueError(f"unknown pool mode {mode!r}")


def pool_backward(upstream, n_rows: int, mode: str, winners=None):
    upstream = np.asarray(upstream, dtype=np.float64)
    shape = upstream.shape[:-1] + (n_rows, upstream.shape[-1])
    if mode == "sum":
        return np.broadcast_to(upstream[..., None, :], shape).copy()
    if mode == "mean":
        return np.broadcast_to(upstream[..., None, :] / n_rows, shape).copy()
    if mode == "max":
        out = np.zeros(shape)
        np.put_along_axis(out, winners[..., None, :], upstream[..., None, :], axis=-2)
        return out
    raise ValueError(f"unknown pool mode {mode!r}")


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(state: OptimizerState, params: list, grads: list) -> None:
    """One Adam step, in place on ``params`` (a list of arrays)."""
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient passed to the optimizer")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param {p.shape} vs grad {g.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def save_params(path, nets: dict, seed: int | None = None, extra: dict | None = None) -> None:
    """Write named MLPs as a JSON header followed by little-endian float64s.

    Layout: 8-byte magic, uint64 LE header length, UTF-8 JSON header, data.
    """
    header = {"format": "adacanon-params", "byteorder": "little", "dtype": "float64",
              "seed": seed, "extra": extra or {}, "nets": {}}
    chunks = []
    # data follows the sorted names, the same order the header is read back in
    for name in sorted(nets):
        p = nets[name]
        header["nets"][name] = {
            "weight_shapes": [list(w.shape) for w in p.weights],
            "activations": list(p.activations),
        }
        for arr in p.arrays():
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_params(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not an adacanon parameter file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    data = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    pos = 0
    nets = {}
    for name in sorted(header["nets"]):
        spec = header["nets"][name]
        ws, bs = [], []
        for shape in spec["weight_shapes"]:
            n = shape[0] * shape[1]
            ws.append(data[pos:pos + n].reshape(shape).astype(np.float64))
            pos += n
            bs.append(data[pos:pos + shape[0]].astype(np.float64))
            pos += shape[0]
        nets[name] = MlpParams(ws, bs, list(spec["activations"]))
    if pos != data.size:
        raise ValueError("parameter file length does not match its header")
    return nets, header
