import numpy as np
import pytest

from adacanon.groups import NonFiniteGradient, RngStream
from adacanon.nn import (EmptyInput, MlpParams, OptimizerState, ShapeMismatch, bce_with_logits, init_mlp,
                         load_params, mlp_apply, mlp_backward, mlp_forward, optimizer_step, pool, pool_backward,
                         save_params)

from gradcheck import jitter_biases, probe_params


def _reference_forward(p, x):
    # independent re-implementation, one sample at a time
    out = []
    for row in np.atleast_2d(x):
        h = row
        for w, b, act in zip(p.weights, p.biases, p.activations):
            z = np.array([sum(w[i, k] * h[k] for k in range(len(h))) + b[i] for i in range(w.shape[0])])
            h = {"relu": np.maximum(z, 0), "tanh": np.tanh(z), "identity": z}[act]
        out.append(h)
    return np.array(out)


def test_zero_and_identity_nets():
    p = MlpParams([np.zeros((2, 3))], [np.zeros(2)], ["identity"])
    assert np.array_equal(mlp_apply(p, np.ones(3)), np.zeros(2))
    ident = MlpParams([np.eye(3)], [np.zeros(3)], ["identity"])
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(mlp_apply(ident, x), x)


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_forward_matches_reference(act, gen):
    p = init_mlp([4, 6, 3], RngStream(1), hidden_activation=act)
    x = gen.standard_normal((5, 4))
    assert np.allclose(mlp_apply(p, x), _reference_forward(p, x), atol=1e-12)


def test_shape_checks():
    with pytest.raises(ShapeMismatch):
        MlpParams([np.zeros((2, 3)), np.zeros((2, 3))], [np.zeros(2), np.zeros(2)], ["relu", "identity"])
    p = init_mlp([3, 2], RngStream(0))
    with pytest.raises(ShapeMismatch):
        mlp_apply(p, np.zeros(4))


def test_init_ranges():
    p = init_mlp([50, 40, 1], RngStream(2))
    assert np.max(np.abs(p.weights[0])) <= np.sqrt(6 / 50)
    assert np.max(np.abs(p.weights[1])) <= np.sqrt(6 / 41)
    t = init_mlp([50, 40, 1], RngStream(2), hidden_activation="tanh")
    assert np.max(np.abs(t.weights[0])) <= np.sqrt(6 / 90)


def test_backward_zero_upstream_and_closed_form(gen):
    p = init_mlp([3, 5, 2], RngStream(3))
    x = gen.standard_normal((4, 3))
    out, tape = mlp_forward(p, x)
    g, dx = mlp_backward(p, tape, np.zeros_like(out))
    assert all(np.all(a == 0) for a in g.arrays()) and np.all(dx == 0)
    lin = MlpParams([gen.standard_normal((2, 3))], [np.zeros(2)], ["identity"])
    xv = gen.standard_normal(3)
    out, tape = mlp_forward(lin, xv)
    g, _ = mlp_backward(lin, tape, np.array([1.0, 0.0]))
    assert np.allclose(g.weights[0][0], xv) and np.allclose(g.weights[0][1], 0)


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_mlp_bce_gradcheck(act, gen):
    p = init_mlp([5, 8, 8, 3], RngStream(4), hidden_activation=act)
    jitter_biases([p], gen)
    x = gen.standard_normal((7, 5))
    y = (gen.random((7, 3)) < 0.5).astype(float)

    def loss():
        return bce_with_logits(mlp_apply(p, x), y)[0]

    out, tape = mlp_forward(p, x)
    _, ds = bce_with_logits(out, y)
    g, _ = mlp_backward(p, tape, ds)
    errs = probe_params(loss, p.arrays(), g.arrays(), gen, probes=200)
    assert errs.max() < 1e-5


def test_input_gradient(gen):
    p = init_mlp([4, 6, 1], RngStream(5), hidden_activation="tanh")
    x = gen.standard_normal(4)
    out, tape = mlp_forward(p, x)
    _, dx = mlp_backward(p, tape, np.ones_like(out), params=False)
    h = 1e-6
    fd = [(mlp_apply(p, x + h * e)[0] - mlp_apply(p, x - h * e)[0]) / (2 * h) for e in np.eye(4)]
    assert np.allclose(dx, fd, rtol=1e-6, atol=1e-9)


def test_bce_cases(gen):
    loss, _ = bce_with_logits(np.zeros(4), np.array([0, 1, 1, 0.0]))
    assert np.isclose(loss, 4 * np.log(2))
    loss, grad = bce_with_logits(np.array([100.0]), np.array([1.0]))
    assert loss < 1e-40 and abs(grad[0]) < 1e-40
    s, y = gen.normal(0, 3, 50), (gen.random(50) < 0.5).astype(float)
    sig = 1 / (1 + np.exp(-s))
    naive = -(y * np.log(sig) + (1 - y) * np.log(1 - sig))
    assert np.isclose(bce_with_logits(s, y)[0], naive.sum(), atol=1e-9)
    assert np.allclose(bce_with_logits(s, y)[1], sig - y, atol=1e-12)
    w = gen.random(50)
    assert np.isclose(bce_with_logits(s, y, w)[0], np.sum(w * naive), atol=1e-9)


def test_pool_cases(gen):
    r = gen.standard_normal((1, 4))
    for mode in ("max", "sum", "mean"):
        assert np.allclose(pool(r, mode)[0], r[0])
    assert np.allclose(pool(np.vstack([r, -r]), "sum")[0], 0)
    rows = gen.standard_normal((10, 4))
    vals, win = pool(rows, "max")
    assert np.array_equal(vals, [max(rows[:, j]) for j in range(4)])
    back = pool_backward(np.ones(4), 10, "max", win)
    assert np.array_equal((back != 0).sum(axis=0), np.ones(4))
    with pytest.raises(EmptyInput):
        pool(np.zeros((0, 3)))


def test_pool_ties_lowest_row_and_permutation_invariance(gen):
    _, win = pool(np.array([[1.0, 2.0], [1.0, 2.0]]), "max")
    assert win.tolist() == [0, 0]
    rows = gen.standard_normal((6, 3))
    perm = gen.permutation(6)
    for mode in ("max", "sum", "mean"):
        a, b = pool(rows, mode)[0], pool(rows[perm], mode)[0]
        assert np.allclose(a, b, atol=1e-15) if mode != "max" else np.array_equal(a, b)


def test_optimizer_cases():
    w = np.ones(3)
    st = OptimizerState(lr=0.1)
    optimizer_step(st, [w], [np.zeros(3)])
    assert np.array_equal(w, np.ones(3))
    g = np.array([1.0, -2.0, 0.5])
    for _ in range(10):
        optimizer_step(st, [w], [g])
    assert np.all(np.sign(w - 1) == -np.sign(g))
    with pytest.raises(NonFiniteGradient):
        optimizer_step(st, [w], [np.array([np.nan, 0, 0])])


def test_optimizer_quadratic_bowl(gen):
    target = gen.standard_normal(5)
    w = np.zeros(5)
    st = OptimizerState(lr=0.01)
    for _ in range(500):
        optimizer_step(st, [w], [2 * (w - target)])
    assert np.linalg.norm(w - target) < 1e-3


def test_checkpoint_roundtrip(tmp_path):
    nets = {"phi": init_mlp([3, 4, 4], RngStream(1)), "head0": init_mlp([4, 1], RngStream(2)),
            "head1": init_mlp([4, 2, 1], RngStream(3), hidden_activation="tanh")}
    save_params(tmp_path / "p.bin", nets, seed=9, extra={"note": "x"})
    back, header = load_params(tmp_path / "p.bin")
    assert header["seed"] == 9 and header["extra"] == {"note": "x"}
    for name, p in nets.items():
        assert back[name].activations == p.activations
        for a, b in zip(p.arrays(), back[name].arrays()):
            assert np.array_equal(a, b)
