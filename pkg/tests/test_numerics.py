import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adacanon.numerics import (NotSquare, NotSymmetric, RankDeficient, Singular, eigh_symmetric, fix_signs,
                               jacobi_eigh, orthogonality_error, polar_orthogonal, qr)
from adacanon.spectral import normalized_laplacian

from conftest import random_symmetric


def test_eigh_identity():
    e = eigh_symmetric(np.eye(3))
    assert np.allclose(e.values, 1.0)
    assert orthogonality_error(e.vectors) < 1e-12


def test_eigh_diagonal_is_signed_permutation():
    e = eigh_symmetric(np.diag([2.0, 0.0, 1.0]))
    assert np.allclose(e.values, [0, 1, 2])
    assert np.allclose(np.abs(e.vectors), np.eye(3)[:, [1, 2, 0]])


@pytest.mark.parametrize("method", ["lapack", "jacobi"])
def test_eigh_reconstruction_100_seeds(method):
    for seed in range(100):
        m = random_symmetric(np.random.default_rng(seed), 6)
        e = eigh_symmetric(m, method=method)
        assert np.linalg.norm(e.reconstruct() - m) / np.linalg.norm(m) < 1e-9
        assert np.all(np.diff(e.values) >= 0)


def test_jacobi_agrees_with_lapack(gen):
    for n in (2, 5, 12):
        m = random_symmetric(gen, n)
        a = eigh_symmetric(m, "jacobi")
        b = eigh_symmetric(m, "lapack")
        assert np.allclose(a.values, b.values, atol=1e-10)
        # distinct eigenvalues: same vectors once signs are fixed
        assert np.allclose(a.vectors, b.vectors, atol=1e-8)


def test_jacobi_unsorted_output_is_an_eigensystem(gen):
    m = random_symmetric(gen, 7)
    vals, vecs = jacobi_eigh(m)
    assert np.allclose(m @ vecs, vecs * vals, atol=1e-10)


def test_sign_convention_largest_entry_positive(gen):
    v = fix_signs(np.linalg.qr(gen.standard_normal((5, 5)))[0])
    for col in v.T:
        assert col[np.argmax(np.abs(col))] > 0


def test_sign_convention_tie_goes_to_lowest_index():
    v = fix_signs(np.array([[-1.0], [1.0]]) / np.sqrt(2))
    assert v[0, 0] > 0


def test_cycle_spectrum():
    for n in (3, 6, 11):
        a = np.zeros((n, n))
        for i in range(n):
            a[i, (i + 1) % n] = a[(i + 1) % n, i] = 1
        vals = eigh_symmetric(normalized_laplacian(a)).values
        expect = np.sort(1 - np.cos(2 * np.pi * np.arange(n) / n))
        assert np.allclose(vals, expect, atol=1e-9)


def test_eigh_rejects_bad_input():
    with pytest.raises(NotSquare):
        eigh_symmetric(np.zeros((2, 3)))
    with pytest.raises(NotSymmetric):
        eigh_symmetric(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_qr_identity_and_permutation():
    q, r = qr(np.eye(3))
    assert np.allclose(np.abs(q), np.eye(3)) and np.allclose(q @ r, np.eye(3))
    m = np.array([[0.0, 1.0], [1.0, 0.0]])
    q, r = qr(m)
    assert np.allclose(q @ r, m, atol=1e-12)
    assert orthogonality_error(q) < 1e-12


def test_qr_rank_deficient():
    with pytest.raises(RankDeficient):
        qr(np.ones((3, 3)))


def test_polar_fixed_point_and_diagonal(gen):
    q = np.linalg.qr(gen.standard_normal((4, 4)))[0]
    assert np.allclose(polar_orthogonal(q), q, atol=1e-12)
    assert np.allclose(polar_orthogonal(np.diag([2.0, 3.0])), np.eye(2), atol=1e-12)


def test_polar_singular():
    with pytest.raises(Singular):
        polar_orthogonal(np.zeros((3, 3)))


def test_polar_is_nearest_orthogonal_point(gen):
    q = np.linalg.qr(gen.standard_normal((3, 3)))[0]
    m = q + 0.01 * gen.standard_normal((3, 3))
    p = polar_orthogonal(m)
    d = np.linalg.norm(m - p)
    others = np.linalg.qr(gen.standard_normal((1000, 3, 3)))[0]
    assert np.all(np.linalg.norm(m - others, axis=(1, 2)) >= d)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 16), seed=st.integers(0, 2**32 - 1))
def test_orthogonality_of_qr_and_polar(n, seed):
    m = np.random.default_rng(seed).standard_normal((n, n))
    assert orthogonality_error(qr(m)[0]) < 1e-10
    assert orthogonality_error(polar_orthogonal(m)) < 1e-10
