import numpy as np
import pytest
from hypothesis import given, strategies as st

from qflrl.numkit import (RngStream, hermitian_eig, hermitian_function, is_hermitian, matmul,
                          categorical_from_uniform, sample, check_finite,
                          NotHermitianError)


def random_hermitian(seed, n, complex_=True):
    g = np.random.default_rng(seed)
    a = g.normal(size=(n, n)) + (1j * g.normal(size=(n, n)) if complex_ else 0)
    return a + a.conj().T


@given(st.integers(0, 10_000), st.integers(1, 12), st.booleans())
def test_jacobi_matches_lapack(seed, n, cplx):
    h = random_hermitian(seed, n, cplx)
    lam, v = hermitian_eig(h)
    ref = np.sort(np.linalg.eigvalsh(h))[::-1]
    assert np.allclose(lam, ref, atol=1e-9 * max(1, np.abs(ref).max()))
    assert np.all(np.diff(lam) <= 1e-12)
    assert np.allclose(v.conj().T @ v, np.eye(n), atol=1e-9)
    assert np.allclose((v * lam) @ v.conj().T, h, atol=1e-8 * max(1, np.abs(h).max()))


def test_jacobi_degenerate_spectrum():
    q, _ = np.linalg.qr(np.random.default_rng(3).normal(size=(5, 5)))
    h = q @ np.diag([2.0, 2.0, 2.0, -1.0, 0.0]) @ q.T
    lam, v = hermitian_eig(h)
    assert np.allclose(lam, [2, 2, 2, 0, -1], atol=1e-10)
    assert np.allclose((v * lam) @ v.conj().T, h, atol=1e-10)


def test_eig_rejects_non_hermitian():
    with pytest.raises(NotHermitianError):
        hermitian_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        hermitian_eig(np.zeros((2, 3)))


def test_hermitian_function_exp_of_pauli():
    x = np.array([[0, 1], [1, 0]], complex)
    e = hermitian_function(x, np.exp)
    assert np.allclose(e, np.cosh(1) * np.eye(2) + np.sinh(1) * x, atol=1e-12)


def test_matmul_shape_errors():
    assert matmul(np.ones((2, 3)), np.ones((3, 1))).shape == (2, 1)
    with pytest.raises(ValueError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        matmul(np.ones(3), np.ones((3, 1)))


def test_is_hermitian_and_finite():
    assert is_hermitian(random_hermitian(0, 4))
    assert not is_hermitian(np.array([[0, 1j], [1j, 0]]))
    with pytest.raises(FloatingPointError):
        check_finite(np.array([1.0, np.nan]))


@given(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
def test_stream_reproducible(seed, sid):
    a = RngStream(seed, sid).normal(size=5)
    b = RngStream(seed, sid).normal(size=5)
    assert np.array_equal(a, b)


@given(st.integers(0, 2**32), st.integers(0, 2**40), st.integers(0, 2**40))
def test_rekey_equals_fresh_stream(seed, s1, s2):
    r = RngStream(seed, s1)
    r.uniform(7)
    r.rekey(s2)
    assert np.array_equal(r.normal(size=9), RngStream(seed, s2).normal(size=9))
    assert r.stream_id == s2


def test_streams_differ():
    assert not np.array_equal(RngStream(1, 0).uniform(4), RngStream(1, 1).uniform(4))
    assert not np.array_equal(RngStream(1, 0).uniform(4), RngStream(2, 0).uniform(4))
    with pytest.raises(ValueError):
        RngStream(-1)
    with pytest.raises(ValueError):
        RngStream(0, 2**64)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.floats(0, 0.999999))
def test_categorical_never_picks_zero_probability(p, u):
    p = np.array(p)
    if p.sum() == 0:
        p[0] = 1.0
    k = categorical_from_uniform(p, u)[0]
    assert 0 <= k < p.size
    assert p[k] > 0


def test_categorical_frequencies():
    p = np.array([0.2, 0.0, 0.5, 0.3])
    u = RngStream(5).uniform(200_000)
    k = categorical_from_uniform(np.tile(p, (u.size, 1)), u)
    freq = np.bincount(k, minlength=4) / u.size
    assert np.allclose(freq, p, atol=4e-3)


def test_sample_validates_parameters():
    r = RngStream(0)
    assert sample(r, "uniform01", size=3).shape == (3,)
    with pytest.raises(ValueError):
        sample(r, "gaussian", 0.0, -1.0)
    with pytest.raises(ValueError):
        sample(r, "bernoulli", 1.5)
    with pytest.raises(ValueError):
        sample(r, "nope")
