"""Numerical substrate: checked matrix products, a Jacobi Hermitian eigensolver
and seeded counter-based random streams.

Dense arrays are plain ``numpy.ndarray`` (float64 / complex128).
"""
from __future__ import annotations

import math

import numpy as np


class NotHermitianError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


def check_finite(x, what="array"):
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains non-finite entries")
    return x


def matmul(a, b):
    """Matrix product of two 2-D arrays with shape checking."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def is_hermitian(m, atol=1e-12):
    m = np.asarray(m)
    return m.ndim == 2 and m.shape[0] == m.shape[1] and np.max(np.abs(m - m.conj().T), initial=0.0) < atol


def hermitian_eig(m, tol=1e-9, max_sweeps=60):
    """Eigen-decomposition of a Hermitian matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, vectors)`` with eigenvalues sorted descending and
    the eigenvectors stored as the columns of ``vectors``.
    """
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"square matrix required, got shape {m.shape}")
    n = m.shape[0]
    if n > 64:
        raise ValueError("hermitian_eig supports dimension <= 64")
    if not is_hermitian(m):
        raise NotHermitianError("matrix is not Hermitian within 1e-12")

    a = np.array(m, dtype=np.complex128)
    a = 0.5 * (a + a.conj().T)
    v = np.eye(n, dtype=np.complex128)
    scale = max(np.linalg.norm(a), 1e-300)

    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= 1e-15 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                mag = abs(apq)
                if mag <= 1e-300:
                    continue
                u = apq / mag
                app = a[p, p].real
                aqq = a[q, q].real
                theta = 0.5 * math.atan2(2.0 * mag, app - aqq)
                c = math.cos(theta)
                s = math.sin(theta)
                # J = diag(1, conj(u)) @ [[c, -s], [s, c]]
                jpp, jpq, jqp, jqq = c, -s, np.conj(u) * s, np.conj(u) * c
                colp = a[:, p].copy()
                colq = a[:, q]
                a[:, p] = colp * jpp + colq * jqp
                a[:, q] = colp * jpq + colq * jqq
                rowp = a[p, :].copy()
                rowq = a[q, :]
                a[p, :] = np.conj(jpp) * rowp + np.conj(jqp) * rowq
                a[q, :] = np.conj(jpq) * rowp + np.conj(jqq) * rowq
                a[p, q] = 0.0
                a[q, p] = 0.0
                a[p, p] = a[p, p].real
                a[q, q] = a[q, q].real
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = vp * jpp + vq * jqp
                v[:, q] = vp * jpq + vq * jqq
    else:
        raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")

    lam = np.diag(a).real.copy()
    order = np.argsort(-lam, kind="stable")
    lam = lam[order]
    v = v[:, order]

    resid = np.max(np.abs(m @ v - v * lam), initial=0.0)
    if resid > tol * max(1.0, scale):
        raise ConvergenceError(f"eigen residual {resid:.3e} exceeds tolerance {tol:.1e}")
    return lam, v


def hermitian_function(m, func):
    """Apply a scalar function to a Hermitian matrix through its eigenbasis."""
    lam, v = hermitian_eig(m)
    return (v * func(lam)) @ v.conj().T


class RngStream:
    """A reproducible random stream keyed by ``(seed, stream_id)``.

    Backed by the Philox counter-based bit generator, so independent streams
    for e.g. every trajectory of a batch are derived without coordination.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not (0 <= seed < 2**64 and 0 <= stream_id < 2**64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.gen = np.random.Generator(np.random.Philox(key=(self.stream_id << 64) | self.seed))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def rekey(self, stream_id: int) -> "RngStream":
        """Reset in place to the start of stream ``stream_id`` (same seed).

        Equivalent to ``RngStream(self.seed, stream_id)`` but avoids rebuilding
        the bit generator, which dominates the cost of very short rollouts.
        """
        if not 0 <= stream_id < 2**64:
            raise ValueError("stream_id must be an unsigned 64-bit integer")
        self.stream_id = int(stream_id)
        bg = self.gen.bit_generator
        st = bg.state
        st["state"]["counter"][:] = 0
        st["state"]["key"][:] = [self.seed, self.stream_id]
        st["buffer"][:] = 0
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        bg.state = st
        return self

    def child(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id)

    # thin helpers; validation lives in ``sample``
    def uniform(self, size=None):
        return self.gen.random(size)

    def normal(self, mu=0.0, sigma=1.0, size=None):
        return self.gen.normal(mu, sigma, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)


def categorical_from_uniform(probs, u):
    """Inverse-CDF categorical draw; rows of ``probs`` paired with uniforms ``u``.

    Zero-probability entries are never selected.
    """
    probs = np.atleast_2d(probs)
    u = np.atleast_1d(u)
    cdf = np.cumsum(probs, axis=1)
    cdf = cdf / cdf[:, -1:]
    idx = (u[:, None] >= cdf).sum(axis=1)
    # guard the top end against rounding: fall back to the last nonzero entry
    last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last)


def sample(stream: RngStream, dist: str, *params, size=None):
    """Draw from a named distribution.

    ``dist`` is one of ``uniform01``, ``gaussian(mu, sigma)``, ``bernoulli(p)``,
    ``binomial(n, p)`` or ``categorical(probs)``.
    """
    if dist == "uniform01":
        return stream.uniform(size)
    if dist == "gaussian":
        mu, sigma = params
        if not sigma > 0:
            raise ValueError("gaussian requires sigma > 0")
        return stream.normal(mu, sigma, size)
    if dist == "bernoulli":
        (p,) = params
        if not 0.0 <= p <= 1.0:
            raise ValueError("bernoulli requires 0 <= p <= 1")
        return (stream.uniform(size) < p).astype(np.int64)
    if dist == "binomial":
        n, p = params
        if n < 0 or not 0.0 <= p <= 1.0:
            raise ValueError("binomial requires n >= 0 and 0 <= p <= 1")
        return stream.gen.binomial(n, p, size)
    if dist == "categorical":
        (probs,) = params
        probs = np.asarray(probs, dtype=float)
        if probs.ndim != 1 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("categorical requires a probability vector summing to 1")
        if size is None:
            return int(categorical_from_uniform(probs, stream.uniform(1))[0])
        n = int(np.prod(size))
        u = stream.uniform(n)
        out = categorical_from_uniform(np.broadcast_to(probs, (n, probs.size)), u)
        return out.reshape(size)
    raise ValueError(f"unknown distribution {dist!r}")
