"""Restricted Boltzmann machine trained by contrastive divergence, and a small
quantum Boltzmann machine trained on the relative entropy.

Both models are tiny enough that every expectation value can also be computed
exactly (full enumeration of binary configurations, exact diagonalisation of
the Hamiltonian), which is what the tests and the training logs use.

Binary configurations are enumerated with the first unit as the most
significant bit: index 6 of three units is ``v = (1, 1, 0)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import RngStream, hermitian_eig, is_hermitian


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def all_binary(n):
    """All 2**n binary vectors of length n as rows (first unit = most significant bit)."""
    k = np.arange(2**n)[:, None]
    return (k >> np.arange(n - 1, -1, -1)) & 1


def binary_index(v):
    v = np.atleast_2d(v)
    n = v.shape[1]
    return (v * (1 << np.arange(n - 1, -1, -1))).sum(axis=1)


def _check_binary(x, what):
    x = np.asarray(x)
    if not np.all((x == 0) | (x == 1)):
        raise ValueError(f"{what} must be binary (0/1)")
    return x


# ------------------------------------------------------------------------ RBM

@dataclass
class RBMParams:
    a: np.ndarray  # visible biases (n_v,)
    b: np.ndarray  # hidden biases (n_h,)
    w: np.ndarray  # couplings (n_v, n_h)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if self.w.shape != (self.a.size, self.b.size):
            raise ValueError(f"coupling shape {self.w.shape} does not match ({self.a.size}, {self.b.size})")
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.w))):
            raise ValueError("RBM parameters must be finite")

    @property
    def n_v(self):
        return self.a.size

    @property
    def n_h(self):
        return self.b.size

    @classmethod
    def zeros(cls, n_v, n_h):
        return cls(np.zeros(n_v), np.zeros(n_h), np.zeros((n_v, n_h)))

    @classmethod
    def random(cls, n_v, n_h, rng: RngStream, scale=0.1):
        return cls(np.zeros(n_v), np.zeros(n_h), rng.normal(0.0, scale, (n_v, n_h)))

    def copy(self):
        return RBMParams(self.a.copy(), self.b.copy(), self.w.copy())

    def to_dict(self):
        return {"a": self.a.tolist(), "b": self.b.tolist(), "w": self.w.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["a"], float), np.array(d["b"], float), np.array(d["w"], float).reshape(len(d["a"]), len(d["b"])))


def rbm_energy(params: RBMParams, v, h):
    v = _check_binary(v, "v")
    h = _check_binary(h, "h")
    return -(v @ params.a) - (h @ params.b) - np.einsum("...i,ij,...j->...", v, params.w, h)


def cond_prob_h(params: RBMParams, v):
    """P(h_j = 1 | v) for every hidden unit; works on a single v or a batch of rows."""
    v = _check_binary(v, "v")
    return _sigmoid(params.b + v @ params.w)


def cond_prob_v(params: RBMParams, h):
    h = _check_binary(h, "h")
    return _sigmoid(params.a + h @ params.w.T)


def _bernoulli(p, rng: RngStream):
    return (rng.uniform(np.shape(p)) < p).astype(np.int64)


def gibbs_chain(params: RBMParams, v0, steps, rng: RngStream):
    """Alternate v -> h -> v' ... for ``steps`` full sweeps.

    Returns ``(vs, hs)`` with ``vs[0] = v0`` and ``hs[k]`` drawn from P(h | vs[k]);
    ``vs`` has steps+1 rows and ``hs`` has steps rows.
    """
    v = _check_binary(v0, "v0").astype(np.int64)
    vs = np.empty((steps + 1, params.n_v), np.int64)
    hs = np.empty((steps, params.n_h), np.int64)
    vs[0] = v
    for k in range(steps):
        h = _bernoulli(cond_prob_h(params, v), rng)
        v = _bernoulli(cond_prob_v(params, h), rng)
        hs[k] = h
        vs[k + 1] = v
    return vs, hs


def exact_joint(params: RBMParams):
    """Exact P(v, h) as a (2**n_v, 2**n_h) table."""
    if params.n_v + params.n_h > 20:
        raise ValueError("exact enumeration limited to n_v + n_h <= 20")
    V = all_binary(params.n_v)
    H = all_binary(params.n_h)
    logw = V @ params.a[:, None] + (H @ params.b)[None, :] + V @ params.w @ H.T
    logw -= logw.max()
    p = np.exp(logw)
    return p / p.sum()


def exact_distribution(params: RBMParams):
    """Exact visible marginal P(v) (summing the hidden units analytically)."""
    if params.n_v + params.n_h > 20:
        raise ValueError("exact enumeration limited to n_v + n_h <= 20")
    V = all_binary(params.n_v)
    logp = V @ params.a + np.logaddexp(0.0, params.b + V @ params.w).sum(axis=1)
    logp -= logp.max()
    p = np.exp(logp)
    return p / p.sum()


def rbm_cross_entropy(p0, params: RBMParams):
    """-sum_v P0(v) ln P(v) with the exact model marginal."""
    p0 = np.asarray(p0, float)
    if p0.shape != (2**params.n_v,) or np.any(p0 < 0) or abs(p0.sum() - 1) > 1e-9:
        raise ValueError("P0 must be a distribution over all visible configurations")
    p = exact_distribution(params)
    mask = p0 > 0
    return float(-(p0[mask] * np.log(p[mask])).sum())


def kl_divergence(p0, p):
    p0 = np.asarray(p0, float)
    mask = p0 > 0
    return float((p0[mask] * (np.log(p0[mask]) - np.log(p[mask]))).sum())


def cd1_statistics(params: RBMParams, batch, rng: RngStream):
    """CD-1 gradient estimate (da, db, dw) for one binary batch.

    Hidden statistics use P(h|v) on both the data and the reconstruction side;
    the reconstruction v' is a sampled binary vector.
    """
    v0 = _check_binary(batch, "batch").astype(float)
    if v0.ndim != 2 or v0.shape[0] == 0:
        raise ValueError("batch must be a non-empty 2-D array")
    ph0 = cond_prob_h(params, v0)
    h0 = _bernoulli(ph0, rng)
    v1 = _bernoulli(cond_prob_v(params, h0), rng).astype(float)
    ph1 = cond_prob_h(params, v1)
    n = v0.shape[0]
    dw = (v0.T @ ph0 - v1.T @ ph1) / n
    da = (v0 - v1).mean(axis=0)
    db = (ph0 - ph1).mean(axis=0)
    return da, db, dw


def cd1_update(params: RBMParams, batch, lr, rng: RngStream):
    da, db, dw = cd1_statistics(params, batch, rng)
    return RBMParams(params.a + lr * da, params.b + lr * db, params.w + lr * dw)


def exact_gradient(params: RBMParams, p0):
    """Exact ascent direction of sum P0 ln P: <.>_{P0 * P(h|v)} - <.>_{P}."""
    V = all_binary(params.n_v).astype(float)
    ph = cond_prob_h(params, V.astype(np.int64))
    pm = exact_distribution(params)
    p0 = np.asarray(p0, float)
    pos = (V * p0[:, None]).T @ ph, p0 @ V, p0 @ ph
    neg = (V * pm[:, None]).T @ ph, pm @ V, pm @ ph
    return pos[1] - neg[1], pos[2] - neg[2], pos[0] - neg[0]


def two_peak_target(n_v=3, peaks=((1, 1, 0), (0, 0, 1)), peak_mass=0.4):
    """Distribution with ``peak_mass`` on each peak and the rest spread evenly."""
    p = np.zeros(2**n_v)
    idx = binary_index(np.array(peaks))
    rest = 1.0 - peak_mass * len(peaks)
    if rest < 0:
        raise ValueError("peaks carry more than unit mass")
    p[:] = rest / (2**n_v - len(peaks))
    p[idx] = peak_mass
    return p


@dataclass
class RBMTrainConfig:
    n_hidden: int = 3
    steps: int = 3000
    batch_size: int = 64
    lr: float = 0.1
    init_scale: float = 0.1
    log_every: int = 50


def train_rbm(p0, cfg: RBMTrainConfig, seed):
    """CD-1 on fresh samples from the table P0 every step. Returns params and log rows."""
    p0 = np.asarray(p0, float)
    n_v = int(round(np.log2(p0.size)))
    states = all_binary(n_v)
    params = RBMParams.random(n_v, cfg.n_hidden, RngStream(seed, 0), cfg.init_scale)
    data_rng = RngStream(seed, 1)
    chain_rng = RngStream(seed, 2)
    log = []
    for step in range(1, cfg.steps + 1):
        idx = np.searchsorted(np.cumsum(p0), data_rng.uniform(cfg.batch_size) * p0.sum(), side="right")
        batch = states[np.minimum(idx, p0.size - 1)]
        params = cd1_update(params, batch, cfg.lr, chain_rng)
        if step % cfg.log_every == 0 or step == cfg.steps:
            p = exact_distribution(params)
            log.append({"step": step, "cross_entropy": rbm_cross_entropy(p0, params),
                        "kl": kl_divergence(p0, p)})
    return params, log


# ------------------------------------------------------------------------ QBM

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


def pauli_string(label):
    out = np.eye(1, dtype=complex)
    for ch in label:
        out = np.kron(out, PAULI[ch])
    return out


TWO_QUBIT_BASIS = ("ZI", "IZ", "XI", "IX", "ZZ", "XX")


@dataclass
class QBMModel:
    basis: list   # Hermitian matrices H_j sharing one dimension
    w: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        self.basis = [np.asarray(h, dtype=complex) for h in self.basis]
        self.w = np.asarray(self.w, dtype=float)
        if not self.basis:
            raise ValueError("empty Hamiltonian basis")
        dim = self.basis[0].shape[0]
        if dim > 16:
            raise ValueError("QBM dimension limited to 16")
        for h in self.basis:
            if h.shape != (dim, dim) or not is_hermitian(h):
                raise ValueError("basis operators must be Hermitian and share one dimension")
        if self.w.shape != (len(self.basis),):
            raise ValueError("one weight per basis operator required")

    @property
    def dim(self):
        return self.basis[0].shape[0]

    @classmethod
    def from_labels(cls, labels, w=None):
        w = np.zeros(len(labels)) if w is None else w
        return cls([pauli_string(s) for s in labels], w, tuple(labels))

    def hamiltonian(self):
        return sum(wj * hj for wj, hj in zip(self.w, self.basis))

    def to_dict(self):
        return {"labels": list(self.labels), "w": self.w.tolist()}


def thermal_state(h):
    lam, v = hermitian_eig(h)
    p = np.exp(-(lam - lam.min()))
    p /= p.sum()
    sigma = (v * p) @ v.conj().T
    return 0.5 * (sigma + sigma.conj().T)


def qbm_state(model: QBMModel):
    """sigma = exp(-sum_j w_j H_j) / tr[...]."""
    return thermal_state(model.hamiltonian())


def _density_eig(rho, what):
    if not is_hermitian(rho, 1e-10):
        raise ValueError(f"{what} is not Hermitian")
    lam, v = hermitian_eig(0.5 * (rho + rho.conj().T))
    if lam.min() < -1e-10 or abs(lam.sum() - 1) > 1e-10:
        raise ValueError(f"{what} is not a density matrix")
    return lam, v


def relative_entropy(rho, sigma):
    """S(rho || sigma) = tr rho ln rho - tr rho ln sigma, with 0 ln 0 = 0."""
    rho = np.asarray(rho, complex)
    sigma = np.asarray(sigma, complex)
    if rho.shape != sigma.shape:
        raise ValueError("dimension mismatch")
    p, _ = _density_eig(rho, "rho")
    q, u = _density_eig(sigma, "sigma")
    if q.min() < 1e-14:
        raise ValueError("sigma is (numerically) singular; thermal states are full rank")
    p = p[p > 1e-300]
    ln_sigma = (u * np.log(q)) @ u.conj().T
    return float(np.sum(p * np.log(p)) - np.trace(rho @ ln_sigma).real)


def qbm_gradient(model: QBMModel, rho):
    """dS/dw_j = tr[rho H_j] - tr[sigma H_j]."""
    rho = np.asarray(rho, complex)
    if rho.shape != (model.dim, model.dim):
        raise ValueError("target dimension does not match the model")
    sigma = qbm_state(model)
    return np.array([np.trace(rho @ h).real - np.trace(sigma @ h).real for h in model.basis])


@dataclass
class QBMTrainConfig:
    steps: int = 400
    lr: float = 0.5
    log_every: int = 10


def train_qbm(model: QBMModel, rho, cfg: QBMTrainConfig):
    """Plain gradient descent on S(rho || sigma_w). Returns the model and log rows."""
    model = QBMModel(model.basis, model.w.copy(), model.labels)
    log = []
    for step in range(1, cfg.steps + 1):
        g = qbm_gradient(model, rho)
        model.w = model.w - cfg.lr * g
        if step % cfg.log_every == 0 or step == cfg.steps:
            log.append({"step": step, "relative_entropy": relative_entropy(rho, qbm_state(model)),
                        "grad_norm": float(np.linalg.norm(g))})
    return model, log
