"""Linear autoencoders versus principal component analysis, the latent
decorrelation penalty, and a convolutional denoising autoencoder on synthetic
circle images.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .numkit import RngStream, hermitian_eig


@dataclass
class CorrelationMatrix:
    rho: np.ndarray
    recentred: bool = False  # True when the input was not centred and we centred it


def correlation_matrix(data, mean_tol=1e-8):
    """rho_lj = <x_l x_j> over the batch (rows are samples).

    Data should already be centred; if any coordinate mean exceeds ``mean_tol``
    the data are centred here and ``recentred`` is set.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a 2-D batch with at least two samples")
    mu = x.mean(axis=0)
    recentred = bool(np.max(np.abs(mu)) > mean_tol)
    if recentred:
        x = x - mu
    rho = x.T @ x / x.shape[0]
    rho = 0.5 * (rho + rho.T)
    return CorrelationMatrix(rho, recentred)


@dataclass
class PCAResult:
    eigenvalues: np.ndarray  # descending
    vectors: np.ndarray      # columns
    m_hidden: int

    @property
    def subspace(self):
        return self.vectors[:, :self.m_hidden]


def pca(corr, m_hidden):
    rho = corr.rho if isinstance(corr, CorrelationMatrix) else np.asarray(corr, float)
    if not 0 <= m_hidden <= rho.shape[0]:
        raise ValueError("m_hidden must lie between 0 and the input dimension")
    lam, v = hermitian_eig(rho)
    return PCAResult(lam, v.real, m_hidden)


def pca_optimal_cost(result: PCAResult):
    """Residual sum_{j >= M} lambda_j left after projecting on the top-M eigenvectors."""
    if result.m_hidden > result.eigenvalues.size:
        raise ValueError("m_hidden exceeds the dimension")
    return float(np.sum(result.eigenvalues[result.m_hidden:]))


def principal_angles(a, b):
    """Principal angles (radians, ascending) between the column spans of a and b."""
    qa, _ = np.linalg.qr(np.asarray(a, float))
    qb, _ = np.linalg.qr(np.asarray(b, float))
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.sort(np.arccos(np.clip(s, -1.0, 1.0)))


def decorrelation_penalty(latents):
    """sum_{j != k} <y_j y_k>^2 over the batch."""
    y = np.asarray(latents, dtype=float)
    if y.ndim != 2 or y.shape[0] < 2:
        raise ValueError("need a batch of at least two latent vectors")
    c = y.T @ y / y.shape[0]
    return float(np.sum(c**2) - np.sum(np.diag(c) ** 2))


def spectrum_data(eigenvalues, n_samples, rng: RngStream):
    """Centred Gaussian data whose correlation matrix has the given spectrum
    in a random orthonormal basis. Returns (data, basis)."""
    lam = np.asarray(eigenvalues, float)
    d = lam.size
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    q = q * np.sign(np.diag(r))
    x = rng.normal(size=(n_samples, d)) * np.sqrt(lam)
    x = x @ q.T
    return x - x.mean(axis=0), q


def linear_autoencoder(n_in, m_hidden, seed=0):
    layers = [nn.Dense(n_in, m_hidden, "linear", use_bias=False),
              nn.Dense(m_hidden, n_in, "linear", use_bias=False)]
    return nn.Network(layers, (n_in,), seed=seed)


class Divergence(FloatingPointError):
    pass


def train_linear_autoencoder(data, m_hidden, optimizer=None, steps=3000, seed=0, log_every=50):
    """Full-batch training of x -> w~ w x on C = <|x - w~ w x|^2>.

    Returns ``(net, final_cost, curve)``; curve is a list of (step, cost).
    """
    x = np.asarray(data, dtype=float)
    optimizer = optimizer if optimizer is not None else nn.Adam(1e-2)
    net = linear_autoencoder(x.shape[1], m_hidden, seed)
    curve = []
    for step in range(1, steps + 1):
        cost = nn.train_on_batch(net, x, x, "quadratic", optimizer)
        if not math.isfinite(cost):
            raise Divergence(f"linear autoencoder cost became {cost} at step {step}")
        if step % log_every == 0:
            curve.append((step, cost))
    final = nn.loss_eval(net.predict(x), x, "quadratic")
    if not math.isfinite(final):
        raise Divergence("final cost is not finite")
    curve.append((steps, final))
    return net, final, curve


def decoder_matrix(net):
    """w~ (n_in x M) of a trained linear autoencoder."""
    return net.layers[1].params["w"]


def encoder_matrix(net):
    return net.layers[0].params["w"]


# ------------------------------------------------------------------ denoising

def circle_images(n, size, radius_range, rng: RngStream):
    """Binary images, each holding one filled disc at a random place and radius."""
    rmin, rmax = radius_range
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r = rmin + (rmax - rmin) * rng.uniform(n)
    cx = r + (size - 2 * r) * rng.uniform(n)
    cy = r + (size - 2 * r) * rng.uniform(n)
    d2 = (xx[None] - cx[:, None, None]) ** 2 + (yy[None] - cy[:, None, None]) ** 2
    return (d2 <= r[:, None, None] ** 2).astype(float)[..., None]


def add_noise(images, sigma, rng: RngStream):
    if sigma == 0:
        return images.copy()
    return np.clip(images + rng.normal(0.0, sigma, images.shape), 0.0, 1.0)


@dataclass
class DenoiseConfig:
    size: int = 16
    radius_min: float = 2.0
    radius_max: float = 5.0
    noise: float = 0.4
    channels: int = 8
    half_width: int = 1
    steps: int = 600
    batch_size: int = 16
    lr: float = 3e-3
    test_size: int = 256
    log_every: int = 50


def denoise_network(cfg: DenoiseConfig, seed=0):
    c, d = cfg.channels, cfg.half_width
    layers = [nn.Conv2D(1, c, d, "relu"), nn.AvgPool(2), nn.Conv2D(c, c, d, "relu"),
              nn.Upsample(2), nn.Conv2D(c, 1, d, "sigmoid")]
    return nn.Network(layers, (cfg.size, cfg.size, 1), seed=seed)


def pixel_mse(a, b):
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


@dataclass
class DenoiseResult:
    net: nn.Network
    test_mse: float
    train_mse: float
    baseline_mse: float
    curve: list = field(default_factory=list)
    examples: tuple = ()


def denoising_task(cfg: DenoiseConfig, seed=0):
    """Train on freshly generated (noisy, clean) pairs; evaluate on a held-out set."""
    net = denoise_network(cfg, seed)
    opt = nn.Adam(cfg.lr)
    data_rng = RngStream(seed, 1)
    test_rng = RngStream(seed, 2)
    radii = (cfg.radius_min, cfg.radius_max)
    clean_test = circle_images(cfg.test_size, cfg.size, radii, test_rng)
    noisy_test = add_noise(clean_test, cfg.noise, test_rng)
    curve = []
    recent = []
    for step in range(1, cfg.steps + 1):
        clean = circle_images(cfg.batch_size, cfg.size, radii, data_rng)
        noisy = add_noise(clean, cfg.noise, data_rng)
        # loss_eval sums over pixels; divide to report a per-pixel error
        loss = nn.train_on_batch(net, noisy, clean, "quadratic", opt) / cfg.size**2
        recent.append(loss)
        if step % cfg.log_every == 0:
            curve.append({"step": step, "train_mse": float(np.mean(recent)),
                          "test_mse": pixel_mse(net.predict(noisy_test), clean_test)})
            recent = []
    out = net.predict(noisy_test)
    test_mse = pixel_mse(out, clean_test)
    # fresh-data training error of the final network
    clean = circle_images(cfg.test_size, cfg.size, radii, data_rng)
    noisy = add_noise(clean, cfg.noise, data_rng)
    train_mse = pixel_mse(net.predict(noisy), clean)
    return DenoiseResult(net, test_mse, train_mse, pixel_mse(noisy_test, clean_test), curve,
                         (clean_test[:4], noisy_test[:4], out[:4]))


def write_pgm(path, image, maxval=255):
    """Write a 2-D array with values in [0, 1] as an ASCII (P2) graymap."""
    img = np.asarray(image, float)
    if img.ndim == 3:
        img = img[..., 0]
    q = np.clip(np.rint(img * maxval), 0, maxval).astype(int)
    with open(path, "w") as fh:
        fh.write(f"P2\n{q.shape[1]} {q.shape[0]}\n{maxval}\n")
        for row in q:
            fh.write(" ".join(str(v) for v in row) + "\n")


def read_pgm(path):
    with open(path) as fh:
        tokens = [t for line in fh for t in line.split("#")[0].split()]
    if tokens[0] != "P2":
        raise ValueError("not an ASCII graymap")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4:4 + w * h], dtype=float).reshape(h, w) / maxval
