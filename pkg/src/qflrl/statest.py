"""Qubit state reconstruction from projective measurement outcomes: a network
regression against the Bayes posterior-mean estimate under a uniform prior.

States are Bloch vectors. Measuring along the unit vector n gives outcome 1
with probability (1 + n . y) / 2.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from .numkit import RngStream


@dataclass
class MeasurementPlan:
    directions: np.ndarray  # (M, 3) unit vectors

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=float).reshape(-1, 3)
        if d.size and np.max(np.abs(np.linalg.norm(d, axis=1) - 1.0)) > 1e-12:
            raise ValueError("measurement directions must be unit vectors")
        self.directions = d

    @property
    def M(self):
        return self.directions.shape[0]

    def groups(self):
        """Unique directions and, per measurement, the index of its direction."""
        if self.M == 0:
            return np.zeros((0, 3)), np.zeros(0, dtype=int)
        uniq, inv = np.unique(np.round(self.directions, 12), axis=0, return_inverse=True)
        return uniq, inv.ravel()


def default_plan(repeats=4):
    """``repeats`` measurements along each of x, y and z (in that order)."""
    return MeasurementPlan(np.repeat(np.eye(3), repeats, axis=0))


def sample_state_uniform(rng: RngStream, n=None):
    """Uniform pure states on the Bloch sphere (normalised Gaussians)."""
    g = rng.normal(size=(1 if n is None else n, 3))
    y = g / np.linalg.norm(g, axis=1, keepdims=True)
    return y[0] if n is None else y


def outcome_probs(states, plan: MeasurementPlan):
    return 0.5 * (1.0 + np.atleast_2d(states) @ plan.directions.T)


def simulate_outcomes(states, plan: MeasurementPlan, rng: RngStream):
    states = np.atleast_2d(states)
    if np.any(np.linalg.norm(states, axis=1) > 1 + 1e-12):
        raise ValueError("Bloch vectors must have norm <= 1")
    p = outcome_probs(states, plan)
    x = (rng.uniform(p.shape) < p).astype(np.int64)
    return x


class BayesOracle:
    """Posterior mean E[y | x] under the uniform prior, estimated by importance
    weighting a shared Monte Carlo sample of prior states.

    Outcomes enter only through the number of ones per distinct direction, so
    each distinct count pattern is computed once and cached.
    """

    def __init__(self, plan: MeasurementPlan, n_mc, rng: RngStream, min_ess=100):
        if n_mc < 10_000:
            raise ValueError("n_mc must be at least 1e4")
        self.plan = plan
        self.n_mc = n_mc
        self.rng = rng
        self.min_ess = min_ess
        self.uniq, self.inv = plan.groups()
        self.samples = sample_state_uniform(rng, n_mc)
        p = 0.5 * (1.0 + self.samples @ self.uniq.T) if self.uniq.size else np.zeros((n_mc, 0))
        self.logp1 = np.log(np.maximum(p, 1e-300))
        self.logp0 = np.log(np.maximum(1.0 - p, 1e-300))
        self.cache = {}
        self.grow_events = 0

    def stats(self, x):
        x = np.atleast_2d(x)
        if x.shape[1] != self.plan.M:
            raise ValueError(f"outcome strings must have length {self.plan.M}")
        ones = np.zeros((x.shape[0], self.uniq.shape[0]), dtype=np.int64)
        total = np.bincount(self.inv, minlength=self.uniq.shape[0])
        for g in range(self.uniq.shape[0]):
            ones[:, g] = x[:, self.inv == g].sum(axis=1)
        return ones, total

    def _mean_for(self, k, m):
        key = tuple(k)
        if key in self.cache:
            return self.cache[key]
        logw = self.logp1 @ k + self.logp0 @ (m - k)
        logw = logw - logw.max()
        w = np.exp(logw)
        ess = w.sum() ** 2 / np.sum(w * w)
        if ess < self.min_ess:
            # grow the prior sample once for this pattern and warn
            self.grow_events += 1
            warnings.warn(f"effective sample size {ess:.0f} below {self.min_ess}; enlarging the prior sample")
            extra = sample_state_uniform(self.rng, 4 * self.n_mc)
            p = 0.5 * (1.0 + extra @ self.uniq.T)
            lw = np.log(np.maximum(p, 1e-300)) @ k + np.log(np.maximum(1 - p, 1e-300)) @ (m - k)
            allw = np.concatenate([logw, lw])
            samples = np.concatenate([self.samples, extra])
            allw = np.exp(allw - allw.max())
            mean = allw @ samples / allw.sum()
        else:
            mean = w @ self.samples / w.sum()
        self.cache[key] = mean
        return mean

    def estimate(self, x):
        """Posterior means for a batch (or a single string) of outcomes."""
        single = np.ndim(x) == 1
        if self.plan.M == 0:
            out = np.zeros((1 if single else len(x), 3))
            return out[0] if single else out
        ones, total = self.stats(x)
        out = np.array([self._mean_for(k, total) for k in ones])
        return out[0] if single else out


def bayes_oracle(x, plan: MeasurementPlan, n_mc, rng: RngStream):
    """Posterior-mean Bloch vector for one outcome string."""
    return BayesOracle(plan, n_mc, rng).estimate(np.asarray(x))


def mse(pred, truth):
    """Mean squared Bloch-vector error, summed over the three components."""
    return float(np.mean(np.sum((np.asarray(pred) - np.asarray(truth)) ** 2, axis=1)))


@dataclass
class ReconstructConfig:
    repeats: int = 4
    hidden: tuple = (64, 64)
    steps: int = 4000
    batch_size: int = 256
    lr: float = 3e-3
    lr_final: float = 3e-4
    test_size: int = 20000
    n_mc: int = 100_000
    oracle_replicates: int = 4
    log_every: int = 100
    project_to_ball: bool = False  # evaluation-only projection of outputs onto |y| <= 1


def reconstructor_network(M, hidden, seed=0):
    sizes = [M, *hidden, 3]
    acts = ["relu"] * len(hidden) + ["linear"]
    return nn.Network.dense(sizes, acts, seed=seed)


def project_ball(y):
    n = np.linalg.norm(y, axis=1, keepdims=True)
    return np.where(n > 1, y / np.maximum(n, 1e-300), y)


def train_reconstructor(plan: MeasurementPlan, cfg: ReconstructConfig, seed=0, map_fn=map):
    """Train on fresh (outcomes, state) pairs. Returns (net, summary, log rows)."""
    net = reconstructor_network(plan.M, cfg.hidden, seed)
    opt = nn.Adam(cfg.lr)
    data_rng = RngStream(seed, 1)
    test_rng = RngStream(seed, 2)
    y_test = sample_state_uniform(test_rng, cfg.test_size)
    x_test = simulate_outcomes(y_test, plan, test_rng)
    log = []
    recent = []
    decay = (cfg.lr_final / cfg.lr) ** (1.0 / max(cfg.steps - 1, 1))
    for step in range(1, cfg.steps + 1):
        opt.lr = cfg.lr * decay ** (step - 1)
        y = sample_state_uniform(data_rng, cfg.batch_size)
        x = simulate_outcomes(y, plan, data_rng)
        recent.append(nn.train_on_batch(net, x, y, "quadratic", opt))
        if step % cfg.log_every == 0 or step == cfg.steps:
            log.append({"step": step, "train_mse": float(np.mean(recent)),
                        "test_mse": _eval(net, x_test, y_test, cfg.project_to_ball)})
            recent = []
    # fresh-data estimate of the final training error
    y_tr = sample_state_uniform(data_rng, cfg.test_size)
    x_tr = simulate_outcomes(y_tr, plan, data_rng)
    summary = {"test_mse": _eval(net, x_test, y_test, cfg.project_to_ball),
               "train_mse": _eval(net, x_tr, y_tr, cfg.project_to_ball),
               "zero_baseline_mse": mse(np.zeros_like(y_test), y_test)}
    summary.update(oracle_mse(plan, x_test, y_test, cfg.n_mc, cfg.oracle_replicates, seed, map_fn))
    for row in log:
        row["oracle_mse"] = summary["oracle_mse"]
    return net, summary, log


def _eval(net, x, y, project):
    pred = net.predict(x)
    return mse(project_ball(pred) if project else pred, y)


def oracle_mse(plan, x_test, y_test, n_mc, replicates, seed, map_fn=map):
    """Bayes-oracle MSE on a test set, averaged over independent MC replicates,
    together with the Monte Carlo standard error of that average.

    Replicates are independent, so ``map_fn`` may be a thread pool's map; the
    results come back in replicate order either way.
    """
    def one(r):
        return BayesOracle(plan, n_mc, RngStream(seed, 100 + r)).estimate(x_test)

    preds = list(map_fn(one, range(replicates)))
    per = np.array([mse(est, y_test) for est in preds])
    pooled = mse(np.mean(preds, axis=0), y_test)
    se = float(per.std(ddof=1) / np.sqrt(replicates)) if replicates > 1 else float("nan")
    return {"oracle_mse": pooled, "oracle_mse_replicates": per.tolist(), "oracle_mc_se": se}
