"""Measurement-based feedback on a driven cavity, learned with REINFORCE.

A softmax policy network sees the last ``t_msmt`` per-step averages of the
measurement signal and picks one of a few fixed drive amplitudes for the next
time step. The reward is the population of the target Fock state after each
step. A batch of trajectories is simulated side by side and the policy is
updated once per batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .numkit import RngStream, categorical_from_uniform
from .qsim import CavitySME, SMEConfig, LEAK_THRESHOLD

COHERENT_CEILING = math.exp(-1.0)  # max_beta |beta|^2 exp(-|beta|^2), reached at |beta| = 1


def default_amplitudes(n=9, amax=2.0):
    return [float(a) for a in np.linspace(-amax, amax, n)]


@dataclass
class ControlConfig:
    sme: SMEConfig = field(default_factory=SMEConfig)
    amplitudes: list = field(default_factory=default_amplitudes)
    T: int = 50
    t_msmt: int = 10
    target: int = 1
    batch_size: int = 64
    hidden: tuple = (64, 32)
    optimizer: str = "adam"
    lr: float = 2e-3
    updates: int = 300
    baseline_mode: str = "batch_mean"
    eval_batch: int = 256

    @property
    def n_actions(self):
        return len(self.amplitudes)

    @property
    def policy_sizes(self):
        return [self.t_msmt, *self.hidden, self.n_actions]

    def observation_map(self):
        """(shift, scale) of the affine standardisation of per-step signal averages."""
        kp = self.sme.kappa_meas
        shift = 2.0 * math.sqrt(kp) * self.target
        scale = 1.0 / (2.0 * math.sqrt(kp / self.sme.dt)) if kp > 0 else 1.0
        return shift, scale

    def violations(self, policy_sizes=None):
        out = list(self.sme.violations())
        if self.n_actions < 2:
            out.append("need at least two drive amplitudes")
        if self.t_msmt < 1:
            out.append("t_msmt must be >= 1")
        if self.T < 1:
            out.append("episode length T must be >= 1")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if not 0 <= self.target < self.sme.n_cutoff:
            out.append("target Fock index outside the cutoff")
        if self.baseline_mode not in ("off", "batch_mean"):
            out.append(f"unknown baseline_mode {self.baseline_mode!r}")
        if policy_sizes is not None:
            if policy_sizes[0] != self.t_msmt:
                out.append(f"policy input size {policy_sizes[0]} differs from t_msmt {self.t_msmt}")
            if policy_sizes[-1] != self.n_actions:
                out.append(f"policy output size {policy_sizes[-1]} differs from the number of amplitudes {self.n_actions}")
        if not out:
            leak = amplitude_leak(self)
            if leak >= LEAK_THRESHOLD:
                out.append(f"largest amplitude pushes {leak:.2e} population into the top Fock level "
                           f"within one step (limit {LEAK_THRESHOLD})")
        return out

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def amplitude_leak(cfg: ControlConfig):
    """Top-level population after holding the largest amplitude for one step from vacuum."""
    sim = CavitySME(cfg.sme, check=False)
    N = cfg.sme.n_cutoff
    rho = np.zeros((N, N), complex)
    rho[0, 0] = 1.0
    amax = max(cfg.amplitudes, key=abs)
    rho, _ = sim.step(rho, amax, deterministic=True)
    return float(rho[-1, -1].real)


def build_observation(history, t_msmt, shift=0.0, scale=1.0):
    """Last ``t_msmt`` per-step signal averages, standardised, zero-padded on the left.

    ``history`` has shape (B, t) (or (t,)) holding the averages of the steps
    taken so far, oldest first.
    """
    h = np.asarray(history, dtype=float)
    single = h.ndim == 1
    h = np.atleast_2d(h)
    B, t = h.shape
    obs = np.zeros((B, t_msmt))
    k = min(t, t_msmt)
    if k:
        obs[:, t_msmt - k:] = (h[:, t - k:] - shift) * scale
    return obs[0] if single else obs


def policy_network(cfg: ControlConfig, seed=0):
    acts = ["relu"] * len(cfg.hidden) + ["softmax"]
    return nn.Network.dense(cfg.policy_sizes, acts, seed=seed)


@dataclass
class EpisodeBatch:
    observations: np.ndarray  # (B, T, t_msmt)
    actions: np.ndarray       # (B, T) indices into the amplitude grid
    rewards: np.ndarray       # (B, T)
    signals: np.ndarray       # (B, T) per-step signal averages
    final_rho: np.ndarray
    populations: np.ndarray = None

    @property
    def returns(self):
        return self.rewards.sum(axis=1)


def draw_episode_noise(cfg: ControlConfig, seed, first_stream, n):
    """Per-trajectory noise and action uniforms from RngStream(seed, first_stream + j)."""
    S = cfg.sme.substeps
    noise = np.empty((n, cfg.T, S))
    unif = np.empty((n, cfg.T))
    for j in range(n):
        rs = RngStream(seed, first_stream + j)
        noise[j] = rs.normal(size=(cfg.T, S))
        unif[j] = rs.uniform(cfg.T)
    return noise, unif


def run_episode_batch(policy, cfg: ControlConfig, noise, unif, sim=None, forced_action=None,
                      record_populations=False):
    """Simulate len(noise) closed-loop trajectories of cfg.T steps.

    With ``record_populations`` the Fock populations after every step are kept
    in ``batch.populations`` (shape (B, T, N)).
    """
    sim = sim if sim is not None else CavitySME(cfg.sme)
    B = noise.shape[0]
    N = cfg.sme.n_cutoff
    amps = np.asarray(cfg.amplitudes, dtype=complex)
    shift, scale = cfg.observation_map()
    rho = np.zeros((B, N, N), complex)
    rho[:, 0, 0] = 1.0
    obs = np.zeros((B, cfg.T, cfg.t_msmt))
    actions = np.zeros((B, cfg.T), dtype=np.int64)
    rewards = np.zeros((B, cfg.T))
    signals = np.zeros((B, cfg.T))
    pops = np.zeros((B, cfg.T, N)) if record_populations else None
    for t in range(cfg.T):
        o = build_observation(signals[:, :t], cfg.t_msmt, shift, scale)
        obs[:, t] = o
        if forced_action is None:
            probs = policy.predict(o)
            a = categorical_from_uniform(probs, unif[:, t])
        else:
            a = np.full(B, forced_action, dtype=np.int64)
        actions[:, t] = a
        rho, X = sim.step(rho, amps[a], noise[:, t])
        signals[:, t] = X.mean(axis=1)
        rewards[:, t] = rho[:, cfg.target, cfg.target].real
        if pops is not None:
            pops[:, t] = np.einsum("bii->bi", rho).real
    return EpisodeBatch(obs, actions, rewards, signals, rho, pops)


def reinforce_gradient(policy, batch: EpisodeBatch, baseline_mode="batch_mean"):
    """Descent-direction gradient (nn layer format) of -<(R - b) sum_t ln pi(a_t|s_t)>.

    Built with the softmax/cross-entropy backprop: each (trajectory, step) row
    gets the target vector ``T (R - b) onehot(a_t)``, so the mean cross-entropy
    gradient over the B*T rows equals minus the REINFORCE ascent direction.
    """
    B, T, k = batch.observations.shape
    R = batch.returns
    b = R.mean() if baseline_mode == "batch_mean" else 0.0
    weight = R - b
    x = batch.observations.reshape(B * T, k)
    n_act = policy.output_shape[0]
    target = np.zeros((B * T, n_act))
    target[np.arange(B * T), batch.actions.ravel()] = T * np.repeat(weight, T)
    trace = policy.forward(x)
    return nn.backprop(policy, trace, target, "categorical_cross_entropy")


def reinforce_step(policy, batch: EpisodeBatch, optimizer, baseline_mode="batch_mean"):
    grads = reinforce_gradient(policy, batch, baseline_mode)
    flat = nn.flatten_grads(grads)
    if not np.all(np.isfinite(flat)):
        raise FloatingPointError("non-finite policy update")
    optimizer.step(policy, grads)
    return float(np.linalg.norm(flat))


def log_row(update, batch: EpisodeBatch, cfg: ControlConfig, grad_norm, leaks):
    R = batch.returns
    hist = np.bincount(batch.actions.ravel(), minlength=cfg.n_actions)
    row = {"update": update, "mean_return": float(R.mean()), "return_std": float(R.std()),
           "mean_p_target": float(batch.rewards.mean()),
           "final_p_target": float(batch.rewards[:, -1].mean()),
           "grad_norm": grad_norm, "leak_warnings": leaks}
    for i, c in enumerate(hist):
        row[f"action_{i}"] = int(c)
    return row


def constant_drive_baseline(cfg: ControlConfig):
    """Time-averaged target population for every constant amplitude of the grid,
    from the ensemble-averaged (noise-free) evolution."""
    sim = CavitySME(cfg.sme)
    N = cfg.sme.n_cutoff
    rho = np.zeros((cfg.n_actions, N, N), complex)
    rho[:, 0, 0] = 1.0
    amps = np.asarray(cfg.amplitudes, complex)
    total = np.zeros(cfg.n_actions)
    for _ in range(cfg.T):
        rho, _ = sim.step(rho, amps, deterministic=True)
        total += rho[:, cfg.target, cfg.target].real
    per = total / cfg.T
    best = int(np.argmax(per))
    return {"per_amplitude": per.tolist(), "best_amplitude": cfg.amplitudes[best], "best": float(per[best])}


EVAL_SALT = 1 << 40


def evaluate_policy(policy, cfg: ControlConfig, seed, n=None, return_batch=False):
    """Time-averaged target population of ``policy`` on fresh evaluation noise."""
    n = cfg.eval_batch if n is None else n
    noise, unif = draw_episode_noise(cfg, seed, EVAL_SALT, n)
    batch = run_episode_batch(policy, cfg, noise, unif, record_populations=return_batch)
    per_traj = batch.rewards.mean(axis=1)
    out = {"eval_mean_p_target": float(per_traj.mean()),
           "eval_se": float(per_traj.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")}
    return (out, batch) if return_batch else out


def decile_means(values):
    v = np.asarray(values, float)
    parts = np.array_split(v, 10)
    return [float(p.mean()) for p in parts if p.size]


def train(cfg: ControlConfig, seed, on_update=None):
    """Alternate batch simulation and REINFORCE updates.

    Returns ``(log, final_policy, best_policy, summary)``.
    """
    bad = cfg.violations()
    if bad:
        raise ValueError("; ".join(bad))
    policy = policy_network(cfg, seed)
    optimizer = nn.make_optimizer(cfg.optimizer, cfg.lr)
    sim = CavitySME(cfg.sme)
    log = []
    best = policy.copy()
    best_return = -math.inf
    for k in range(cfg.updates):
        noise, unif = draw_episode_noise(cfg, seed, k * cfg.batch_size, cfg.batch_size)
        leaks_before = sim.leak_warnings
        batch = run_episode_batch(policy, cfg, noise, unif, sim)
        mean_return = float(batch.returns.mean())
        if mean_return > best_return:
            best_return, best = mean_return, policy.copy()
        gnorm = reinforce_step(policy, batch, optimizer, cfg.baseline_mode)
        row = log_row(k + 1, batch, cfg, gnorm, sim.leak_warnings - leaks_before)
        log.append(row)
        if on_update is not None:
            on_update(row)
    summary = {"best_mean_return": best_return if log else None}
    if log:
        dec = decile_means([r["mean_return"] for r in log])
        pdec = decile_means([r["mean_p_target"] for r in log])
        summary.update({"first_decile_return": dec[0], "last_decile_return": dec[-1],
                        "improved": dec[-1] > dec[0],
                        "last_decile_p_target": pdec[-1]})
    summary["leak_warnings"] = sim.leak_warnings
    # fraction of simulated (trajectory, step) pairs with top-level population > LEAK_THRESHOLD
    summary["leak_fraction"] = sim.leak_warnings / max(1, cfg.updates * cfg.batch_size * cfg.T)
    return log, policy, best, summary
