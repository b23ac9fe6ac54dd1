"""Experiment registry used by the command-line runner.

Every experiment has a parameter dataclass (the documented defaults), an
optional ``check`` returning named violations, and a ``run`` function that
returns an :class:`Outcome`. Runs never touch the filesystem; the runner writes
everything.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, is_dataclass, asdict

import numpy as np

from . import nn, rl, autoenc, qcontrol, generative, statest
from .numkit import RngStream
from .qsim import SMEConfig


@dataclass
class Outcome:
    metrics: list                      # rows for metrics.csv
    summary: dict                      # headline numbers for summary.json
    checkpoint: dict = None
    images: dict = field(default_factory=dict)      # name -> 2-D array in [0, 1]
    trajectories: dict = None          # kwargs for qsim.write_trajectory_csv


@dataclass
class Experiment:
    tag: str
    description: str
    params: type
    run: callable
    check: callable = None


# ---------------------------------------------------------------- parameters

def flatten(obj, prefix=""):
    """Dataclass instance -> {dotted key: value}, recursing into nested dataclasses."""
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


class ConfigError(ValueError):
    pass


def _coerce(key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected an array, got {value!r}")
        value = [tuple(v) if isinstance(v, list) else v for v in value]
        return tuple(value) if isinstance(default, tuple) else list(value)
    return value


def build_params(cls, given):
    """Instantiate ``cls`` from a flat {dotted key: value} table.

    Unknown keys raise ConfigError. Returns (params, defaults_applied) where the
    second item lists the keys that kept their default.
    """
    defaults = flatten(cls())
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    values = {k: _coerce(k, given[k], defaults[k]) if k in given else defaults[k] for k in defaults}
    applied = [k for k in defaults if k not in given]
    return _unflatten(cls, values), applied


def _unflatten(cls, flat, prefix=""):
    kwargs = {}
    proto = cls()
    for f in fields(cls):
        v = getattr(proto, f.name)
        if is_dataclass(v):
            kwargs[f.name] = _unflatten(type(v), flat, prefix + f.name + ".")
        else:
            kwargs[f.name] = flat[prefix + f.name]
    return cls(**kwargs)


def jsonable(v):
    if is_dataclass(v):
        return jsonable(asdict(v))
    if isinstance(v, dict):
        return {str(k): jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return jsonable(v.tolist())
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, complex):
        return [v.real, v.imag]
    return v


# ----------------------------------------------------------------- gradcheck

@dataclass
class GradcheckParams:
    n_architectures: int = 20
    h: float = 1e-5
    tol: float = 1e-5


def run_gradcheck(p: GradcheckParams, seed, pool_map=map):
    def case(i):
        net, x, target, loss, desc = nn.random_architecture(RngStream(seed, i))
        err, _, _ = nn.gradient_check(net, x, target, loss, p.h)
        return {"case": i, "n_params": net.n_params(), "max_rel_error": err, "architecture": desc}

    rows = list(pool_map(case, range(p.n_architectures)))
    worst = max((r["max_rel_error"] for r in rows), default=0.0)
    return Outcome(rows, {"max_rel_error": worst, "passed": worst < p.tol,
                          "n_architectures": p.n_architectures})


# ----------------------------------------------------------------------- xor

@dataclass
class XorParams:
    hidden: int = 4
    activation: str = "sigmoid"
    optimizer: str = "adam"
    lr: float = 0.1
    steps: int = 2000
    tol: float = 0.1
    log_every: int = 50


XOR_X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], float)
XOR_Y = np.array([[0], [1], [1], [0]], float)


def run_xor(p: XorParams, seed, pool_map=map):
    net = nn.Network.dense([2, p.hidden, 1], [p.activation, "sigmoid"], seed=seed)
    opt = nn.make_optimizer(p.optimizer, p.lr)
    rows = []
    for step in range(1, p.steps + 1):
        loss = nn.train_on_batch(net, XOR_X, XOR_Y, "quadratic", opt)
        if step % p.log_every == 0 or step == p.steps:
            rows.append({"step": step, "loss": loss})
    out = net.predict(XOR_X)[:, 0]
    err = float(np.max(np.abs(out - XOR_Y[:, 0])))
    return Outcome(rows, {"outputs": out.tolist(), "max_error": err, "passed": err < p.tol},
                   net.to_dict())


# -------------------------------------------------------------------- func1d

@dataclass
class Func1dParams:
    hidden: tuple = (30,)
    activation: str = "sigmoid"
    x_min: float = -2.0
    x_max: float = 2.0
    n_points: int = 200
    steps: int = 4000
    lr: float = 1e-2
    log_every: int = 100


def func1d_target(x):
    return np.sin(3 * x) * np.exp(-x**2 / 2)


def run_func1d(p: Func1dParams, seed, pool_map=map):
    """Full-batch fit on a grid; the midpoints between grid points act as a
    held-out check of the interpolation."""
    x = np.linspace(p.x_min, p.x_max, p.n_points)[:, None]
    xm = 0.5 * (x[1:] + x[:-1])
    y, ym = func1d_target(x), func1d_target(xm)
    net = nn.Network.dense([1, *p.hidden, 1], [p.activation] * len(p.hidden) + ["linear"], seed=seed)
    opt = nn.Adam(p.lr)
    rows = []
    for step in range(1, p.steps + 1):
        loss = nn.train_on_batch(net, x, y, "quadratic", opt)
        if step % p.log_every == 0 or step == p.steps:
            rows.append({"step": step, "loss": loss,
                         "midpoint_loss": nn.loss_eval(net.predict(xm), ym, "quadratic")})
    summary = {"max_error": float(np.max(np.abs(net.predict(x) - y))),
               "max_error_midpoints": float(np.max(np.abs(net.predict(xm) - ym)))}
    return Outcome(rows, summary, net.to_dict())


# --------------------------------------------------------------- autoenc-pca

@dataclass
class AutoencPcaParams:
    eigenvalues: tuple = (5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.25, 0.1)
    m_hidden: int = 3
    n_samples: int = 2000
    steps: int = 3000
    lr: float = 1e-2
    log_every: int = 50


def check_autoenc_pca(p: AutoencPcaParams):
    out = []
    if not 1 <= p.m_hidden < len(p.eigenvalues):
        out.append("m_hidden must lie between 1 and len(eigenvalues) - 1")
    if any(v <= 0 for v in p.eigenvalues):
        out.append("eigenvalues must be positive")
    return out


def run_autoenc_pca(p: AutoencPcaParams, seed, pool_map=map):
    data, _ = autoenc.spectrum_data(p.eigenvalues, p.n_samples, RngStream(seed, 0))
    corr = autoenc.correlation_matrix(data)
    res = autoenc.pca(corr, p.m_hidden)
    target = autoenc.pca_optimal_cost(res)
    net, cost, curve = autoenc.train_linear_autoencoder(data, p.m_hidden, nn.Adam(p.lr), p.steps,
                                                        seed, p.log_every)
    angles = autoenc.principal_angles(autoenc.decoder_matrix(net), res.subspace)
    lam = res.eigenvalues
    gap = float((lam[p.m_hidden - 1] - lam[p.m_hidden]) / lam[p.m_hidden - 1])
    latents = net.layers[0].linear(data)
    rows = [{"step": s, "cost": c, "pca_cost": target} for s, c in curve]
    summary = {"trained_cost": cost, "pca_cost": target,
               "relative_gap": (cost - target) / target,
               "max_principal_angle_deg": float(np.degrees(angles.max())),
               "eigengap": gap, "latent_decorrelation_penalty": autoenc.decorrelation_penalty(latents),
               "recentred": corr.recentred, "sample_eigenvalues": lam.tolist()}
    return Outcome(rows, summary, net.to_dict())


# ------------------------------------------------------------------- denoise

def check_denoise(p: autoenc.DenoiseConfig):
    out = []
    if p.size % 2:
        out.append("image size must be even (one 2x pooling stage)")
    if not 0 < p.radius_min <= p.radius_max <= p.size / 2:
        out.append("need 0 < radius_min <= radius_max <= size/2")
    return out


def run_denoise(p: autoenc.DenoiseConfig, seed, pool_map=map):
    res = autoenc.denoising_task(p, seed)
    images = {}
    for k, (c, n, o) in enumerate(zip(*res.examples)):
        images[f"example{k}_clean"] = c
        images[f"example{k}_noisy"] = n
        images[f"example{k}_denoised"] = o
    summary = {"test_mse": res.test_mse, "train_mse": res.train_mse,
               "noisy_input_mse": res.baseline_mse}
    return Outcome(res.curve, summary, res.net.to_dict(), images)


# -------------------------------------------------------------------- walker

@dataclass
class WalkerParams:
    T: int = 5
    eta: float = 0.01
    batch_size: int = 1
    updates: int = 2500
    baseline_mode: str = "off"


def run_walker(p: WalkerParams, seed, pool_map=map):
    policy = rl.SigmoidPolicy(1, [0])
    log = rl.train_policy_gradient(rl.WalkerEnv(p.T), policy, p.T, p.batch_size, p.updates,
                                   p.eta, seed, p.baseline_mode)
    theta_a = 0.0
    for row in log:
        theta_a += rl.walker_analytic_update(p.eta, p.T, theta_a)
        row["theta_analytic"] = theta_a
        row["pi_analytic"] = rl.sigmoid(theta_a)
    final = log[-1] if log else {"pi_base_0": 0.5, "theta_0": 0.0}
    summary = {"final_pi_plus": final["pi_base_0"], "final_theta": final["theta_0"],
               "final_theta_analytic": theta_a}
    return Outcome(log, summary, {"theta": policy.theta.tolist()})


@dataclass
class WalkerTargetParams:
    x_max: int = 10
    T: int = 50
    eta: float = 0.01
    batch_size: int = 10
    updates: int = 1000
    baseline_mode: str = "off"


def run_walker_target(p: WalkerTargetParams, seed, pool_map=map):
    # observation 0 = off target (base action: move), 1 = on target (base action: stay)
    policy = rl.SigmoidPolicy(2, [0, 1])
    log = rl.train_policy_gradient(rl.WalkerTargetEnv(p.x_max, p.T), policy, p.T, p.batch_size,
                                   p.updates, p.eta, seed, p.baseline_mode)
    pr = [float(rl.sigmoid(t)) for t in policy.theta]
    summary = {"pi_move_given_off_target": pr[0], "pi_stay_given_on_target": pr[1],
               "final_mean_return": log[-1]["mean_return"] if log else None}
    return Outcome(log, summary, {"theta": policy.theta.tolist()})


# --------------------------------------------------------------- gridworld-q

@dataclass
class GridworldParams:
    height: int = 4
    width: int = 4
    walls: list = field(default_factory=lambda: [(1, 1)])
    boxes: list = field(default_factory=lambda: [(3, 3)])
    start: tuple = (0, 0)
    q: rl.QLearningConfig = field(default_factory=rl.QLearningConfig)
    log_every: int = 100
    q_tol: float = 1e-3


def make_gridworld(p: GridworldParams):
    return rl.GridworldBoxEnv(p.height, p.width, boxes=tuple(tuple(b) for b in p.boxes),
                              start=tuple(p.start), walls=tuple(tuple(w) for w in p.walls))


def check_gridworld(p: GridworldParams):
    out = []
    if p.height < 1 or p.width < 1:
        return ["grid extents must be positive"]
    cells = [tuple(c) for c in (*p.walls, *p.boxes, p.start)]
    for c in cells:
        if len(c) != 2 or not (0 <= c[0] < p.height and 0 <= c[1] < p.width):
            out.append(f"cell {c} lies outside the {p.height}x{p.width} grid")
    walls = {tuple(w) for w in p.walls}
    if tuple(p.start) in walls:
        out.append("start cell is a wall")
    if walls & {tuple(b) for b in p.boxes}:
        out.append("a box sits on a wall")
    if not p.boxes:
        out.append("need at least one box")
    if not 0 <= p.q.gamma < 1:
        out.append("gamma must lie in [0, 1)")
    if not 0 < p.q.alpha < 1:
        out.append("alpha must lie in (0, 1)")
    if not out:
        try:
            make_gridworld(p)
        except ValueError as e:
            out.append(str(e))
    return out


def run_gridworld(p: GridworldParams, seed, pool_map=map):
    env = make_gridworld(p)
    q_star = rl.value_iteration_oracle(env, p.q.gamma)
    table, visits, log = rl.train_q_learning(env, p.q, seed)
    reach = env.reachable_states()
    ok, mismatches = rl.greedy_policy_matches(table.q, q_star, reach)
    # visits needed before the initial error has been contracted below 1e-4 of
    # its size by the (1 - alpha) factor of each update
    k_min = math.ceil(math.log(1e-4) / math.log(1 - p.q.alpha))
    live = np.zeros_like(visits, dtype=bool)
    live[reach] = True
    for s in reach:
        if env.is_terminal(s):
            live[s] = False
    visited = (visits >= k_min) & live
    err = np.abs(table.q - q_star)
    rows = []
    for start in range(0, len(log), p.log_every):
        block = log[start:start + p.log_every]
        rows.append({"episode": block[-1]["episode"], "epsilon": block[-1]["epsilon"],
                     "mean_return": float(np.mean([r["return"] for r in block])),
                     "mean_length": float(np.mean([r["length"] for r in block]))})
    summary = {"greedy_policy_matches": bool(ok), "n_mismatched_states": len(mismatches),
               "n_reachable_states": len(reach),
               "max_q_error_visited": float(err[visited].max(initial=0.0)),
               "visit_threshold": k_min, "visited_pairs": int(visited.sum()),
               "live_pairs": int(live.sum()),
               "passed": bool(ok) and float(err[visited].max(initial=0.0)) < p.q_tol}
    return Outcome(rows, summary, {"q": table.q.tolist(), "q_star": q_star.tolist(),
                                   "visits": visits.tolist()})


# -------------------------------------------------------------------- cavity

@dataclass
class CavityParams:
    sme: SMEConfig = field(default_factory=SMEConfig)
    amplitudes: list = field(default_factory=qcontrol.default_amplitudes)
    T: int = 50
    t_msmt: int = 10
    target: int = 1
    batch_size: int = 64
    hidden: tuple = (64, 32)
    policy_sizes: tuple = ()  # explicit layer sizes; empty means derive from t_msmt/hidden/amplitudes
    optimizer: str = "adam"
    lr: float = 2e-3
    updates: int = 300
    baseline_mode: str = "batch_mean"
    eval_batch: int = 256
    dump_trajectories: int = 0  # evaluation trajectories written to trajectories.csv


def control_config(p: CavityParams):
    hidden = tuple(p.policy_sizes[1:-1]) if len(p.policy_sizes) >= 2 else tuple(p.hidden)
    return qcontrol.ControlConfig(p.sme, list(p.amplitudes), p.T, p.t_msmt, p.target, p.batch_size,
                                  hidden, p.optimizer, p.lr, p.updates, p.baseline_mode, p.eval_batch)


def check_cavity(p: CavityParams):
    sizes = list(p.policy_sizes) if p.policy_sizes else None
    out = []
    if sizes is not None and len(sizes) < 2:
        out.append("policy_sizes needs at least an input and an output size")
        sizes = None
    if p.dump_trajectories < 0 or p.dump_trajectories > p.eval_batch:
        out.append("dump_trajectories must lie between 0 and eval_batch")
    if p.optimizer not in ("sgd", "adam"):
        out.append(f"unknown optimizer {p.optimizer!r}")
    return out + control_config(p).violations(sizes)


def run_cavity(p: CavityParams, seed, pool_map=map):
    cfg = control_config(p)
    log, policy, best, summary = qcontrol.train(cfg, seed)
    base = qcontrol.constant_drive_baseline(cfg)
    ev, batch = qcontrol.evaluate_policy(policy, cfg, seed, return_batch=True)
    summary.update(ev)
    summary.update({"baseline_best_constant_drive": base["best"],
                    "baseline_best_amplitude": base["best_amplitude"],
                    "baseline_per_amplitude": base["per_amplitude"],
                    "coherent_ceiling": qcontrol.COHERENT_CEILING,
                    "baseline_gap_to_ceiling": qcontrol.COHERENT_CEILING - base["best"],
                    "beats_baseline": summary.get("last_decile_p_target", -1.0) > base["best"],
                    "eval_beats_baseline": ev["eval_mean_p_target"] > base["best"],
                    "eval_exceeds_ceiling": ev["eval_mean_p_target"] > qcontrol.COHERENT_CEILING})
    traj = None
    n = p.dump_trajectories
    if n:
        traj = {"rho_history": batch.populations[:n], "signals": batch.signals[:n],
                "config": cfg.sme, "trajectory_ids": list(range(n)), "dt": cfg.sme.dt}
    return Outcome(log, summary, {"policy": policy.to_dict(), "best_policy": best.to_dict()},
                   trajectories=traj)


# ----------------------------------------------------------------------- rbm

@dataclass
class RbmParams:
    train: generative.RBMTrainConfig = field(default_factory=generative.RBMTrainConfig)
    peaks: list = field(default_factory=lambda: [(1, 1, 0), (0, 0, 1)])
    peak_mass: float = 0.4


def check_rbm(p: RbmParams):
    out = []
    if not p.peaks or len({len(x) for x in p.peaks}) != 1:
        out.append("peaks must be a non-empty list of equal-length bit tuples")
    elif any(b not in (0, 1) for x in p.peaks for b in x):
        out.append("peaks must contain only 0 and 1")
    if p.peak_mass * len(p.peaks) > 1:
        out.append("peaks carry more than unit mass")
    if p.train.n_hidden < 1:
        out.append("n_hidden must be >= 1")
    return out


def run_rbm(p: RbmParams, seed, pool_map=map):
    p0 = generative.two_peak_target(len(p.peaks[0]), tuple(tuple(x) for x in p.peaks), p.peak_mass)
    params, log = generative.train_rbm(p0, p.train, seed)
    model = generative.exact_distribution(params)
    summary = {"kl": generative.kl_divergence(p0, model),
               "cross_entropy": generative.rbm_cross_entropy(p0, params),
               "target": p0.tolist(), "model": model.tolist()}
    return Outcome(log, summary, params.to_dict())


# ----------------------------------------------------------------------- qbm

@dataclass
class QbmParams:
    labels: tuple = generative.TWO_QUBIT_BASIS
    target_scale: float = 1.0
    train: generative.QBMTrainConfig = field(default_factory=generative.QBMTrainConfig)


def check_qbm(p: QbmParams):
    try:
        generative.QBMModel.from_labels(p.labels)
    except (ValueError, KeyError) as e:
        return [f"bad Pauli labels: {e}"]
    return []


def run_qbm(p: QbmParams, seed, pool_map=map):
    """Learn the thermal state of a random Hamiltonian in the same operator basis."""
    w_true = p.target_scale * RngStream(seed, 0).normal(size=len(p.labels))
    rho = generative.qbm_state(generative.QBMModel.from_labels(p.labels, w_true))
    model0 = generative.QBMModel.from_labels(p.labels)
    s0 = generative.relative_entropy(rho, generative.qbm_state(model0))
    model, log = generative.train_qbm(model0, rho, p.train)
    summary = {"initial_relative_entropy": s0,
               "final_relative_entropy": log[-1]["relative_entropy"] if log else s0,
               "w_true": w_true.tolist(), "w_learned": model.w.tolist()}
    return Outcome(log, summary, model.to_dict())


# --------------------------------------------------------------- reconstruct

def check_reconstruct(p: statest.ReconstructConfig):
    out = []
    if p.n_mc < 10_000:
        out.append("n_mc must be at least 1e4")
    if p.repeats < 0:
        out.append("repeats must be >= 0")
    if p.oracle_replicates < 1:
        out.append("oracle_replicates must be >= 1")
    return out


def run_reconstruct(p: statest.ReconstructConfig, seed, pool_map=map):
    plan = statest.default_plan(p.repeats)
    net, summary, log = statest.train_reconstructor(plan, p, seed, pool_map)
    summary["ratio_to_oracle"] = summary["test_mse"] / summary["oracle_mse"]
    return Outcome(log, summary, net.to_dict())


# ------------------------------------------------------------------ registry

REGISTRY = {e.tag: e for e in [
    Experiment("gradcheck", "backprop vs central finite differences on random architectures",
               GradcheckParams, run_gradcheck),
    Experiment("xor", "one-hidden-layer network learns XOR", XorParams, run_xor),
    Experiment("func1d", "fit a smooth 1D function with a small dense network", Func1dParams, run_func1d),
    Experiment("autoenc-pca", "linear autoencoder against PCA on a known spectrum",
               AutoencPcaParams, run_autoenc_pca, check_autoenc_pca),
    Experiment("denoise", "convolutional denoising autoencoder on circle images",
               autoenc.DenoiseConfig, run_denoise, check_denoise),
    Experiment("walker", "policy-gradient random walker against its analytic update",
               WalkerParams, run_walker),
    Experiment("walker-target", "walker that must learn to stop on a target site",
               WalkerTargetParams, run_walker_target),
    Experiment("gridworld-q", "tabular Q-learning on a box-collecting gridworld",
               GridworldParams, run_gridworld, check_gridworld),
    Experiment("cavity", "REINFORCE feedback stabilising a Fock state of a monitored cavity",
               CavityParams, run_cavity, check_cavity),
    Experiment("rbm", "RBM trained with CD-1 on a two-peak distribution", RbmParams, run_rbm, check_rbm),
    Experiment("qbm", "two-qubit quantum Boltzmann machine by exact diagonalisation",
               QbmParams, run_qbm, check_qbm),
    Experiment("reconstruct", "qubit state reconstruction against the Bayes posterior mean",
               statest.ReconstructConfig, run_reconstruct, check_reconstruct),
]}
