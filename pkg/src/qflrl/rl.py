"""Tabular reinforcement learning: REINFORCE with sigmoid policies, Q-learning,
value iteration, and the three toy environments (walker, walker with target,
box-collecting gridworld).

Environments are small classes with ``reset(rng)``, ``step(state, action, rng)``
and ``observation(state)``; states are hashable tuples or ints. Randomness is
always drawn from a ``numkit.RngStream`` owned by the caller.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numkit import RngStream, categorical_from_uniform


def sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


# ---------------------------------------------------------------- trajectories

@dataclass
class Trajectory:
    states: list = field(default_factory=list)  # observed states s_1..s_T
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)

    @property
    def ret(self):
        return float(sum(self.rewards))

    def __len__(self):
        return len(self.actions)


# ---------------------------------------------------------------- environments

class WalkerEnv:
    """Random walker on the integers. Actions: index 0 -> +1, index 1 -> -1.

    The return x(T) arrives as a single terminal reward so that R = sum r_t.
    There is nothing to observe; the observation is always 0.
    """
    n_actions = 2
    n_obs = 1
    moves = (+1, -1)

    def __init__(self, T=20):
        if T < 1:
            raise ValueError("T must be >= 1")
        self.T = T

    def reset(self, rng):
        return (0, 0)  # (x, t)

    def step(self, state, action, rng):
        x, t = state
        x += self.moves[action]
        t += 1
        done = t >= self.T
        return (x, t), (float(x) if done else 0.0), done

    def observation(self, state):
        return 0


class WalkerTargetEnv:
    """Walker that should stop on a hidden target x* in 1..x_max.

    Observation 1 when sitting on the target, 0 otherwise. Actions: index 0 is
    "move" (+1), index 1 is "stay". Reward 1 for every step that ends on target.
    """
    n_actions = 2
    n_obs = 2
    moves = (1, 0)

    def __init__(self, x_max=10, T=50):
        if x_max < 1 or T < 1:
            raise ValueError("x_max and T must be >= 1")
        self.x_max = x_max
        self.T = T

    def reset(self, rng):
        target = 1 + int(rng.integers(0, self.x_max))
        return (0, target, 0)

    def step(self, state, action, rng):
        x, target, t = state
        x += self.moves[action]
        t += 1
        return (x, target, t), (1.0 if x == target else 0.0), t >= self.T

    def observation(self, state):
        return int(state[0] == state[1])


class GridworldBoxEnv:
    """H x W grid; the agent starts at ``start`` and collects boxes.

    Actions 0..3 = N, S, W, E. Moves into walls or off the grid leave the agent
    in place. Entering a cell holding an uncollected box picks it up (+1). The
    episode ends when every box has been collected. States are encoded as
    ``cell + H*W*mask`` where ``mask`` has one bit per box still on the floor.
    """
    n_actions = 4
    deltas = ((-1, 0), (1, 0), (0, -1), (0, 1))

    def __init__(self, height=4, width=4, boxes=((3, 3),), start=(0, 0), walls=()):
        self.H, self.W = height, width
        self.boxes = tuple(tuple(b) for b in boxes)
        self.start = tuple(start)
        self.walls = frozenset(tuple(w) for w in walls)
        cells = [self.start, *self.boxes, *self.walls]
        for r, c in cells:
            if not (0 <= r < height and 0 <= c < width):
                raise ValueError(f"cell {(r, c)} lies outside the {height}x{width} grid")
        if self.start in self.walls or any(b in self.walls for b in self.boxes):
            raise ValueError("start and boxes must not sit on walls")
        if len(set(self.boxes)) != len(self.boxes) or self.start in self.boxes:
            raise ValueError("boxes must be distinct and differ from the start cell")
        self.n_cells = height * width
        self.n_states = self.n_cells * 2 ** len(self.boxes)
        self.n_obs = self.n_states

    def encode(self, cell, mask):
        return cell[0] * self.W + cell[1] + self.n_cells * mask

    def decode(self, s):
        mask, c = divmod(int(s), self.n_cells)
        return divmod(c, self.W), mask

    def reset(self, rng=None):
        return self.encode(self.start, 2 ** len(self.boxes) - 1)

    def is_terminal(self, s):
        return self.decode(s)[1] == 0

    def transitions(self, s, a):
        """Full outcome list [(prob, s_next, reward, done)] for value iteration."""
        return [(1.0, *self._move(s, a))]

    def _move(self, s, a):
        if not 0 <= a < 4:
            raise ValueError(f"unknown action {a}")
        (r, c), mask = self.decode(s)
        dr, dc = self.deltas[a]
        nr, nc = r + dr, c + dc
        if 0 <= nr < self.H and 0 <= nc < self.W and (nr, nc) not in self.walls:
            r, c = nr, nc
        reward = 0.0
        for k, b in enumerate(self.boxes):
            if mask >> k & 1 and b == (r, c):
                mask &= ~(1 << k)
                reward += 1.0
        return self.encode((r, c), mask), reward, mask == 0

    def step(self, state, action, rng=None):
        return self._move(state, action)

    def observation(self, state):
        return int(state)

    def reachable_states(self):
        """Non-terminal states reachable from the start."""
        seen = {self.reset()}
        todo = [self.reset()]
        while todo:
            s = todo.pop()
            for a in range(4):
                s2, _, done = self._move(s, a)
                if not done and s2 not in seen:
                    seen.add(s2)
                    todo.append(s2)
        return sorted(seen)


class ChainEnv:
    """Deterministic 1-D chain 0..L-1. Actions 0 = left, 1 = right.

    Acting in the goal cell ``L-1`` pays 1 and ends the episode, so a start at
    distance d has optimal value gamma**d.
    """
    n_actions = 2

    def __init__(self, length=3, start=0):
        self.L = length
        self.start = start
        self.n_states = length
        self.n_obs = length

    def reset(self, rng=None):
        return self.start

    def is_terminal(self, s):
        return False

    def transitions(self, s, a):
        return [(1.0, *self.step(s, a))]

    def step(self, s, a, rng=None):
        if not (0 <= s < self.L and a in (0, 1)):
            raise ValueError("unknown state or action")
        if s == self.L - 1:
            return s, 1.0, True
        return max(0, min(self.L - 1, s + (1 if a == 1 else -1))), 0.0, False

    def observation(self, s):
        return s


# -------------------------------------------------------------------- policies

class SigmoidPolicy:
    """Two actions per observed state; ``theta[o]`` sets pi(base[o] | o) = sigmoid(theta[o])."""

    n_actions = 2

    def __init__(self, n_obs, base_actions=None, theta=None):
        self.n_obs = n_obs
        self.base = np.zeros(n_obs, dtype=int) if base_actions is None else np.asarray(base_actions, int)
        if self.base.shape != (n_obs,) or np.any((self.base < 0) | (self.base > 1)):
            raise ValueError("base_actions needs one entry in {0, 1} per observation")
        self.theta = np.zeros(n_obs) if theta is None else np.array(theta, dtype=float)

    def copy(self):
        return SigmoidPolicy(self.n_obs, self.base.copy(), self.theta.copy())

    def probs(self, obs):
        p = sigmoid(self.theta[obs])
        out = np.empty(2)
        out[self.base[obs]] = p
        out[1 - self.base[obs]] = 1.0 - p
        return out

    def sample(self, obs, rng):
        # base action when u < pi(base), the other one otherwise
        base = int(self.base[obs])
        return base if rng.gen.random() < sigmoid(self.theta[obs]) else 1 - base

    def grad_log(self, obs, action):
        """d ln pi(action|obs) / d theta, as a full parameter vector."""
        g = np.zeros_like(self.theta)
        p = sigmoid(self.theta[obs])
        g[obs] = (1.0 - p) if action == self.base[obs] else -p
        return g

    def grad_log_sum(self, states, actions):
        """sum_t d ln pi(a_t|s_t) / d theta over one trajectory."""
        p = [sigmoid(t) for t in self.theta]
        base = self.base.tolist()
        acc = [0.0] * self.n_obs
        for s, a in zip(states, actions):
            acc[s] += (1.0 - p[s]) if a == base[s] else -p[s]
        return np.array(acc)


class GreedyTablePolicy:
    """Deterministic policy from a lookup table (used for tests and rollouts)."""

    def __init__(self, actions, n_actions):
        self.actions = actions
        self.n_actions = n_actions

    def probs(self, obs):
        p = np.zeros(self.n_actions)
        p[self.actions[obs]] = 1.0
        return p

    def sample(self, obs, rng):
        return int(self.actions[obs])


def walker_logpolicy_grad(theta, action):
    """d ln pi_theta(action) / d theta for the walker's single sigmoid, action in {+1, -1}."""
    if action not in (1, -1):
        raise ValueError("walker actions are +1 and -1")
    p = sigmoid(theta)
    return 1.0 - p if action == 1 else -p


def walker_analytic_update(eta, T, theta):
    """Expected REINFORCE step 2 eta T pi (1 - pi) for the walker with R = x(T)."""
    if T < 1 or not eta > 0:
        raise ValueError("need T >= 1 and eta > 0")
    p = sigmoid(theta)
    return 2.0 * eta * T * p * (1.0 - p)


# ------------------------------------------------------------ policy gradient

def sample_trajectory(env, policy, T, rng):
    """Roll out ``policy`` for at most T steps (fewer if the env reports done)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    traj = Trajectory()
    state = env.reset(rng)
    for _ in range(T):
        obs = env.observation(state)
        a = policy.sample(obs, rng)
        state, r, done = env.step(state, a, rng)
        traj.states.append(obs)
        traj.actions.append(a)
        traj.rewards.append(r)
        if done:
            break
    return traj


class NonFiniteUpdate(FloatingPointError):
    def __init__(self, msg, trajectory=None):
        super().__init__(msg if trajectory is None else f"{msg} (trajectory {trajectory})")
        self.trajectory = trajectory


def policy_gradient_update(trajs, policy, eta, baseline_mode="off"):
    """Batch-mean REINFORCE step theta += eta <(R - b) sum_t d ln pi(a_t|s_t)>.

    Mutates and returns ``policy`` together with a diagnostics dict.
    """
    if not trajs:
        raise ValueError("empty trajectory batch")
    if baseline_mode not in ("off", "batch_mean"):
        raise ValueError(f"unknown baseline_mode {baseline_mode!r}")
    returns = [t.ret for t in trajs]
    mean_return = math.fsum(returns) / len(returns)
    b = mean_return if baseline_mode == "batch_mean" else 0.0
    total = np.zeros_like(policy.theta)
    for j, (tr, R) in enumerate(zip(trajs, returns)):
        contrib = (R - b) * policy.grad_log_sum(tr.states, tr.actions)
        if not all(math.isfinite(c) for c in contrib):
            raise NonFiniteUpdate("non-finite policy gradient", j)
        total += contrib
    grad = total / len(trajs)
    policy.theta = policy.theta + eta * grad
    return policy, {"mean_return": mean_return, "grad_norm": math.sqrt(float(grad @ grad))}


def train_policy_gradient(env, policy, T, batch_size, updates, eta, seed, baseline_mode="off",
                          record=None):
    """REINFORCE loop; trajectory j of update k uses RngStream(seed, k*batch_size + j).

    Returns a list of log rows (one dict per update, recorded *before* the update
    is applied, plus the policy probabilities after it).
    """
    log = []
    stream = RngStream(seed, 0)
    for k in range(updates):
        trajs = [sample_trajectory(env, policy, T, stream.rekey(k * batch_size + j))
                 for j in range(batch_size)]
        policy, diag = policy_gradient_update(trajs, policy, eta, baseline_mode)
        row = {"step": k + 1, **diag}
        for o in range(policy.n_obs):
            row[f"pi_base_{o}"] = sigmoid(policy.theta[o])
            row[f"theta_{o}"] = float(policy.theta[o])
        if record is not None:
            record(row, policy)
        log.append(row)
    return log


# ------------------------------------------------------------------ Q learning

class QTable:
    def __init__(self, n_states, n_actions, gamma=0.9, alpha=0.5, init=0.0):
        if not 0.0 <= gamma < 1.0:
            raise ValueError("discount must satisfy 0 <= gamma < 1")
        if not 0.0 < alpha < 1.0:
            raise ValueError("learning rate must satisfy 0 < alpha < 1")
        self.q = np.full((n_states, n_actions), float(init))
        self.gamma = gamma
        self.alpha = alpha

    @property
    def n_states(self):
        return self.q.shape[0]

    @property
    def n_actions(self):
        return self.q.shape[1]


def q_update(table: QTable, s, a, r, s_next, done):
    """One Q-learning step; terminal transitions bootstrap with 0."""
    if not (0 <= s < table.n_states and 0 <= a < table.n_actions):
        raise IndexError(f"unknown state/action ({s}, {a})")
    if not done and not 0 <= s_next < table.n_states:
        raise IndexError(f"unknown next state {s_next}")
    target = r if done else r + table.gamma * table.q[s_next].max()
    table.q[s, a] += table.alpha * (target - table.q[s, a])
    return table


def argmax_lowest(row):
    """argmax with lowest-index tie-break (np.argmax already does this)."""
    return int(np.argmax(row))


def epsilon_greedy(table: QTable, s, eps, rng):
    if not 0.0 <= eps <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    u = rng.uniform()
    if u < eps:
        return int(rng.integers(0, table.n_actions))
    return argmax_lowest(table.q[s])


def value_iteration_oracle(env, gamma, tol=1e-12, max_sweeps=100_000):
    """Optimal Q* of a finite, enumerable MDP by Bellman optimality sweeps."""
    if not hasattr(env, "transitions") or not hasattr(env, "n_states"):
        raise TypeError("value iteration needs an enumerable environment (n_states, transitions)")
    nS, nA = env.n_states, env.n_actions
    model = [[env.transitions(s, a) for a in range(nA)] for s in range(nS)]
    q = np.zeros((nS, nA))
    for _ in range(max_sweeps):
        v = q.max(axis=1)
        new = np.zeros_like(q)
        for s in range(nS):
            if hasattr(env, "is_terminal") and env.is_terminal(s):
                continue
            for a in range(nA):
                new[s, a] = sum(p * (r + (0.0 if done else gamma * v[s2])) for p, s2, r, done in model[s][a])
        delta = np.max(np.abs(new - q))
        q = new
        if delta < tol:
            return q
    raise RuntimeError("value iteration did not converge")


@dataclass
class QLearningConfig:
    episodes: int = 20000
    max_steps: int = 100
    gamma: float = 0.9
    alpha: float = 0.5
    eps_start: float = 0.1
    eps_end: float = 0.05
    q_init: float = 1.0  # optimistic: unvisited pairs look attractive until tried


def train_q_learning(env, cfg: QLearningConfig, seed):
    """Epsilon-greedy Q-learning with a linear epsilon decay. Episodes are
    truncated after ``max_steps`` without marking the transition terminal.

    Returns the table, per-(s, a) visit counts and per-episode log rows.
    """
    table = QTable(env.n_states, env.n_actions, cfg.gamma, cfg.alpha, cfg.q_init)
    visits = np.zeros_like(table.q, dtype=np.int64)
    log = []
    for ep in range(cfg.episodes):
        frac = ep / max(cfg.episodes - 1, 1)
        eps = cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac
        rng = RngStream(seed, ep)
        s = env.reset(rng)
        ret = 0.0
        steps = 0
        for steps in range(1, cfg.max_steps + 1):
            a = epsilon_greedy(table, s, eps, rng)
            s2, r, done = env.step(s, a, rng)
            q_update(table, s, a, r, s2, done)
            visits[s, a] += 1
            ret += r
            s = s2
            if done:
                break
        log.append({"episode": ep + 1, "epsilon": eps, "return": ret, "length": steps})
    return table, visits, log


def greedy_policy_matches(q, q_star, states, tol=1e-9):
    """True when, on every listed state, the greedy action of ``q`` is optimal under ``q_star``.

    Optimal actions form a tie set when Q* has equal entries; any member counts.
    Returns (ok, list of offending states).
    """
    bad = []
    for s in states:
        a = argmax_lowest(q[s])
        if q_star[s, a] < q_star[s].max() - tol:
            bad.append(s)
    return not bad, bad
