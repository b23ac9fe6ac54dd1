import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qflrl import rl
from qflrl.numkit import RngStream


def exact_walker_gradient(theta, T):
    """E[R d ln p(tau)/d theta] by enumerating all 2^T action sequences."""
    p = rl.sigmoid(theta)
    total = 0.0
    for seq in itertools.product((1, -1), repeat=T):
        prob = math.prod(p if a == 1 else 1 - p for a in seq)
        score = sum(rl.walker_logpolicy_grad(theta, a) for a in seq)
        total += prob * sum(seq) * score
    return total


@given(st.floats(-4, 4), st.integers(1, 8), st.floats(1e-3, 0.5))
def test_walker_closed_form_matches_enumeration(theta, T, eta):
    assert math.isclose(rl.walker_analytic_update(eta, T, theta), eta * exact_walker_gradient(theta, T),
                        rel_tol=1e-9, abs_tol=1e-12)


@given(st.floats(-5, 5), st.sampled_from([0, 1]), st.sampled_from([0, 1]))
def test_sigmoid_policy_score_matches_finite_difference(theta, base, action):
    pol = rl.SigmoidPolicy(1, [base], [theta])
    h = 1e-6
    up = rl.SigmoidPolicy(1, [base], [theta + h]).probs(0)[action]
    dn = rl.SigmoidPolicy(1, [base], [theta - h]).probs(0)[action]
    fd = (math.log(up) - math.log(dn)) / (2 * h)
    assert math.isclose(pol.grad_log(0, action)[0], fd, rel_tol=1e-5, abs_tol=1e-7)


def test_grad_log_sum_accumulates_per_observation():
    pol = rl.SigmoidPolicy(2, [0, 1], [0.3, -0.2])
    states, actions = [0, 1, 0, 1], [0, 0, 1, 1]
    expect = sum(pol.grad_log(s, a) for s, a in zip(states, actions))
    assert np.allclose(pol.grad_log_sum(states, actions), expect)


def test_sigmoid_is_overflow_safe():
    assert rl.sigmoid(-1000.0) == 0.0 and rl.sigmoid(1000.0) == 1.0


def test_walker_reward_is_terminal_position():
    env = rl.WalkerEnv(T=3)
    pol = rl.GreedyTablePolicy([0], 2)  # always +1
    traj = rl.sample_trajectory(env, pol, 3, RngStream(0))
    assert traj.rewards == [0.0, 0.0, 3.0] and traj.ret == 3.0


def test_walker_target_rewards_time_on_target():
    env = rl.WalkerTargetEnv(x_max=1, T=5)  # target is always x* = 1
    pol = rl.SigmoidPolicy(2, [0, 1], [50.0, 50.0])  # move off target, stay on it
    traj = rl.sample_trajectory(env, pol, 5, RngStream(0))
    assert traj.ret == 5.0
    assert traj.states == [0, 1, 1, 1, 1]


def test_baseline_removes_common_return():
    pol = rl.SigmoidPolicy(1, [0])
    trajs = [rl.Trajectory([0, 0], [0, 1], [0.0, 2.0]), rl.Trajectory([0, 0], [0, 0], [1.0, 1.0])]
    pol, diag = rl.policy_gradient_update(trajs, pol, 0.1, "batch_mean")
    assert pol.theta[0] == 0.0 and diag["grad_norm"] == 0.0
    with pytest.raises(ValueError):
        rl.policy_gradient_update([], pol, 0.1)
    with pytest.raises(ValueError):
        rl.policy_gradient_update(trajs, pol, 0.1, "other")


def test_training_is_deterministic():
    def run():
        return rl.train_policy_gradient(rl.WalkerEnv(4), rl.SigmoidPolicy(1, [0]), 4, 3, 20, 0.05, seed=9)
    assert run() == run()


def test_walker_learns_to_go_right():
    pol = rl.SigmoidPolicy(1, [0])
    rl.train_policy_gradient(rl.WalkerEnv(5), pol, 5, 4, 400, 0.02, seed=1)
    assert rl.sigmoid(pol.theta[0]) > 0.95


@given(st.integers(2, 7), st.floats(0.1, 0.95))
def test_chain_value_iteration_closed_form(length, gamma):
    env = rl.ChainEnv(length)
    q = rl.value_iteration_oracle(env, gamma)
    v = q.max(axis=1)
    for s in range(length):
        assert math.isclose(v[s], gamma ** (length - 1 - s), rel_tol=1e-9)


def test_gridworld_optimal_value_is_discounted_shortest_path():
    env = rl.GridworldBoxEnv(4, 4, boxes=((3, 3),), start=(0, 0), walls=((1, 1),))
    q = rl.value_iteration_oracle(env, 0.9)
    assert math.isclose(q[env.reset()].max(), 0.9 ** 5, rel_tol=1e-10)  # 6 moves, reward on the last


def test_gridworld_two_boxes_and_walls():
    env = rl.GridworldBoxEnv(3, 3, boxes=((0, 2), (2, 0)), start=(0, 0))
    s = env.reset()
    assert env.decode(s) == ((0, 0), 3)
    s, r, done = env.step(s, 3)  # east
    s, r, done = env.step(s, 3)
    assert r == 1.0 and not done and env.decode(s) == ((0, 2), 2)
    s2, r, _ = env.step(s, 0)  # north into the edge
    assert s2 == s and r == 0.0
    with pytest.raises(ValueError):
        rl.GridworldBoxEnv(3, 3, boxes=((5, 5),))
    with pytest.raises(ValueError):
        rl.GridworldBoxEnv(3, 3, boxes=((1, 1),), walls=((1, 1),))


def test_q_update_rule():
    t = rl.QTable(3, 2, gamma=0.5, alpha=0.5)
    t.q[1] = [2.0, 4.0]
    rl.q_update(t, 0, 1, 1.0, 1, False)
    assert t.q[0, 1] == 0.5 * (1.0 + 0.5 * 4.0)
    rl.q_update(t, 0, 0, 1.0, 1, True)  # terminal: no bootstrap
    assert t.q[0, 0] == 0.5
    with pytest.raises(ValueError):
        rl.QTable(2, 2, gamma=1.0)
    with pytest.raises(IndexError):
        rl.q_update(t, 5, 0, 0.0, 0, False)


def test_epsilon_greedy_extremes():
    t = rl.QTable(1, 3)
    t.q[0] = [0.0, 1.0, 0.5]
    rng = RngStream(0)
    assert all(rl.epsilon_greedy(t, 0, 0.0, rng) == 1 for _ in range(20))
    picks = {rl.epsilon_greedy(t, 0, 1.0, rng) for _ in range(200)}
    assert picks == {0, 1, 2}
    with pytest.raises(ValueError):
        rl.epsilon_greedy(t, 0, 1.5, rng)


def test_q_learning_on_chain_converges():
    env = rl.ChainEnv(4)
    cfg = rl.QLearningConfig(episodes=400, max_steps=30, gamma=0.8)
    table, visits, log = rl.train_q_learning(env, cfg, seed=0)
    q_star = rl.value_iteration_oracle(env, 0.8)
    ok, bad = rl.greedy_policy_matches(table.q, q_star, range(4))
    assert ok, bad
    seen = visits >= 30
    assert np.max(np.abs(table.q - q_star)[seen]) < 1e-3


def test_greedy_match_accepts_ties():
    q_star = np.array([[1.0, 1.0, 0.0]])
    assert rl.greedy_policy_matches(np.array([[0.2, 0.9, 0.0]]), q_star, [0])[0]
    assert not rl.greedy_policy_matches(np.array([[0.2, 0.1, 0.9]]), q_star, [0])[0]
