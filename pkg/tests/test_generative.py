import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qflrl import generative as g
from qflrl.numkit import RngStream


def random_rbm(seed, n_v=3, n_h=2, scale=1.0):
    r = RngStream(seed)
    return g.RBMParams(r.normal(0, scale, n_v), r.normal(0, scale, n_h), r.normal(0, scale, (n_v, n_h)))


def test_binary_enumeration_order():
    v = g.all_binary(3)
    assert v[0].tolist() == [0, 0, 0] and v[6].tolist() == [1, 1, 0]
    assert np.array_equal(g.binary_index(v), np.arange(8))


@given(st.integers(0, 2**32))
def test_conditionals_match_enumeration(seed):
    p = random_rbm(seed)
    joint = g.exact_joint(p)  # rows v, columns h
    V, H = g.all_binary(p.n_v), g.all_binary(p.n_h)
    for i, v in enumerate(V):
        ph_v = joint[i] / joint[i].sum()
        marg = H.T @ ph_v  # P(h_j = 1 | v)
        assert np.allclose(g.cond_prob_h(p, v), marg, atol=1e-12)
    for j, h in enumerate(H):
        pv_h = joint[:, j] / joint[:, j].sum()
        assert np.allclose(g.cond_prob_v(p, h), V.T @ pv_h, atol=1e-12)


@given(st.integers(0, 2**32))
def test_visible_marginal_sums_joint(seed):
    p = random_rbm(seed, 4, 3)
    assert np.allclose(g.exact_joint(p).sum(axis=1), g.exact_distribution(p), atol=1e-14)


@given(st.integers(0, 2**32))
def test_gibbs_kernel_detailed_balance(seed):
    """The v -> h -> v' kernel T satisfies P(v) T(v'|v) = P(v') T(v|v') exactly."""
    p = random_rbm(seed)
    V, H = g.all_binary(p.n_v), g.all_binary(p.n_h)
    pv = g.exact_distribution(p)

    def prob_of(bits, probs):
        return np.prod(np.where(bits == 1, probs, 1 - probs), axis=-1)

    ph_given_v = np.array([prob_of(H, g.cond_prob_h(p, v)) for v in V])    # (nV, nH)
    pv_given_h = np.array([prob_of(V, g.cond_prob_v(p, h)) for h in H])    # (nH, nV)
    kernel = ph_given_v @ pv_given_h                                        # T[v, v']
    flow = pv[:, None] * kernel
    assert np.allclose(flow, flow.T, atol=1e-15)
    assert np.allclose(kernel.sum(axis=1), 1.0)


def test_gibbs_chain_samples_stationary_distribution():
    p = random_rbm(3)
    vs, hs = g.gibbs_chain(p, np.zeros(3, int), 40_000, RngStream(0))
    assert vs.shape == (40_001, 3) and hs.shape == (40_000, 2)
    freq = np.bincount(g.binary_index(vs[1000:]), minlength=8) / len(vs[1000:])
    assert np.max(np.abs(freq - g.exact_distribution(p))) < 0.02


@given(st.integers(0, 2**32))
def test_exact_gradient_matches_finite_differences(seed):
    p = random_rbm(seed, 3, 2, 0.7)
    p0 = g.two_peak_target()
    da, db, dw = g.exact_gradient(p, p0)
    h = 1e-6

    def ll(q):
        return -g.rbm_cross_entropy(p0, q)

    for name, grad in (("a", da), ("b", db), ("w", dw)):
        arr = getattr(p, name)
        for idx in np.ndindex(arr.shape):
            up, dn = p.copy(), p.copy()
            getattr(up, name)[idx] += h
            getattr(dn, name)[idx] -= h
            assert math.isclose(grad[idx], (ll(up) - ll(dn)) / (2 * h), abs_tol=1e-7)


def test_cd1_update_is_deterministic_and_ascends_on_average():
    p = random_rbm(1, 3, 3, 0.1)
    p0 = g.two_peak_target()
    batch = g.all_binary(3)[np.repeat(np.arange(8), (p0 * 800).astype(int))]
    s1 = g.cd1_statistics(p, batch, RngStream(4))
    s2 = g.cd1_statistics(p, batch, RngStream(4))
    assert all(np.array_equal(x, y) for x, y in zip(s1, s2))
    before = g.rbm_cross_entropy(p0, p)
    after = g.rbm_cross_entropy(p0, g.cd1_update(p, batch, 0.2, RngStream(5)))
    assert after < before


def test_rbm_input_validation():
    with pytest.raises(ValueError):
        g.RBMParams(np.zeros(2), np.zeros(3), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        g.cond_prob_h(g.RBMParams.zeros(2, 1), np.array([0, 2]))
    with pytest.raises(ValueError):
        g.two_peak_target(peak_mass=0.6)
    p = random_rbm(0)
    assert np.allclose(g.RBMParams.from_dict(p.to_dict()).w, p.w)


def test_energy_by_hand():
    p = g.RBMParams([1.0, -1.0], [0.5], [[2.0], [3.0]])
    assert g.rbm_energy(p, np.array([1, 1]), np.array([1])) == -(1 - 1 + 0.5 + 5)


# ------------------------------------------------------------------------ QBM

@pytest.mark.parametrize("labels", [("Z",), ("Z", "X"), g.TWO_QUBIT_BASIS, ("XY", "YZ", "ZX", "II")])
def test_qbm_gradient_matches_finite_differences(labels):
    r = RngStream(len(labels))
    target = g.qbm_state(g.QBMModel.from_labels(labels, r.normal(size=len(labels))))
    # mix in a state outside the model family so the gradient is not trivially zero
    rho = 0.7 * target + 0.3 * np.eye(target.shape[0]) / target.shape[0]
    model = g.QBMModel.from_labels(labels, r.normal(size=len(labels)))
    grad = g.qbm_gradient(model, rho)
    h = 1e-6
    for j in range(len(labels)):
        wp, wm = model.w.copy(), model.w.copy()
        wp[j] += h
        wm[j] -= h
        sp = g.relative_entropy(rho, g.qbm_state(g.QBMModel(model.basis, wp)))
        sm = g.relative_entropy(rho, g.qbm_state(g.QBMModel(model.basis, wm)))
        assert abs(grad[j] - (sp - sm) / (2 * h)) < 1e-6


def test_basis_is_non_commuting():
    zi, xi = g.pauli_string("ZI"), g.pauli_string("XI")
    assert not np.allclose(zi @ xi, xi @ zi)


@given(st.floats(-3, 3))
def test_single_qubit_closed_form(w):
    sigma = g.qbm_state(g.QBMModel.from_labels(("Z",), [w]))
    assert math.isclose(np.trace(sigma @ g.PAULI["Z"]).real, -math.tanh(w), abs_tol=1e-12)


def test_relative_entropy_properties():
    rho = g.qbm_state(g.QBMModel.from_labels(("Z", "X"), [0.3, -0.4]))
    assert abs(g.relative_entropy(rho, rho)) < 1e-12
    assert g.relative_entropy(rho, np.eye(2) / 2) > 0
    pure = np.diag([1.0, 0.0]).astype(complex)
    assert math.isclose(g.relative_entropy(pure, np.eye(2) / 2), math.log(2), rel_tol=1e-12)
    with pytest.raises(ValueError):
        g.relative_entropy(rho, pure)


def test_qbm_training_reaches_target():
    w_true = RngStream(0).normal(size=len(g.TWO_QUBIT_BASIS))
    rho = g.qbm_state(g.QBMModel.from_labels(g.TWO_QUBIT_BASIS, w_true))
    model, log = g.train_qbm(g.QBMModel.from_labels(g.TWO_QUBIT_BASIS), rho, g.QBMTrainConfig())
    assert log[-1]["relative_entropy"] < 1e-3
    assert np.allclose(model.w, w_true, atol=1e-3)
