import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import multivariate_normal

from dynasub import numcore as nc
from dynasub import subgroup as sg

LOG2PI = math.log(2 * math.pi)
LAMBDAS = {"elbo": 1, "split": 3, "ent": 3, "usage": 0.5, "klb": 2, "aug": 0.1}


def _unit_mixture(k=1, d2=5):
    mix = sg.MixtureState(8, d2, k)
    mix.active[:k] = True
    return mix


def _random_mixture(rng, k=4, d2=5):
    mix = _unit_mixture(k, d2)
    mix.eta_mu.data[:k] = rng.normal(0, 2, size=(k, d2))
    mix.eta_log_sigma.data[:k] = rng.normal(0, 0.5, size=(k, d2))
    mix.raw_pi.data[:k] = rng.normal(size=k)
    return mix


def test_init_mixture_layout(rng):
    mix = sg.init_mixture(3, 5, rng)
    assert np.array_equal(mix.eta_mu.data[:3], np.repeat([[-1.0], [0.0], [1.0]], 5, axis=1))
    assert np.allclose(np.exp(mix.eta_log_sigma.data[:3]), 1.1)
    assert math.fsum(mix.priors().tolist()) == pytest.approx(1.0, abs=1e-12)
    assert mix.K == 3 and not mix.active[3:].any()
    with pytest.raises(ValueError):
        sg.init_mixture(1, 5, rng)


def test_cluster_head_shapes_and_eval(rng):
    head = sg.ClusterHead(rng=rng)
    H = rng.normal(size=(6, 80))
    mu, ls, Z = head.project(H)
    assert Z.shape == (6, 5) and np.array_equal(Z.data, mu.data)
    _, _, Zs = head.project(H, rng)
    assert not np.array_equal(Zs.data, mu.data)


def test_log_likelihood_at_mean():
    mix = _unit_mixture()
    ll = sg.log_component_likelihood(np.zeros((1, 5)), mix).data
    assert ll[0, 0] == pytest.approx(-2.5 * LOG2PI, abs=1e-12)
    assert ll[0, 0] == pytest.approx(-4.594, abs=1e-3)
    mix.eta_log_sigma.data[0] = math.log(2.0)
    assert sg.log_component_likelihood(np.zeros((1, 5)), mix).data[0, 0] < ll[0, 0]


def test_log_likelihood_matches_scipy(rng):
    for _ in range(20):
        mix = _random_mixture(rng)
        Z = rng.normal(0, 2, size=(10, 5))
        got = sg.log_component_likelihood(Z, mix).data
        for j, k in enumerate(mix.active_ids):
            cov = np.diag(np.exp(2 * mix.eta_log_sigma.data[k]))
            ref = multivariate_normal(mix.eta_mu.data[k], cov).logpdf(Z)
            assert np.allclose(got[:, j], ref, rtol=0, atol=1e-10)


def test_assign_single_and_symmetric(rng):
    mix = _unit_mixture(1)
    a = sg.assign(rng.normal(size=(4, 5)), mix)
    assert np.allclose(a.q, 1.0) and np.all(a.C == 0)
    mix = _unit_mixture(2, 1)
    mix.eta_mu.data[:2, 0] = [-1.0, 1.0]
    assert np.allclose(sg.assign(np.zeros((1, 1)), mix).q, 0.5)


def test_assign_no_active_components():
    with pytest.raises(nc.StateError):
        sg.assign(np.zeros((1, 5)), sg.MixtureState(4, 5, 2))


def test_q_rows_normalized_and_c_is_argmax(rng):
    for tau in (0.3, 1.0, 2.5):
        mix = _random_mixture(rng)
        a = sg.assign(rng.normal(0, 3, size=(50, 5)), mix, tau)
        assert np.all(np.abs(a.q.sum(axis=1) - 1) <= 1e-12)
        assert np.array_equal(a.C, mix.active_ids[np.argmax(a.log_post.data, axis=1)])


def test_raw_pi_shift_leaves_prior_and_q(rng):
    mix = _random_mixture(rng)
    Z = rng.normal(size=(20, 5))
    a0, p0 = sg.assign(Z, mix), mix.priors()
    mix.raw_pi.data[mix.active_ids] += 7.0
    a1 = sg.assign(Z, mix)
    assert np.allclose(mix.priors(), p0, atol=1e-15)
    assert np.allclose(a0.q, a1.q, atol=1e-12)
    assert np.array_equal(a0.C, a1.C)


def test_nll_and_kl_closed_forms(rng):
    mix = _unit_mixture()
    assert float(sg.nll_loss(sg.log_component_likelihood(np.zeros((1, 5)), mix), mix).data) == \
        pytest.approx(2.5 * LOG2PI, abs=1e-12)
    mix = _random_mixture(rng)
    lq = np.tile(np.log(mix.priors()[mix.active_ids]), (3, 1))
    assert float(sg.kl_assign_loss(lq, mix).data) == pytest.approx(0.0, abs=1e-12)


def test_kl_assign_nonnegative(rng):
    for _ in range(50):
        mix = _random_mixture(rng)
        a = sg.assign(rng.normal(0, 2, size=(8, 5)), mix, 0.7)
        assert float(sg.kl_assign_loss(a.log_q, mix).data) >= -1e-12


def test_nll_logsumexp_bracket(rng):
    # -max_k(l_k + log pi_k) - log K <= nll_i <= -max_k(l_k + log pi_k)
    for _ in range(20):
        mix = _random_mixture(rng)
        ll = sg.log_component_likelihood(rng.normal(0, 2, size=(1, 5)), mix)
        top = float(np.max(ll.data + np.log(mix.priors()[mix.active_ids])))
        v = float(sg.nll_loss(ll, mix).data)
        assert -top - math.log(mix.K) - 1e-12 <= v <= -top + 1e-12


def test_split_loss_cases(rng):
    Z = rng.normal(size=(40, 5))
    var_total = float(((Z - Z.mean(0)) ** 2).mean())
    one = np.zeros(40, int)
    assert float(sg.split_loss(Z, one, 0.5).data) == pytest.approx(0.5 * var_total, abs=1e-12)
    assert float(sg.split_loss(Z, one, 1e9).data) == 0.0
    tight = np.r_[rng.normal(0, 0.01, (20, 5)), rng.normal(0, 0.01, (20, 5)) + 10]
    assert float(sg.split_loss(tight, np.repeat([0, 1], 20), 0.5).data) == 0.0
    # singletons contribute nothing
    assert float(sg.split_loss(Z[:3], [0, 1, 2], 0.0).data) == 0.0


def test_entropy_usage_balance_cases():
    onehot = np.log(np.clip(np.eye(4), 1e-300, None))
    assert float(sg.entropy_loss(onehot).data) == pytest.approx(0.0, abs=1e-12)
    # one-hot rows spread over all four clusters give uniform usage
    assert float(sg.usage_entropy_loss(onehot).data) == pytest.approx(-math.log(4), abs=1e-7)
    assert float(sg.kl_balance_loss(onehot).data) == pytest.approx(0.0, abs=1e-12)
    skew = np.log(np.tile([0.7, 0.1, 0.1, 0.1], (3, 1)))
    assert float(sg.kl_balance_loss(skew).data) > 0
    assert float(sg.usage_entropy_loss(skew).data) > -math.log(4)


def test_aug_consistency_cases(rng):
    lq = np.log(np.tile([0.2, 0.8], (3, 1)))
    assert float(sg.aug_consistency_loss(lq, lq).data) == 0.0
    hot = np.log(np.array([[1.0, 1e-300]]))
    uni = np.log(np.array([[0.5, 0.5]]))
    assert float(sg.aug_consistency_loss(hot, uni).data) == pytest.approx(math.log(2), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-8, 8)),
       arrays(np.float64, (5, 3), elements=st.floats(-8, 8)))
def test_aug_consistency_nonnegative(a, b):
    la = np.asarray(nc.tlog_softmax(nc.Tensor(a), axis=1).data)
    lb = np.asarray(nc.tlog_softmax(nc.Tensor(b), axis=1).data)
    assert float(sg.aug_consistency_loss(la, lb).data) >= -1e-12


def test_aug_target_gets_no_gradient(rng):
    la = nc.Tensor(np.log(np.full((2, 2), 0.5)), True)
    lb = nc.Tensor(np.log(np.tile([0.3, 0.7], (2, 1))), True)
    nc.backward(sg.aug_consistency_loss(la, lb))
    assert la.grad is not None and (lb.grad is None or not np.any(lb.grad))


def test_subgroup_total_weights():
    zero = {k: 0.0 for k in sg.SUBGROUP_LOSSES}
    assert sg.subgroup_total(zero, LAMBDAS) == 0
    # the ELBO term (nll + kl) counts as one unit component
    unit = {"nll": 1.0, "kl": 0.0, "split": 1.0, "entropy": 1.0, "usage": 1.0, "kl_balance": 1.0, "aug": 1.0}
    assert sg.subgroup_total(unit, LAMBDAS) == pytest.approx(9.6)
    no_aug = dict(unit)
    del no_aug["aug"]
    assert sg.subgroup_total(no_aug, LAMBDAS) == pytest.approx(9.5)


def test_losses_finite_at_extremes(rng):
    mix = _random_mixture(rng)
    mix.eta_log_sigma.data[:4] = sg.LOG_SIGMA_FLOOR
    Z = rng.uniform(-1e3, 1e3, size=(6, 5))
    ll = sg.log_component_likelihood(Z, mix)
    a = sg.assign(Z, mix)
    for v in (sg.nll_loss(ll, mix), sg.kl_assign_loss(a.log_q, mix), sg.split_loss(Z, a.C, 0.5),
              sg.entropy_loss(a.log_q), sg.usage_entropy_loss(a.log_q), sg.kl_balance_loss(a.log_q),
              sg.aug_consistency_loss(a.log_q, a.log_q.data)):
        assert np.isfinite(float(v.data))


def test_clamp_floor():
    mix = _unit_mixture(2)
    mix.eta_log_sigma.data[:] = -50.0
    mix.clamp()
    assert np.all(mix.eta_log_sigma.data == sg.LOG_SIGMA_FLOOR)


def test_set_priors_inactive_mass(rng):
    mix = sg.init_mixture(3, 5, rng, capacity=10)
    mix.set_priors(np.r_[0.2, 0.3, 0.5, np.zeros(7)])
    assert np.allclose(mix.priors()[:3], [0.2, 0.3, 0.5], atol=1e-15)
    r = mix.raw_pi.data
    full = np.exp(r - r.max()) / np.exp(r - r.max()).sum()
    assert np.all(full[3:] <= 1e-5)


def test_mixture_state_round_trip(rng):
    mix = _random_mixture(rng)
    back = mix.copy()
    for k, v in mix.state().items():
        assert np.array_equal(back.state()[k], v)
