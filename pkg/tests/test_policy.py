import math

import numpy as np
import pytest
import scipy.integrate
from hypothesis import given, settings, strategies as st

from npgbench import net
from npgbench.policy import (
    DistParams,
    GaussianPolicy,
    kl_diag_gauss,
    log_prob,
    policy_kl,
    sample_actions,
)


def make_policy(rng, obs_dim=2, hidden=3, act_dim=1, log_std_scale=0.3):
    mean_net = net.init_network((obs_dim, hidden, act_dim), seed=int(rng.integers(0, 2**31)))
    for layer in mean_net.layers:
        layer.weight += 0.2 * rng.standard_normal(layer.weight.shape)
        layer.bias += 0.2 * rng.standard_normal(layer.bias.shape)
    return GaussianPolicy(mean_net, log_std_scale * rng.standard_normal(act_dim))


def test_log_prob_standard_normal_at_mean():
    dist = DistParams(mean=np.zeros((1, 1)), log_std=np.zeros(1))
    assert np.isclose(log_prob(dist, np.zeros((1, 1)))[0], -0.9189385332046727, atol=1e-12)


def test_log_prob_sums_over_dims():
    dist = DistParams(mean=np.zeros((1, 3)), log_std=np.zeros(3))
    assert np.isclose(log_prob(dist, np.zeros((1, 3)))[0], 3 * -0.5 * math.log(2 * math.pi))


def test_log_prob_matches_quadrature_normalizer():
    # Normalization constant recovered by numeric quadrature per dimension,
    # independent of the closed-form -log_std - log(2 pi)/2 term.
    rng = np.random.default_rng(4)
    mean = rng.standard_normal((1, 3))
    log_std = 0.5 * rng.standard_normal(3)
    action = rng.standard_normal((1, 3))
    dist = DistParams(mean=mean, log_std=log_std)
    expected = 0.0
    for k in range(3):
        sigma = math.exp(log_std[k])
        unnorm = lambda x, mu=mean[0, k], s=sigma: math.exp(-0.5 * ((x - mu) / s) ** 2)
        z_k, _ = scipy.integrate.quad(unnorm, -np.inf, np.inf)
        expected += -0.5 * ((action[0, k] - mean[0, k]) / sigma) ** 2 - math.log(z_k)
    assert np.isclose(log_prob(dist, action)[0], expected, atol=1e-6)


def test_kl_unit_mean_shift():
    p = DistParams(mean=np.zeros((1, 1)), log_std=np.zeros(1))
    q = DistParams(mean=np.ones((1, 1)), log_std=np.zeros(1))
    assert np.isclose(kl_diag_gauss(p, q), 0.5, atol=1e-12)


def test_kl_self_is_zero_and_nonnegative():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = DistParams(mean=rng.standard_normal((4, 2)), log_std=0.4 * rng.standard_normal(2))
        q = DistParams(mean=rng.standard_normal((4, 2)), log_std=0.4 * rng.standard_normal(2))
        assert kl_diag_gauss(p, p) == 0.0
        assert kl_diag_gauss(p, q) >= 0.0


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(6)
    p = DistParams(mean=np.array([[0.3, -0.2]]), log_std=np.array([0.1, -0.3]))
    q = DistParams(mean=np.array([[-0.1, 0.4]]), log_std=np.array([-0.2, 0.2]))
    n = 1_000_000
    z = rng.standard_normal((n, 2))
    samples = p.mean[0] + p.std * z
    diffs = (
        log_prob(DistParams(mean=np.tile(p.mean, (n, 1)), log_std=p.log_std), samples)
        - log_prob(DistParams(mean=np.tile(q.mean, (n, 1)), log_std=q.log_std), samples)
    )
    mc = diffs.mean()
    se = diffs.std(ddof=1) / math.sqrt(n)
    assert abs(kl_diag_gauss(p, q) - mc) <= 3.0 * se


def test_sample_actions_seeded_and_scaled():
    dist = DistParams(mean=np.full((3, 2), 1.5), log_std=np.log(np.array([0.5, 2.0])))
    a = sample_actions(dist, seed=7)
    b = sample_actions(dist, seed=7)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample_actions(dist, seed=8))
    # Zero std collapses to the mean.
    tight = DistParams(mean=dist.mean, log_std=np.full(2, -np.inf))
    assert np.allclose(sample_actions(tight, seed=0), dist.mean)


def test_sample_actions_moments():
    dist = DistParams(mean=np.zeros((200_000, 1)), log_std=np.array([math.log(0.7)]))
    draws = sample_actions(dist, seed=3)
    assert abs(draws.mean()) < 0.01
    assert abs(draws.std() - 0.7) < 0.01


def test_flatten_round_trip_includes_log_std():
    rng = np.random.default_rng(8)
    pol = make_policy(rng, act_dim=2)
    flat = pol.flatten()
    assert flat.shape == (pol.n_params,)
    rebuilt = pol.with_flat(flat)
    assert np.array_equal(rebuilt.flatten(), flat)
    assert np.array_equal(rebuilt.log_std, pol.log_std)
    bumped = pol.with_flat(flat + 1.0)
    assert np.allclose(bumped.log_std, pol.log_std + 1.0)


def test_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    pol = make_policy(rng, act_dim=2)
    path = tmp_path / "policy.txt"
    pol.save(path)
    loaded = GaussianPolicy.load(path)
    assert np.array_equal(loaded.flatten(), pol.flatten())


def test_curvature_cache_row_layout():
    rng = np.random.default_rng(10)
    pol = make_policy(rng, obs_dim=2, act_dim=2)
    states = rng.standard_normal((5, 2))
    cache = pol.curvature_cache(states)
    assert cache.complete
    assert cache.rows == 10  # batch tiled once per action dim
    # Tiled replicas see identical inputs.
    assert np.array_equal(cache.input_activations[0][:5], cache.input_activations[0][5:])


def test_fvp_is_symmetric_and_damping_is_additive():
    rng = np.random.default_rng(11)
    pol = make_policy(rng, obs_dim=2, hidden=4, act_dim=2)
    states = rng.standard_normal((6, 2))
    u = rng.standard_normal(pol.n_params)
    v = rng.standard_normal(pol.n_params)
    fu = pol.fvp(states, u)
    fv = pol.fvp(states, v)
    assert np.isclose(u @ fv, v @ fu, rtol=1e-10)
    damped = pol.fvp(states, v, damping=0.3)
    assert np.allclose(damped, fv + 0.3 * v, atol=1e-12)
    # log_std block of the Fisher is exactly 2 I.
    e_logstd = np.zeros(pol.n_params)
    e_logstd[-1] = 1.0
    assert np.allclose(pol.fvp(states, e_logstd), 2.0 * e_logstd, atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_kl_quadratic_in_fisher_metric(seed):
    # kl(theta, theta + eps d) = eps^2/2 d^T F d + o(eps^2)
    rng = np.random.default_rng(seed)
    pol = make_policy(rng, obs_dim=2, hidden=3, act_dim=1)
    states = rng.standard_normal((8, 2))
    direction = rng.standard_normal(pol.n_params)
    direction /= np.linalg.norm(direction)
    quad = float(direction @ pol.fvp(states, direction))
    theta = pol.flatten()
    for eps in (1e-2, 1e-3):
        kl_plus = policy_kl(pol, pol.with_flat(theta + eps * direction), states)
        kl_minus = policy_kl(pol, pol.with_flat(theta - eps * direction), states)
        fd = (kl_plus + kl_minus) / eps**2
        assert fd == pytest.approx(quad, rel=0.05)


def test_policy_rejects_mismatched_log_std():
    mean_net = net.init_network((2, 3, 2), seed=0)
    with pytest.raises(ValueError, match="log_std"):
        GaussianPolicy(mean_net, np.zeros(3))
