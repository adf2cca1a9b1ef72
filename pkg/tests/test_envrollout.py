import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from npgbench import envrollout
from npgbench.envrollout import (
    LQREnv,
    RolloutBatch,
    collect,
    compute_gae,
    discounted_return,
    make_env,
    riccati_expected_return,
    riccati_gain,
    riccati_policy_return,
    standardize,
)
from npgbench.policy import GaussianPolicy


def gae_brute_force(rewards, values, terminals, bootstrap_value, gamma, lam):
    """Double-loop reference: advantages as explicit truncated sums of deltas."""
    m = len(rewards)
    deltas = np.empty(m)
    for t in range(m):
        if terminals[t]:
            next_v = 0.0
        elif t == m - 1:
            next_v = bootstrap_value
        else:
            next_v = values[t + 1]
        deltas[t] = rewards[t] + gamma * next_v - values[t]
    adv = np.zeros(m)
    for t in range(m):
        coef = 1.0
        for u in range(t, m):
            adv[t] += coef * deltas[u]
            if terminals[u]:
                break
            coef *= gamma * lam
    return adv


def random_batch(rng, m):
    terminals = rng.random(m) < 0.15
    return RolloutBatch(
        states=rng.standard_normal((m, 2)),
        actions=rng.standard_normal((m, 1)),
        rewards=rng.standard_normal(m),
        terminals=terminals,
        log_probs=rng.standard_normal(m),
        values=rng.standard_normal(m),
        bootstrap_value=float(rng.standard_normal()),
        episode_returns=[],
    )


def test_lqr_dynamics_match_matrix_oracle():
    env = make_env("lqr")
    rng = np.random.default_rng(0)
    x = env.reset(rng)
    u = np.array([0.7])
    next_obs, reward, done = env.step(u)
    assert np.allclose(next_obs, env.A @ x + env.B @ u, atol=1e-12)
    assert np.isclose(reward, -(x @ env.Q @ x + u @ env.R @ u), atol=1e-12)
    assert not done


def test_lqr_origin_fixed_point():
    env = make_env("lqr")
    env.state = np.zeros(2)
    env.t = 0
    next_obs, reward, done = env.step(np.zeros(1))
    assert np.array_equal(next_obs, np.zeros(2))
    assert reward == 0.0


def test_lqr_horizon_terminates():
    env = make_env("lqr")
    rng = np.random.default_rng(1)
    env.reset(rng)
    done = False
    steps = 0
    while not done:
        _, _, done = env.step(np.zeros(1))
        steps += 1
    assert steps == env.spec.max_episode_len


def test_lqr_bound_terminates_early():
    env = make_env("lqr")
    env.reset(np.random.default_rng(2))
    env.state = np.array([0.0, 999.0])  # next step exceeds the state bound
    _, _, done = env.step(np.zeros(1))
    assert done


def test_action_clipping_before_dynamics():
    env = make_env("lqr")
    env.reset(np.random.default_rng(3))
    start = env.state.copy()
    _, r_huge, _ = env.step(np.array([1e6]))
    after_huge = env.state.copy()
    env.state = start
    env.t = 0
    _, r_clip, _ = env.step(np.array([env.spec.action_clip]))
    assert np.array_equal(after_huge, env.state)
    assert r_huge == r_clip


def test_make_env_rejects_unknown():
    with pytest.raises(ValueError, match="unknown environment"):
        make_env("cartpole")


@pytest.mark.parametrize("name", ["lqr", "pointmass", "pendulum"])
def test_env_shapes_and_determinism(name):
    env_a, env_b = make_env(name), make_env(name)
    obs_a = env_a.reset(np.random.default_rng(7))
    obs_b = env_b.reset(np.random.default_rng(7))
    assert obs_a.shape == (env_a.spec.obs_dim,)
    assert np.array_equal(obs_a, obs_b)
    action = 0.3 * np.ones(env_a.spec.act_dim)
    for _ in range(5):
        step_a = env_a.step(action)
        step_b = env_b.step(action)
        assert np.array_equal(step_a[0], step_b[0])
        assert step_a[1] == step_b[1]
        assert step_a[2] == step_b[2]


def test_pendulum_observation_on_circle():
    env = make_env("pendulum")
    env.reset(np.random.default_rng(4))
    for _ in range(50):
        obs, reward, _ = env.step(np.array([1.0]))
        assert np.isclose(obs[0] ** 2 + obs[1] ** 2, 1.0, atol=1e-12)
        assert reward <= 0.0
        assert abs(obs[2]) <= env.max_speed


def test_collect_exact_size_and_determinism():
    env = make_env("lqr")
    pol = GaussianPolicy.create(2, 1, seed=0)
    batch_a = collect(make_env("lqr"), pol, None, batch_size=137, seed=5)
    batch_b = collect(make_env("lqr"), pol, None, batch_size=137, seed=5)
    assert batch_a.size == 137
    assert np.array_equal(batch_a.states, batch_b.states)
    assert np.array_equal(batch_a.actions, batch_b.actions)
    assert np.array_equal(batch_a.rewards, batch_b.rewards)
    assert batch_a.episode_returns == batch_b.episode_returns
    batch_c = collect(env, pol, None, batch_size=137, seed=6)
    assert not np.array_equal(batch_a.actions, batch_c.actions)


def test_collect_batch_of_one():
    pol = GaussianPolicy.create(2, 1, seed=1)
    batch = collect(make_env("lqr"), pol, None, batch_size=1, seed=0)
    assert batch.size == 1
    assert batch.episode_returns == []


def test_collect_rejects_nonpositive_batch():
    pol = GaussianPolicy.create(2, 1, seed=1)
    with pytest.raises(ValueError, match="positive"):
        collect(make_env("lqr"), pol, None, batch_size=0, seed=0)


def test_collect_episode_returns_partition_rewards():
    pol = GaussianPolicy.create(2, 1, seed=2)
    batch = collect(make_env("lqr"), pol, None, batch_size=170, seed=9)
    ends = np.flatnonzero(batch.terminals)
    assert len(batch.episode_returns) == len(ends)
    start = 0
    for ret, end in zip(batch.episode_returns, ends):
        assert np.isclose(ret, batch.rewards[start : end + 1].sum(), atol=1e-12)
        start = end + 1


def test_collect_logprobs_match_policy():
    from npgbench.policy import log_prob

    pol = GaussianPolicy.create(2, 1, seed=3)
    batch = collect(make_env("lqr"), pol, None, batch_size=60, seed=1)
    expected = log_prob(pol.dist(batch.states), batch.actions)
    assert np.allclose(batch.log_probs, expected, atol=1e-12)


def test_collect_records_critic_values():
    pol = GaussianPolicy.create(2, 1, seed=4)
    value_fn = lambda s: s[:, 0] * 2.0
    batch = collect(make_env("lqr"), pol, value_fn, batch_size=30, seed=2)
    assert np.allclose(batch.values, batch.states[:, 0] * 2.0, atol=1e-12)


def test_gae_gamma_zero_reduces_to_residuals():
    rng = np.random.default_rng(10)
    batch = random_batch(rng, 20)
    compute_gae(batch, gamma=0.0, lam=0.7, bootstrap_value=batch.bootstrap_value)
    assert np.allclose(batch.advantages, batch.rewards - batch.values, atol=1e-12)
    assert np.allclose(batch.returns, batch.rewards, atol=1e-12)


def test_gae_lambda_one_is_discounted_return_minus_value():
    rng = np.random.default_rng(11)
    m = 12
    batch = random_batch(rng, m)
    batch.terminals[:] = False
    batch.terminals[-1] = True
    gamma = 0.9
    compute_gae(batch, gamma=gamma, lam=1.0, bootstrap_value=0.0)
    expected = discounted_return(batch.rewards, gamma) - batch.values
    assert np.allclose(batch.advantages, expected, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 100_000),
    m=st.integers(1, 64),
    gamma=st.floats(0.0, 1.0),
    lam=st.floats(0.0, 1.0),
)
def test_gae_matches_brute_force(seed, m, gamma, lam):
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, m)
    compute_gae(batch, gamma=gamma, lam=lam, bootstrap_value=batch.bootstrap_value)
    expected = gae_brute_force(
        batch.rewards, batch.values, batch.terminals, batch.bootstrap_value, gamma, lam
    )
    assert np.allclose(batch.advantages, expected, atol=1e-10)
    assert np.allclose(batch.returns, batch.advantages + batch.values, atol=1e-12)


def test_gae_requires_values():
    rng = np.random.default_rng(12)
    batch = random_batch(rng, 5)
    batch.values = None
    with pytest.raises(ValueError, match="values"):
        compute_gae(batch, 0.99, 0.95, 0.0)


def test_discounted_return_hand_case():
    # gamma 0.5, rewards (1, 1, 1): 1 + 0.5 (1 + 0.5) = 1.75
    assert np.allclose(discounted_return([1.0, 1.0, 1.0], 0.5), [1.75, 1.5, 1.0])


def test_standardize_moments():
    rng = np.random.default_rng(13)
    x = standardize(rng.standard_normal(500) * 3.0 + 2.0)
    assert abs(x.mean()) < 1e-12
    assert np.isclose(x.std(), 1.0, atol=1e-6)


def test_riccati_gain_stabilizes():
    env = LQREnv()
    gain = riccati_gain(env)
    closed_loop = env.A - env.B @ gain
    assert np.max(np.abs(np.linalg.eigvals(closed_loop))) < 1.0


def test_riccati_expected_return_matches_monte_carlo():
    env = LQREnv()
    exact = riccati_expected_return(env)
    sampled = riccati_policy_return(env, n_episodes=4000, seed=3)
    # 4000 episodes put the sample mean within ~0.15 of the exact value
    assert abs(exact - sampled) < 0.2
    # horizon 50 has effectively converged to the infinite-horizon solution
    s = scipy.linalg.solve_discrete_are(env.A, env.B, env.Q, env.R)
    assert abs(exact + np.trace(s) / 3.0) < 1e-3


def test_riccati_return_beats_detuned_gain():
    env = LQREnv()
    optimal = riccati_policy_return(env, n_episodes=40, seed=0)
    gain = riccati_gain(env)
    rng = np.random.default_rng(0)
    detuned_totals = []
    for _ in range(40):
        x = env.reset(rng)
        total, done = 0.0, False
        while not done:
            x, reward, done = env.step(-0.3 * gain @ x)
            total += reward
        detuned_totals.append(total)
    assert optimal > np.mean(detuned_totals)
    assert optimal < 0.0
