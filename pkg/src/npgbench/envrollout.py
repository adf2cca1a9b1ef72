"""Environments, batch collection, and advantage estimation.

Three small control tasks with cheap, fully deterministic dynamics:

  lqr        2-d linear system with quadratic cost; the discrete Riccati
             solution gives an exact performance oracle.
  pointmass  planar double integrator with a distance penalty.
  pendulum   torque-limited swing-up on a 3-d (cos, sin, thetadot) observation.

Episodes end at the horizon or when the env-specific state bound is exceeded;
both count as terminal for advantage estimation.  Actions are clipped to the
spec range before they touch the dynamics; the batch stores the unclipped
sample so likelihoods stay consistent with the sampler.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .policy import log_prob, sample_actions_rng


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    max_episode_len: int
    action_clip: float


class LQREnv:
    """x' = A x + B u with reward -(x^T Q x + u^T R u)."""

    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.0], [0.1]])
    Q = np.diag([1.0, 0.1])
    R = np.array([[0.1]])
    state_bound = 100.0

    spec = EnvSpec(name="lqr", obs_dim=2, act_dim=1, max_episode_len=50, action_clip=8.0)

    def __init__(self):
        self.state = np.zeros(2)
        self.t = 0

    def reset(self, rng):
        self.state = rng.uniform(-1.0, 1.0, size=2)
        self.t = 0
        return self.state.copy()

    def step(self, action):
        u = np.clip(np.asarray(action, dtype=np.float64), -self.spec.action_clip, self.spec.action_clip)
        x = self.state
        reward = -float(x @ self.Q @ x + u @ self.R @ u)
        self.state = self.A @ x + self.B @ u
        self.t += 1
        done = self.t >= self.spec.max_episode_len or bool(
            np.max(np.abs(self.state)) > self.state_bound
        )
        return self.state.copy(), reward, done


class PointMassEnv:
    """Double integrator in the plane, penalized by squared distance to the origin."""

    dt = 0.1
    state_bound = 50.0

    spec = EnvSpec(name="pointmass", obs_dim=4, act_dim=2, max_episode_len=60, action_clip=5.0)

    def __init__(self):
        self.state = np.zeros(4)  # (px, py, vx, vy)
        self.t = 0

    def reset(self, rng):
        pos = rng.uniform(-1.0, 1.0, size=2)
        self.state = np.concatenate([pos, np.zeros(2)])
        self.t = 0
        return self.state.copy()

    def step(self, action):
        a = np.clip(np.asarray(action, dtype=np.float64), -self.spec.action_clip, self.spec.action_clip)
        pos, vel = self.state[:2], self.state[2:]
        reward = -float(pos @ pos + 0.05 * (a @ a))
        pos = pos + self.dt * vel
        vel = vel + self.dt * a
        self.state = np.concatenate([pos, vel])
        self.t += 1
        done = self.t >= self.spec.max_episode_len or bool(
            np.max(np.abs(self.state)) > self.state_bound
        )
        return self.state.copy(), reward, done


class PendulumEnv:
    """Torque-limited swing-up; observation is (cos theta, sin theta, thetadot)."""

    dt = 0.05
    gravity = 10.0
    mass = 1.0
    length = 1.0
    max_speed = 8.0

    spec = EnvSpec(name="pendulum", obs_dim=3, act_dim=1, max_episode_len=200, action_clip=2.0)

    def __init__(self):
        self.theta = 0.0
        self.thetadot = 0.0
        self.t = 0

    def _obs(self):
        return np.array([math.cos(self.theta), math.sin(self.theta), self.thetadot])

    def reset(self, rng):
        self.theta = float(rng.uniform(-math.pi, math.pi))
        self.thetadot = float(rng.uniform(-1.0, 1.0))
        self.t = 0
        return self._obs()

    def step(self, action):
        u = float(np.clip(np.asarray(action, dtype=np.float64), -self.spec.action_clip, self.spec.action_clip)[0])
        angle = ((self.theta + math.pi) % (2.0 * math.pi)) - math.pi
        reward = -(angle**2 + 0.1 * self.thetadot**2 + 0.001 * u**2)
        accel = (
            3.0 * self.gravity / (2.0 * self.length) * math.sin(self.theta)
            + 3.0 / (self.mass * self.length**2) * u
        )
        self.thetadot = float(np.clip(self.thetadot + accel * self.dt, -self.max_speed, self.max_speed))
        self.theta += self.thetadot * self.dt
        self.t += 1
        return self._obs(), reward, self.t >= self.spec.max_episode_len


ENV_REGISTRY = {
    "lqr": LQREnv,
    "pointmass": PointMassEnv,
    "pendulum": PendulumEnv,
}


def make_env(name):
    if name not in ENV_REGISTRY:
        raise ValueError(f"unknown environment '{name}', expected one of {sorted(ENV_REGISTRY)}")
    return ENV_REGISTRY[name]()


@dataclass
class RolloutBatch:
    states: np.ndarray  # (batch, obs_dim)
    actions: np.ndarray  # (batch, act_dim), unclipped samples
    rewards: np.ndarray  # (batch,)
    terminals: np.ndarray  # (batch,) bool
    log_probs: np.ndarray  # (batch,)
    values: np.ndarray  # (batch,)
    bootstrap_value: float  # critic value past the final transition
    episode_returns: list  # undiscounted, completed episodes only
    advantages: np.ndarray = field(default=None)
    returns: np.ndarray = field(default=None)

    @property
    def size(self):
        return self.states.shape[0]


def collect(env, pol, value_fn, batch_size, seed):
    """Gather exactly batch_size transitions, auto-resetting on episode ends.

    value_fn maps a (n, obs_dim) array to (n,) critic values; pass None for a
    zero critic.  Deterministic in (env, policy, critic, seed): the single
    seeded generator drives both resets and action noise.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    rng = np.random.default_rng(seed)
    obs = env.reset(rng)
    states = np.empty((batch_size, env.spec.obs_dim))
    actions = np.empty((batch_size, env.spec.act_dim))
    rewards = np.empty(batch_size)
    terminals = np.zeros(batch_size, dtype=bool)
    episode_returns = []
    episode_acc = 0.0
    for t in range(batch_size):
        states[t] = obs
        dist = pol.dist(obs[None, :])
        action = sample_actions_rng(dist, rng)[0]
        actions[t] = action
        obs, reward, done = env.step(action)
        rewards[t] = reward
        terminals[t] = done
        episode_acc += reward
        if done:
            episode_returns.append(episode_acc)
            episode_acc = 0.0
            obs = env.reset(rng)

    dist_all = pol.dist(states)
    log_probs = log_prob(dist_all, actions)
    if value_fn is None:
        values = np.zeros(batch_size)
        bootstrap_value = 0.0
    else:
        values = np.asarray(value_fn(states), dtype=np.float64).reshape(batch_size)
        bootstrap_value = float(np.asarray(value_fn(obs[None, :])).reshape(1)[0])
    return RolloutBatch(
        states=states,
        actions=actions,
        rewards=rewards,
        terminals=terminals,
        log_probs=log_probs,
        values=values,
        bootstrap_value=bootstrap_value,
        episode_returns=episode_returns,
    )


def compute_gae(batch, gamma, lam, bootstrap_value):
    """Generalized advantage estimation over one batch.

    delta_t = r_t + gamma V(s_{t+1}) (1 - done_t) - V(s_t), advantages are the
    (gamma lam)-discounted sums of deltas cut at terminals, and returns are
    advantages + values.  The tail of a truncated episode bootstraps with
    bootstrap_value; terminal transitions bootstrap with zero.  Fills
    batch.advantages and batch.returns in place and returns the batch.
    """
    if batch.values is None:
        raise ValueError("batch has no critic values; collect with a value_fn first")
    m = batch.size
    not_done = 1.0 - batch.terminals.astype(np.float64)
    next_values = np.append(batch.values[1:], bootstrap_value)
    deltas = batch.rewards + gamma * next_values * not_done - batch.values
    advantages = np.empty(m)
    acc = 0.0
    for t in range(m - 1, -1, -1):
        acc = deltas[t] + gamma * lam * not_done[t] * acc
        advantages[t] = acc
    batch.advantages = advantages
    batch.returns = advantages + batch.values
    return batch


def discounted_return(rewards, gamma):
    """Per-step discounted reward-to-go within a single episode."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(rewards.size - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def standardize(x, eps=1e-8):
    x = np.asarray(x, dtype=np.float64)
    return (x - x.mean()) / (x.std() + eps)


def riccati_gain(env):
    """Optimal state-feedback gain u = -K x for the LQR environment."""
    s = scipy.linalg.solve_discrete_are(env.A, env.B, env.Q, env.R)
    return np.linalg.solve(env.R + env.B.T @ s @ env.B, env.B.T @ s @ env.A)


def riccati_policy_return(env, n_episodes, seed):
    """Mean episode return of the deterministic Riccati-optimal controller."""
    gain = riccati_gain(env)
    rng = np.random.default_rng(seed)
    totals = []
    for _ in range(n_episodes):
        x = env.reset(rng)
        total, done = 0.0, False
        while not done:
            x, reward, done = env.step(-gain @ x)
            total += reward
        totals.append(total)
    return float(np.mean(totals))


def riccati_expected_return(env):
    """Exact expected episode return of the optimal LQR controller.

    Backward value recursion over the episode horizon gives the cost matrix
    P_H with J*(x0) = -x0^T P_H x0; averaging over the uniform reset
    distribution on [-1, 1]^2 (second moment I/3) yields -tr(P_H)/3.
    """
    p = np.zeros_like(env.Q)
    for _ in range(env.spec.max_episode_len):
        gain = np.linalg.solve(env.R + env.B.T @ p @ env.B, env.B.T @ p @ env.A)
        p = env.Q + env.A.T @ p @ (env.A - env.B @ gain)
    return float(-np.trace(p) / 3.0)
