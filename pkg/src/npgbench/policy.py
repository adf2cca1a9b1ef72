"""Diagonal Gaussian policy over a small mean network.

The action distribution is N(mu(s), diag(exp(log_std))^2) with a single
state-independent log_std vector.  Flat parameter order is the mean network
followed by the trailing log_std block.

Curvature convention.  The Fisher of this family splits into a network block
and a log_std block with zero cross terms: integrating the score outer
product over actions gives

    F_net    = E_s[ J(s)^T diag(1 / sigma^2) J(s) ],   J = d mu / d theta,
    F_logstd = 2 I.

curvature_cache materializes F_net as plain per-row statistics: the batch is
tiled once per action dimension and each replica is backpropagated with the
one-hot output gradient sqrt(d) e_k / sigma_k.  With that scaling, every
second-moment statistic taken uniformly over cache rows (mean of squared
scores, input/preactivation factors, Gram matrices) reproduces the exact
per-state expectation over actions.  The log_std block is handled in closed
form by the backends.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import net

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DistParams:
    mean: np.ndarray  # (batch, act_dim)
    log_std: np.ndarray  # (act_dim,)

    @property
    def std(self):
        return np.exp(self.log_std)


def log_prob(dist, actions):
    """Per-row log density, shape (batch,)."""
    actions = np.asarray(actions, dtype=np.float64)
    z = (actions - dist.mean) / dist.std
    return np.sum(-0.5 * z * z - dist.log_std - 0.5 * LOG_2PI, axis=1)


def kl_diag_gauss(p, q):
    """Mean over the batch of KL(p_row || q_row), in nats.

    Closed form per dimension: log(sq/sp) + (sp^2 + (mp - mq)^2) / (2 sq^2) - 1/2.
    """
    if p.mean.shape != q.mean.shape:
        raise ValueError(f"mean shapes differ: {p.mean.shape} vs {q.mean.shape}")
    sp, sq = p.std, q.std
    per_dim = (
        (q.log_std - p.log_std)
        + (sp * sp + (p.mean - q.mean) ** 2) / (2.0 * sq * sq)
        - 0.5
    )
    return float(np.mean(np.sum(per_dim, axis=1)))


def sample_actions_rng(dist, rng):
    noise = rng.standard_normal(dist.mean.shape)
    return dist.mean + dist.std * noise


def sample_actions(dist, seed):
    """Seeded draw from the distribution, deterministic per seed."""
    return sample_actions_rng(dist, np.random.default_rng(seed))


class GaussianPolicy:
    def __init__(self, mean_net, log_std):
        self.mean_net = mean_net
        self.log_std = np.asarray(log_std, dtype=np.float64)
        if self.log_std.shape != (mean_net.dims[-1],):
            raise ValueError(
                f"log_std shape {self.log_std.shape} does not match "
                f"network output dim {mean_net.dims[-1]}"
            )

    @classmethod
    def create(cls, obs_dim, act_dim, seed, hidden=64, init_log_std=0.0):
        mean_net = net.init_network((obs_dim, hidden, hidden, act_dim), seed)
        return cls(mean_net, np.full(act_dim, float(init_log_std)))

    @property
    def net(self):
        """The mean network, under the name the curvature backends expect."""
        return self.mean_net

    @property
    def obs_dim(self):
        return self.mean_net.dims[0]

    @property
    def act_dim(self):
        return self.mean_net.dims[-1]

    @property
    def n_net_params(self):
        return self.mean_net.n_params

    @property
    def n_params(self):
        return self.mean_net.n_params + self.act_dim

    @property
    def trailing_fisher_diag(self):
        """Exact Fisher diagonal of the trailing log_std block."""
        return np.full(self.act_dim, 2.0)

    def dist(self, states):
        mean, _ = net.forward(self.mean_net, states)
        return DistParams(mean=mean, log_std=self.log_std)

    def flatten(self):
        return np.concatenate([self.mean_net.flatten(), self.log_std])

    def with_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"flat vector has shape {flat.shape}, expected ({self.n_params},)")
        mean_net = net.unflatten_network(self.mean_net.dims, flat[: self.n_net_params])
        return GaussianPolicy(mean_net, flat[self.n_net_params :].copy())

    def copy(self):
        return GaussianPolicy(self.mean_net.copy(), self.log_std.copy())

    def curvature_cache(self, states):
        """Score-statistics cache over the batch, see the module docstring."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        m, d = states.shape[0], self.act_dim
        tiled = np.tile(states, (d, 1))
        _, cache = net.forward(self.mean_net, tiled)
        out_grads = np.zeros((m * d, d))
        scale = math.sqrt(d)
        std = np.exp(self.log_std)
        for k in range(d):
            out_grads[k * m : (k + 1) * m, k] = scale / std[k]
        net.backward(self.mean_net, cache, out_grads)
        return cache

    def fvp(self, states, v, damping=0.0):
        """(F + damping I) @ v with F the exact Fisher at these states.

        Equivalent to the Hessian of kl_diag_gauss against a frozen copy of
        the policy; computed as a forward tangent through the mean network
        followed by a backward pass, never materializing F.
        """
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_params,):
            raise ValueError(f"vector has shape {v.shape}, expected ({self.n_params},)")
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        _, cache = net.forward(self.mean_net, states)
        d_mean = net.jvp(self.mean_net, cache, v[: self.n_net_params])
        var = np.exp(2.0 * self.log_std)
        net_part = net.backward(self.mean_net, cache, d_mean / var)
        logstd_part = 2.0 * v[self.n_net_params :]
        return np.concatenate([net_part, logstd_part]) + damping * v

    def save(self, path):
        net.save_snapshot(path, self.mean_net, extras={"log_std": self.log_std})

    @classmethod
    def load(cls, path):
        params, extras = net.load_snapshot(path)
        if "log_std" not in extras:
            raise ValueError(f"snapshot {path} has no log_std block")
        return cls(params, extras["log_std"])


def policy_kl(old, new, states):
    """KL between two policies' action distributions, averaged over states."""
    return kl_diag_gauss(old.dist(states), new.dist(states))
