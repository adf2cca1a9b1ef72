"""Natural policy gradient trainer.

One update cycle: collect a batch, estimate advantages, precondition the
policy gradient with the configured curvature backend, take a KL-bounded
step, then fit the critic for one epoch.  Step sizing comes in two modes:

  line_search  rescale the direction to the trust-region boundary implied by
               the quadratic KL model, then backtrack until the advantage-
               weighted surrogate improves and the realized KL respects the
               limit; a failed search leaves the parameters untouched.
  clip         take the step at min(max_lr, sqrt(2 delta / d^T F d)) without
               an acceptance test.

Traces are deterministic given the config: every random draw derives from
the config seed, and wall-clock timings live next to, not inside, the
logged update records.
"""

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import net
from .envrollout import collect, compute_gae, make_env, standardize
from .fisher import KNOWN_BACKENDS, Preconditioner
from .policy import GaussianPolicy, kl_diag_gauss, log_prob, policy_kl

STEP_MODES = ("line_search", "clip")
CRITIC_MODES = ("sgd", "natural")
LINE_SEARCH_TRIES = 10


@dataclass
class TrainerConfig:
    env: str = "lqr"
    backend: str = "kfac"
    seed: int = 0
    total_env_steps: int = 200_000
    batch_size: int = 512
    gamma: float = 0.99
    lambda_gae: float = 0.95
    damping: float = 5e-2
    kl_limit: float = 1e-2
    step_mode: str = "line_search"
    max_lr: float = 1.0
    standardize_advantages: bool = True
    critic_mode: str = "natural"
    critic_backend: str = "tengrad"
    critic_lr: float = 0.3
    critic_damping: float = 1e-1
    stat_decay: float = 0.9
    refresh_interval: int = 1
    cg_iters: int = 10
    cg_tol: float = 1e-10
    hidden: int = 64
    init_log_std: float = -2.0

    def validate(self):
        if self.backend not in KNOWN_BACKENDS:
            raise ValueError(f"backend must be one of {KNOWN_BACKENDS}, got '{self.backend}'")
        if self.critic_backend not in KNOWN_BACKENDS:
            raise ValueError(
                f"critic_backend must be one of {KNOWN_BACKENDS}, got '{self.critic_backend}'"
            )
        if self.step_mode not in STEP_MODES:
            raise ValueError(f"step_mode must be one of {STEP_MODES}, got '{self.step_mode}'")
        if self.critic_mode not in CRITIC_MODES:
            raise ValueError(f"critic_mode must be one of {CRITIC_MODES}, got '{self.critic_mode}'")
        for name in ("total_env_steps", "batch_size", "hidden", "refresh_interval", "cg_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)}")
        for name in ("damping", "kl_limit", "max_lr", "critic_lr", "critic_damping"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("gamma", "lambda_gae"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if not 0.0 <= self.stat_decay < 1.0:
            raise ValueError(f"stat_decay must lie in [0, 1), got {self.stat_decay}")
        return self

    def config_hash(self):
        canon = "\n".join(f"{f.name} = {getattr(self, f.name)!r}" for f in fields(self))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


class ValueFunction:
    """MLP state-value baseline with the same curvature interface as the policy.

    The Gauss-Newton Fisher of a unit-variance Gaussian likelihood around the
    prediction is (1/m) J^T J, so the curvature cache backpropagates ones.
    """

    def __init__(self, value_net):
        if value_net.dims[-1] != 1:
            raise ValueError(f"value network must have one output, got dims {value_net.dims}")
        self.value_net = value_net

    @classmethod
    def create(cls, obs_dim, seed, hidden=64):
        return cls(net.init_network((obs_dim, hidden, hidden, 1), seed))

    @property
    def net(self):
        return self.value_net

    @property
    def n_params(self):
        return self.value_net.n_params

    @property
    def trailing_fisher_diag(self):
        return np.zeros(0)

    def value(self, states):
        out, _ = net.forward(self.value_net, states)
        return out[:, 0]

    def flatten(self):
        return self.value_net.flatten()

    def with_flat(self, flat):
        return ValueFunction(net.unflatten_network(self.value_net.dims, flat))

    def curvature_cache(self, states):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        _, cache = net.forward(self.value_net, states)
        net.backward(self.value_net, cache, np.ones((states.shape[0], 1)))
        return cache

    def fvp(self, states, v, damping=0.0):
        v = np.asarray(v, dtype=np.float64)
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        _, cache = net.forward(self.value_net, states)
        jv = net.jvp(self.value_net, cache, v)
        return net.backward(self.value_net, cache, jv) + damping * v


def policy_loss_and_grad(pol, states, actions, weights):
    """Loss -mean(w log pi) and its flat gradient over (net, log_std)."""
    weights = np.asarray(weights, dtype=np.float64)
    mean, cache = net.forward(pol.mean_net, states)
    std = np.exp(pol.log_std)
    z = (np.asarray(actions) - mean) / std
    logp = np.sum(-0.5 * z * z - pol.log_std - 0.5 * np.log(2.0 * np.pi), axis=1)
    loss = -float(np.mean(weights * logp))
    # d(-w logp)/d mean = -w (a - mean) / sigma^2, per row
    mean_grads = -weights[:, None] * z / std
    net_grad = net.backward(pol.mean_net, cache, mean_grads)
    logstd_grad = -np.mean(weights[:, None] * (z * z - 1.0), axis=0)
    return loss, np.concatenate([net_grad, logstd_grad])


def surrogate_gain(pol, batch, weights):
    """mean(w (log pi_new - log pi_collect)); positive means improvement."""
    new_logp = log_prob(pol.dist(batch.states), batch.actions)
    return float(np.mean(weights * (new_logp - batch.log_probs)))


def backtracking_line_search(pol, batch, weights, direction, config):
    """Try scales max_lr * 0.5^j, j = 0..9, over the given direction.

    Accepts the first candidate whose surrogate gain is positive and whose
    realized KL against the current policy is within the limit.  Returns
    (new_policy, scale, accepted); on failure the original policy comes back
    with scale 0.
    """
    theta = pol.flatten()
    old_dist = pol.dist(batch.states)
    for j in range(LINE_SEARCH_TRIES):
        scale = config.max_lr * 0.5**j
        candidate = pol.with_flat(theta - scale * direction)
        kl = kl_diag_gauss(old_dist, candidate.dist(batch.states))
        if kl <= config.kl_limit and surrogate_gain(candidate, batch, weights) > 0.0:
            return candidate, scale, True
    return pol, 0.0, False


def step_size_clip(direction, quad, config):
    """min(max_lr, sqrt(2 kl_limit / (d^T F d + eps))), the quadratic KL cap."""
    return float(min(config.max_lr, math.sqrt(2.0 * config.kl_limit / (quad + 1e-12))))


@dataclass
class UpdateReport:
    surrogate_before: float
    surrogate_after: float
    realized_kl: float
    step_scale: float
    accepted: bool
    dir_quad: float  # d^T F d of the unscaled direction
    cg_residual: float = None
    cg_iterations: int = None
    wallclock_ms: float = 0.0


def natural_step(pol, batch, precond, config):
    """One preconditioned policy update.  Returns (new_policy, UpdateReport)."""
    t0 = time.perf_counter()
    weights = (
        standardize(batch.advantages) if config.standardize_advantages else batch.advantages
    )
    loss_before, grad = policy_loss_and_grad(pol, batch.states, batch.actions, weights)
    precond.update(pol, batch.states)
    direction, info = precond.apply(pol, grad, config.damping)
    report = UpdateReport(
        surrogate_before=loss_before,
        surrogate_after=loss_before,
        realized_kl=0.0,
        step_scale=0.0,
        accepted=False,
        dir_quad=0.0,
        cg_residual=info.get("cg_residual"),
        cg_iterations=info.get("cg_iterations"),
    )
    if not np.all(np.isfinite(direction)):
        report.wallclock_ms = (time.perf_counter() - t0) * 1e3
        return pol, report

    quad = float(direction @ pol.fvp(batch.states, direction))
    report.dir_quad = quad
    if config.step_mode == "clip":
        scale = step_size_clip(direction, quad, config)
        new_pol = pol.with_flat(pol.flatten() - scale * direction)
        accepted = True
    else:
        boundary = math.sqrt(2.0 * config.kl_limit / (quad + 1e-12))
        new_pol, scale, accepted = backtracking_line_search(
            pol, batch, weights, boundary * direction, config
        )
        scale = scale * boundary
    if accepted:
        report.accepted = True
        report.step_scale = scale
        report.realized_kl = policy_kl(pol, new_pol, batch.states)
        loss_after, _ = policy_loss_and_grad(new_pol, batch.states, batch.actions, weights)
        report.surrogate_after = loss_after
        pol = new_pol
    report.wallclock_ms = (time.perf_counter() - t0) * 1e3
    return pol, report


def critic_update(critic, batch, config, critic_precond=None):
    """One epoch of MSE-to-returns; returns (new_critic, loss_before)."""
    if batch.returns is None:
        raise ValueError("batch has no returns; run compute_gae first")
    states = batch.states
    out, cache = net.forward(critic.value_net, states)
    resid = out[:, 0] - batch.returns
    loss = 0.5 * float(np.mean(resid * resid))
    grad = net.backward(critic.value_net, cache, resid[:, None])
    if config.critic_mode == "sgd":
        step = grad
    else:
        if critic_precond is None:
            raise ValueError("natural critic mode needs a critic preconditioner")
        critic_precond.update(critic, states)
        step, _ = critic_precond.apply(critic, grad, config.critic_damping)
    if not np.all(np.isfinite(step)):
        return critic, loss
    return critic.with_flat(critic.flatten() - config.critic_lr * step), loss


@dataclass
class Checkpoint:
    env_steps: int
    mean_return: float  # None when the batch completed no episode
    realized_kl: float
    step_scale: float
    accepted: bool
    dir_quad: float
    surrogate_before: float
    surrogate_after: float
    critic_loss: float
    cg_residual: float = None


@dataclass
class RunTrace:
    env: str
    backend: str
    seed: int
    config_hash: str
    checkpoints: list = field(default_factory=list)
    wallclock_ms: list = field(default_factory=list)  # per update, kept out of the trace lines
    invalid: bool = False
    error: str = None

    def trace_lines(self):
        """Deterministic JSON-lines form: one header record, then one record
        per update.  Wall-clock timings are excluded on purpose; identical
        configs must produce identical bytes."""
        header = {
            "type": "header",
            "env": self.env,
            "backend": self.backend,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "invalid": self.invalid,
            "error": self.error,
        }
        lines = [json.dumps(header, sort_keys=True)]
        for cp in self.checkpoints:
            lines.append(json.dumps(asdict(cp), sort_keys=True))
        return lines

    @classmethod
    def from_lines(cls, lines, wallclock_ms=None):
        header = json.loads(lines[0])
        if header.get("type") != "header":
            raise ValueError("trace does not start with a header record")
        trace = cls(
            env=header["env"],
            backend=header["backend"],
            seed=header["seed"],
            config_hash=header["config_hash"],
            invalid=header.get("invalid", False),
            error=header.get("error"),
        )
        for line in lines[1:]:
            if line.strip():
                trace.checkpoints.append(Checkpoint(**json.loads(line)))
        trace.wallclock_ms = list(wallclock_ms) if wallclock_ms is not None else []
        return trace

    @property
    def env_steps(self):
        return np.array([cp.env_steps for cp in self.checkpoints])

    @property
    def mean_returns(self):
        return [cp.mean_return for cp in self.checkpoints]


def train(config, keep_models=False):
    """Run the full training loop for one config.  Returns a RunTrace, or
    (trace, policy, critic) when keep_models is set.

    Deterministic per config: network init, rollout noise, and every solver
    draw derive from config.seed.  A component failure mid-run aborts and
    returns the partial trace flagged invalid.
    """
    config.validate()
    root = np.random.SeedSequence(config.seed)
    policy_ss, critic_ss, rollout_ss = root.spawn(3)
    env = make_env(config.env)
    pol = GaussianPolicy.create(
        env.spec.obs_dim,
        env.spec.act_dim,
        seed=int(policy_ss.generate_state(1)[0]),
        hidden=config.hidden,
        init_log_std=config.init_log_std,
    )
    critic = ValueFunction.create(
        env.spec.obs_dim, seed=int(critic_ss.generate_state(1)[0]), hidden=config.hidden
    )
    precond = Preconditioner(
        config.backend,
        pol,
        decay=config.stat_decay,
        refresh_interval=config.refresh_interval,
        cg_iters=config.cg_iters,
        cg_tol=config.cg_tol,
    )
    critic_precond = None
    if config.critic_mode == "natural":
        critic_precond = Preconditioner(
            config.critic_backend,
            critic,
            decay=config.stat_decay,
            refresh_interval=config.refresh_interval,
            cg_iters=config.cg_iters,
            cg_tol=config.cg_tol,
        )
    n_updates = math.ceil(config.total_env_steps / config.batch_size)
    collect_seeds = [int(ss.generate_state(1)[0]) for ss in rollout_ss.spawn(n_updates)]
    trace = RunTrace(
        env=config.env, backend=config.backend, seed=config.seed, config_hash=config.config_hash()
    )
    env_steps = 0
    try:
        for k in range(n_updates):
            t0 = time.perf_counter()
            batch = collect(env, pol, critic.value, config.batch_size, collect_seeds[k])
            compute_gae(batch, config.gamma, config.lambda_gae, batch.bootstrap_value)
            pol, report = natural_step(pol, batch, precond, config)
            critic, critic_loss = critic_update(critic, batch, config, critic_precond)
            env_steps += batch.size
            mean_return = (
                float(np.mean(batch.episode_returns)) if batch.episode_returns else None
            )
            trace.checkpoints.append(
                Checkpoint(
                    env_steps=env_steps,
                    mean_return=mean_return,
                    realized_kl=report.realized_kl,
                    step_scale=report.step_scale,
                    accepted=report.accepted,
                    dir_quad=report.dir_quad,
                    surrogate_before=report.surrogate_before,
                    surrogate_after=report.surrogate_after,
                    critic_loss=critic_loss,
                    cg_residual=report.cg_residual,
                )
            )
            trace.wallclock_ms.append((time.perf_counter() - t0) * 1e3)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        trace.invalid = True
        trace.error = f"{type(exc).__name__}: {exc}"
    if keep_models:
        return trace, pol, critic
    return trace


def final_mean_return(trace):
    """Mean return at the last checkpoint that completed an episode."""
    for cp in reversed(trace.checkpoints):
        if cp.mean_return is not None:
            return cp.mean_return
    return None
