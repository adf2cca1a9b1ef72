"""Curvature backends: five interchangeable Fisher approximations.

All backends consume the same inputs: a flat policy-gradient vector and the
score statistics of the current batch (a completed LayerCache from the
model's curvature_cache, or the model itself for matrix-free products).
Uniform second-moment statistics over cache rows equal the exact per-state
Fisher expectation by the cache's construction, so every backend below is an
estimator of the same matrix

    F = E[ grad log pi  grad log pi^T ],

and they differ only in which structure they impose on it:

    diagonal  running mean of squared scores, coordinate-wise solve
    hf        matrix-free (F + lambda I)^{-1} g by conjugate gradients
    kfac      per-layer Kronecker factors A = E[a a^T], G = E[g g^T]
    ekfac     KFAC eigenbasis with exact per-eigenpair second moments
    tengrad   exact per-layer block solve through the Woodbury identity

Layers past the network (the policy's log_std block) have a closed-form
diagonal Fisher supplied by the model; kfac, ekfac and tengrad fall back to
the diagonal rule there.

The model protocol: .net (NetworkParams), .n_params, .trailing_fisher_diag,
.curvature_cache(states), .fvp(states, v, damping).
"""

from dataclasses import dataclass, field

import numpy as np

from . import net
from .linalg import cholesky_solve, conjugate_gradient, sym_eig

KNOWN_BACKENDS = ("diagonal", "hf", "kfac", "ekfac", "tengrad")

EXACT_FISHER_MAX_PARAMS = 200


def _check_damping(damping):
    if not damping > 0.0:
        raise ValueError(f"damping must be positive, got {damping}")


def _trailing_rule(trailing_diag, grad_tail, damping):
    return grad_tail / (trailing_diag + damping)


def exact_fisher_blocks(model, states):
    """Dense Fisher oracle for tiny models.

    Returns (blocks, full): per-layer dense blocks (plus the trailing
    diagonal block when the model has one) and the full matrix including
    cross-layer terms.  Network-to-trailing cross terms vanish in closed
    form.  Guarded to small models; quadratic memory in parameter count.
    """
    if model.n_params > EXACT_FISHER_MAX_PARAMS:
        raise ValueError(
            f"dense Fisher oracle supports at most {EXACT_FISHER_MAX_PARAMS} "
            f"parameters, model has {model.n_params}"
        )
    cache = model.curvature_cache(states)
    rows = cache.rows
    layer_rows = [
        net.per_sample_gradient_rows(cache, l) for l in range(len(model.net.layers))
    ]
    blocks = [s.T @ s / rows for s in layer_rows]
    stacked = np.hstack(layer_rows)
    f_net = stacked.T @ stacked / rows
    trailing = np.asarray(model.trailing_fisher_diag, dtype=np.float64)
    n_net = f_net.shape[0]
    full = np.zeros((n_net + trailing.size, n_net + trailing.size))
    full[:n_net, :n_net] = f_net
    if trailing.size:
        full[n_net:, n_net:] = np.diag(trailing)
        blocks.append(np.diag(trailing))
    return blocks, full


# --- diagonal ---------------------------------------------------------------


@dataclass
class DiagonalState:
    """Running mean of per-coordinate squared scores over the full flat vector."""

    second_moment: np.ndarray
    decay: float
    trailing_diag: np.ndarray
    updates: int = 0


def make_diagonal_state(model, decay=0.9):
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must be in [0, 1), got {decay}")
    return DiagonalState(
        second_moment=np.zeros(model.n_params),
        decay=decay,
        trailing_diag=np.asarray(model.trailing_fisher_diag, dtype=np.float64).copy(),
    )


def _cache_squared_score_means(cache):
    """diag of S^T S / rows per layer, without materializing the rows."""
    parts = []
    for g, a in zip(cache.preactivation_grads, cache.input_activations):
        parts.append(np.einsum("ri,rj->ij", g * g, a * a).ravel() / cache.rows)
    return np.concatenate(parts)


def diagonal_update_stats(state, cache):
    batch_diag = np.concatenate([_cache_squared_score_means(cache), state.trailing_diag])
    if batch_diag.shape != state.second_moment.shape:
        raise ValueError("cache layer shapes do not match the diagonal state")
    d = state.decay
    state.second_moment = d * state.second_moment + (1.0 - d) * batch_diag
    state.updates += 1
    return state


def diagonal_precondition(state, grad, damping):
    """Coordinate-wise solve grad / (running second moment + damping)."""
    _check_damping(damping)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.second_moment.shape:
        raise ValueError(
            f"gradient shape {grad.shape} does not match state {state.second_moment.shape}"
        )
    if state.updates == 0:
        raise ValueError("diagonal state has no statistics; update from a batch first")
    return grad / (state.second_moment + damping)


# --- hessian-free -----------------------------------------------------------


def hf_precondition(model, states, grad, damping, cg_iters=10, cg_tol=1e-10):
    """Matrix-free damped natural gradient by conjugate gradients.

    Returns (out, cg_result); cg_result carries the final residual and the
    iterations used.
    """
    _check_damping(damping)
    result = conjugate_gradient(
        lambda v: model.fvp(states, v, damping=damping),
        np.asarray(grad, dtype=np.float64),
        max_iters=cg_iters,
        tol=cg_tol,
    )
    return result.x, result


# --- kfac / ekfac -----------------------------------------------------------


@dataclass
class KroneckerLayerState:
    a_factor: np.ndarray  # ((in+1), (in+1)) EMA of input second moments
    g_factor: np.ndarray  # (out, out) EMA of preactivation-grad second moments
    a_eigvals: np.ndarray = field(default=None)
    a_eigvecs: np.ndarray = field(default=None)
    g_eigvals: np.ndarray = field(default=None)
    g_eigvecs: np.ndarray = field(default=None)
    scalings: np.ndarray = field(default=None)  # (out, in+1) ekfac second moments


@dataclass
class KroneckerState:
    layers: list
    decay: float
    refresh_interval: int
    trailing_diag: np.ndarray
    updates: int = 0
    updates_since_refresh: int = 0

    @property
    def fresh(self):
        return (
            self.layers[0].a_eigvecs is not None
            and self.updates_since_refresh <= self.refresh_interval
        )


def make_kronecker_state(model, decay=0.9, refresh_interval=1):
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must be in [0, 1), got {decay}")
    if refresh_interval < 1:
        raise ValueError(f"refresh_interval must be >= 1, got {refresh_interval}")
    layers = [
        KroneckerLayerState(
            a_factor=np.zeros((l.in_dim + 1, l.in_dim + 1)),
            g_factor=np.zeros((l.out_dim, l.out_dim)),
        )
        for l in model.net.layers
    ]
    return KroneckerState(
        layers=layers,
        decay=decay,
        refresh_interval=refresh_interval,
        trailing_diag=np.asarray(model.trailing_fisher_diag, dtype=np.float64).copy(),
    )


def kfac_update_stats(state, cache):
    """Fold the batch factors into the EMAs; refresh eigenbases on schedule."""
    if len(cache.input_activations) != len(state.layers):
        raise ValueError("cache layer count does not match the Kronecker state")
    rows = cache.rows
    d = state.decay
    for layer, a, g in zip(state.layers, cache.input_activations, cache.preactivation_grads):
        layer.a_factor = d * layer.a_factor + (1.0 - d) * (a.T @ a / rows)
        layer.g_factor = d * layer.g_factor + (1.0 - d) * (g.T @ g / rows)
    state.updates += 1
    state.updates_since_refresh += 1
    if state.updates == 1 or state.updates_since_refresh >= state.refresh_interval:
        for layer in state.layers:
            layer.a_eigvals, layer.a_eigvecs = sym_eig(layer.a_factor)
            layer.g_eigvals, layer.g_eigvecs = sym_eig(layer.g_factor)
        state.updates_since_refresh = 0
    return state


def _require_fresh(state, kind):
    if state.updates == 0 or state.layers[0].a_eigvecs is None:
        raise ValueError(f"{kind} state has no statistics; update from a batch first")
    if state.updates_since_refresh > state.refresh_interval:
        raise ValueError(
            f"{kind} eigenbases are stale: {state.updates_since_refresh} updates "
            f"since refresh with refresh_interval={state.refresh_interval}"
        )


def _split_grad(state, grad):
    grad = np.asarray(grad, dtype=np.float64)
    sizes = [l.g_factor.shape[0] * l.a_factor.shape[0] for l in state.layers]
    n_net = sum(sizes)
    if grad.shape != (n_net + state.trailing_diag.size,):
        raise ValueError(f"gradient length {grad.shape} does not match state layout")
    blocks = []
    start = 0
    for layer, size in zip(state.layers, sizes):
        out_dim = layer.g_factor.shape[0]
        blocks.append(grad[start : start + size].reshape(out_dim, -1))
        start += size
    return blocks, grad[n_net:]


def kfac_precondition(state, grad, damping, factored_damping=True):
    """Per-layer solve (G + a_g I)^{-1} W (A + a_a I)^{-1} in matrix form.

    With factored damping, a_g = sqrt(damping) / pi and a_a = sqrt(damping) * pi
    where pi^2 = (tr A / dim A) / (tr G / dim G) balances the two factors.
    With factored_damping=False, damping is applied to the Kronecker product's
    eigenvalues directly: divide by lam_g lam_a^T + damping in the eigenbasis.
    """
    _check_damping(damping)
    _require_fresh(state, "kfac")
    blocks, tail = _split_grad(state, grad)
    out_blocks = []
    for layer, w in zip(state.layers, blocks):
        qa, la = layer.a_eigvecs, layer.a_eigvals
        qg, lg = layer.g_eigvecs, layer.g_eigvals
        mid = qg.T @ w @ qa
        if factored_damping:
            tr_a = float(np.sum(la)) / la.size
            tr_g = float(np.sum(lg)) / lg.size
            pi = np.sqrt(tr_a / tr_g) if tr_a > 0.0 and tr_g > 0.0 else 1.0
            mid = mid / np.outer(lg + np.sqrt(damping) / pi, la + np.sqrt(damping) * pi)
        else:
            mid = mid / (np.outer(lg, la) + damping)
        out_blocks.append((qg @ mid @ qa.T).ravel())
    out_blocks.append(_trailing_rule(state.trailing_diag, tail, damping))
    return np.concatenate(out_blocks)


def ekfac_update_scalings(state, cache):
    """Fold the batch's per-eigenpair squared projections into the scalings.

    s_ij tracks the running mean of (Q_g^T g a^T Q_a)_ij^2 over cache rows,
    the exact second moment of the Fisher in the Kronecker eigenbasis.
    """
    _require_fresh(state, "ekfac")
    rows = cache.rows
    d = state.decay
    for layer, a, g in zip(state.layers, cache.input_activations, cache.preactivation_grads):
        proj_a = a @ layer.a_eigvecs
        proj_g = g @ layer.g_eigvecs
        batch_s = (proj_g * proj_g).T @ (proj_a * proj_a) / rows
        layer.scalings = (
            batch_s if layer.scalings is None else d * layer.scalings + (1.0 - d) * batch_s
        )
    return state


def ekfac_precondition(state, grad, damping, cache=None):
    """KFAC eigenbasis with exact diagonal second moments.

    When a cache is given its statistics are folded into the scalings first;
    then per layer out = Q_g [ (Q_g^T W Q_a) / (s + damping) ] Q_a^T.
    """
    _check_damping(damping)
    _require_fresh(state, "ekfac")
    if cache is not None:
        ekfac_update_scalings(state, cache)
    if state.layers[0].scalings is None:
        raise ValueError("ekfac scalings are unset; pass a cache or update them first")
    blocks, tail = _split_grad(state, grad)
    out_blocks = []
    for layer, w in zip(state.layers, blocks):
        mid = (layer.g_eigvecs.T @ w @ layer.a_eigvecs) / (layer.scalings + damping)
        out_blocks.append((layer.g_eigvecs @ mid @ layer.a_eigvecs.T).ravel())
    out_blocks.append(_trailing_rule(state.trailing_diag, tail, damping))
    return np.concatenate(out_blocks)


# --- tengrad ----------------------------------------------------------------


def tengrad_precondition(model, cache, grad, damping):
    """Exact per-layer block solve (F_l + damping I)^{-1} g_l.

    Works in the row space: with J the per-row score matrix scaled by
    1/sqrt(rows), F_l = J^T J and the Woodbury identity gives

        (J^T J + c I)^{-1} g = (g - J^T (c I + J J^T)^{-1} J g) / c.

    J J^T and the J products are assembled from the factored rows, so the
    cost is quadratic in the batch, not in the layer size.  The trailing
    block uses the diagonal rule.
    """
    _check_damping(damping)
    if not cache.complete:
        raise ValueError("cache has no preactivation gradients; run backward first")
    grad = np.asarray(grad, dtype=np.float64)
    layers = model.net.layers
    slices = model.net.layer_slices()
    rows = cache.rows
    sqrt_rows = np.sqrt(rows)
    out = np.empty_like(grad)
    for l, sl in enumerate(slices):
        a = cache.input_activations[l]
        g = cache.preactivation_grads[l]
        w = grad[sl].reshape(layers[l].out_dim, layers[l].in_dim + 1)
        gram = (g @ g.T) * (a @ a.T) / rows
        jg = np.einsum("ri,ri->r", g @ w, a) / sqrt_rows
        y = cholesky_solve(gram + damping * np.eye(rows), jg)
        jty = (g * y[:, None]).T @ a / sqrt_rows
        out[sl] = ((w - jty) / damping).ravel()
    n_net = model.net.n_params
    trailing = np.asarray(model.trailing_fisher_diag, dtype=np.float64)
    out[n_net:] = _trailing_rule(trailing, grad[n_net:], damping)
    return out


# --- trainer-facing wrapper -------------------------------------------------


class Preconditioner:
    """One uniform interface over the five backends for the training loop.

    update() refreshes batch statistics (a no-op for hf); apply() maps a flat
    gradient to the preconditioned direction and reports solver diagnostics.
    """

    def __init__(self, kind, model, decay=0.9, refresh_interval=1, cg_iters=10, cg_tol=1e-10):
        if kind not in KNOWN_BACKENDS:
            raise ValueError(f"unknown backend '{kind}', expected one of {KNOWN_BACKENDS}")
        self.kind = kind
        self.cg_iters = cg_iters
        self.cg_tol = cg_tol
        self._cache = None
        self._states = None
        if kind == "diagonal":
            self.state = make_diagonal_state(model, decay=decay)
        elif kind in ("kfac", "ekfac"):
            self.state = make_kronecker_state(model, decay=decay, refresh_interval=refresh_interval)
        else:
            self.state = None

    def update(self, model, states):
        if self.kind == "hf":
            self._states = states
            return
        cache = model.curvature_cache(states)
        self._cache = cache
        self._states = states
        if self.kind == "diagonal":
            diagonal_update_stats(self.state, cache)
        elif self.kind in ("kfac", "ekfac"):
            kfac_update_stats(self.state, cache)

    def apply(self, model, grad, damping):
        if self.kind == "hf":
            out, cg = hf_precondition(
                model, self._states, grad, damping,
                cg_iters=self.cg_iters, cg_tol=self.cg_tol,
            )
            return out, {"cg_residual": cg.residual, "cg_iterations": cg.iterations}
        if self.kind == "diagonal":
            return diagonal_precondition(self.state, grad, damping), {}
        if self.kind == "kfac":
            return kfac_precondition(self.state, grad, damping), {}
        if self.kind == "ekfac":
            if self._cache is None:
                raise ValueError("ekfac needs a batch cache; call update first")
            return ekfac_precondition(self.state, grad, damping, self._cache), {}
        if self._cache is None:
            raise ValueError("tengrad needs a batch cache; call update first")
        return tengrad_precondition(model, self._cache, grad, damping), {}
