"""Small fully connected networks with hand-written forward and backward passes.

The curvature backends need per-layer, per-sample quantities that autodiff
frameworks hide: input activations with an explicit homogeneous column and
per-sample preactivation gradients.  Keeping the passes manual makes those
statistics first-class.

Parameter layout convention: layer l owns the augmented matrix [W_l | b_l] of
shape (out, in + 1), flattened row-major.  The flat parameter vector is the
concatenation of these blocks in layer order.  Per-sample gradient rows are
vec(g_r a_r^T) in the same convention, so their batch mean reproduces the
flat gradient block exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from .linalg import orthogonal_matrix


@dataclass
class LayerParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @property
    def in_dim(self):
        return self.weight.shape[1]

    def augmented(self):
        """[W | b] as one (out, in + 1) block."""
        return np.hstack([self.weight, self.bias[:, None]])


@dataclass
class NetworkParams:
    layers: list

    @property
    def dims(self):
        return tuple([self.layers[0].in_dim] + [l.out_dim for l in self.layers])

    @property
    def n_params(self):
        return sum(l.out_dim * (l.in_dim + 1) for l in self.layers)

    def layer_slices(self):
        """Flat-vector slice per layer, in layer order."""
        slices = []
        start = 0
        for l in self.layers:
            size = l.out_dim * (l.in_dim + 1)
            slices.append(slice(start, start + size))
            start += size
        return slices

    def flatten(self):
        return np.concatenate([l.augmented().ravel() for l in self.layers])

    def copy(self):
        return NetworkParams(
            layers=[LayerParams(l.weight.copy(), l.bias.copy()) for l in self.layers]
        )


def unflatten_network(dims, flat):
    """Inverse of NetworkParams.flatten for the given layer dims."""
    flat = np.asarray(flat, dtype=np.float64)
    expected = sum(dims[i + 1] * (dims[i] + 1) for i in range(len(dims) - 1))
    if flat.shape != (expected,):
        raise ValueError(f"flat vector has shape {flat.shape}, expected ({expected},)")
    layers = []
    start = 0
    for i in range(len(dims) - 1):
        in_dim, out_dim = dims[i], dims[i + 1]
        block = flat[start : start + out_dim * (in_dim + 1)].reshape(out_dim, in_dim + 1)
        layers.append(LayerParams(weight=block[:, :in_dim].copy(), bias=block[:, in_dim].copy()))
        start += out_dim * (in_dim + 1)
    return NetworkParams(layers=layers)


def unflatten_blocks(params, flat):
    """Split a flat vector into per-layer (out, in + 1) blocks matching params."""
    blocks = []
    for l, sl in zip(params.layers, params.layer_slices()):
        blocks.append(np.asarray(flat[sl]).reshape(l.out_dim, l.in_dim + 1))
    return blocks


def init_network(dims, seed):
    """Orthogonal weights, zero biases.  tanh on all but the final layer."""
    if len(dims) < 2:
        raise ValueError(f"need at least one layer, got dims {dims}")
    children = np.random.SeedSequence(seed).spawn(len(dims) - 1)
    layers = []
    for i in range(len(dims) - 1):
        layer_seed = int(children[i].generate_state(1)[0])
        weight = orthogonal_matrix(dims[i + 1], dims[i], seed=layer_seed)
        layers.append(LayerParams(weight=weight, bias=np.zeros(dims[i + 1])))
    return NetworkParams(layers=layers)


@dataclass
class LayerCache:
    """Per-layer batch statistics captured by forward and backward.

    input_activations[l] has shape (rows, in_l + 1) with a trailing column of
    ones; preactivation_grads[l] has shape (rows, out_l) and holds per-row
    gradients, not batch averages.  It stays None until backward runs.
    """

    input_activations: list
    preactivation_grads: list = field(default=None)

    @property
    def rows(self):
        return self.input_activations[0].shape[0]

    @property
    def complete(self):
        return self.preactivation_grads is not None


def _append_ones(x):
    return np.hstack([x, np.ones((x.shape[0], 1))])


def forward(params, x):
    """Batched forward pass.  Returns (outputs, cache).

    x has shape (rows, in_dim); outputs (rows, out_dim).  The final layer is
    linear, every earlier layer applies tanh.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.layers[0].in_dim:
        raise ValueError(
            f"input has {x.shape[1]} features, network expects {params.layers[0].in_dim}"
        )
    inputs = []
    h = x
    n_layers = len(params.layers)
    for i, layer in enumerate(params.layers):
        h_aug = _append_ones(h)
        inputs.append(h_aug)
        z = h_aug @ layer.augmented().T
        h = np.tanh(z) if i < n_layers - 1 else z
    return h, LayerCache(input_activations=inputs)


def backward(params, cache, output_grads):
    """Backward pass from per-row output gradients.

    Returns the flat gradient, the mean over rows of the per-row parameter
    gradients.  Fills cache.preactivation_grads with the per-row (unaveraged)
    preactivation gradients as a side effect.
    """
    output_grads = np.asarray(output_grads, dtype=np.float64)
    rows = cache.rows
    if output_grads.shape != (rows, params.layers[-1].out_dim):
        raise ValueError(
            f"output_grads has shape {output_grads.shape}, expected "
            f"({rows}, {params.layers[-1].out_dim})"
        )
    n_layers = len(params.layers)
    preact_grads = [None] * n_layers
    blocks = [None] * n_layers
    g = output_grads
    for l in range(n_layers - 1, -1, -1):
        preact_grads[l] = g
        blocks[l] = g.T @ cache.input_activations[l] / rows
        if l > 0:
            dx = g @ params.layers[l].weight
            y = cache.input_activations[l][:, :-1]  # tanh output of layer l - 1
            g = dx * (1.0 - y * y)
    cache.preactivation_grads = preact_grads
    return np.concatenate([b.ravel() for b in blocks])


def jvp(params, cache, tangent):
    """Directional derivative of the outputs along a flat parameter tangent.

    Forward-mode pass over the intermediates recorded in cache; returns the
    (rows, out_dim) array J @ tangent evaluated per row.
    """
    blocks = unflatten_blocks(params, np.asarray(tangent, dtype=np.float64))
    n_layers = len(params.layers)
    dx = np.zeros((cache.rows, params.layers[0].in_dim))
    dz = None
    for l in range(n_layers):
        x_aug = cache.input_activations[l]
        dz = x_aug @ blocks[l].T + dx @ params.layers[l].weight.T
        if l < n_layers - 1:
            y = cache.input_activations[l + 1][:, :-1]
            dx = dz * (1.0 - y * y)
    return dz


def per_sample_gradient_rows(cache, layer):
    """Per-row flat gradient rows vec(g_r a_r^T) for one layer, shape (rows, p_l)."""
    if not cache.complete:
        raise ValueError("cache has no preactivation gradients; run backward first")
    g = cache.preactivation_grads[layer]
    a = cache.input_activations[layer]
    return np.einsum("ri,rj->rij", g, a).reshape(cache.rows, -1)


def _format_values(arr):
    return " ".join(repr(float(v)) for v in np.asarray(arr).ravel())


def _parse_values(text):
    return np.array([float(tok) for tok in text.split()], dtype=np.float64)


def save_snapshot(path, params, extras=None):
    """Write parameters as a flat key-value text file.

    Float values are rendered with repr, which round-trips float64 exactly,
    so load_snapshot recovers the parameters bit for bit.
    """
    lines = ["format = npgbench-params-v1"]
    lines.append("dims = " + " ".join(str(d) for d in params.dims))
    for i, layer in enumerate(params.layers):
        aug = layer.augmented()
        lines.append(f"layer{i}.shape = {aug.shape[0]} {aug.shape[1]}")
        lines.append(f"layer{i}.values = " + _format_values(aug))
    for name, arr in (extras or {}).items():
        lines.append(f"extra.{name} = " + _format_values(arr))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_snapshot(path):
    """Read a snapshot written by save_snapshot.  Returns (params, extras)."""
    fields = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition(" = ")
            fields[key] = value
    if fields.get("format") != "npgbench-params-v1":
        raise ValueError(f"unrecognized snapshot format in {path}")
    dims = tuple(int(d) for d in fields["dims"].split())
    layers = []
    for i in range(len(dims) - 1):
        out_dim, in_plus1 = (int(v) for v in fields[f"layer{i}.shape"].split())
        if (out_dim, in_plus1) != (dims[i + 1], dims[i] + 1):
            raise ValueError(f"layer{i} shape does not match dims in {path}")
        block = _parse_values(fields[f"layer{i}.values"]).reshape(out_dim, in_plus1)
        layers.append(LayerParams(weight=block[:, :-1].copy(), bias=block[:, -1].copy()))
    extras = {
        key[len("extra.") :]: _parse_values(value)
        for key, value in fields.items()
        if key.startswith("extra.")
    }
    return NetworkParams(layers=layers), extras
