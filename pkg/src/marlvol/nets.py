"""Small feed-forward networks with explicit gradients and Adam.

Fixed topology: tanh hidden layers, identity output. Everything is plain
float64 numpy so parameter updates, finite-difference checks and checkpoint
round-trips stay exact and framework-free. Layouts:

* ``Mlp.weights[i]`` has shape ``(n_in, n_out)``; activations are row batches.
* Parameter "arrays" are the interleaved list ``[W0, b0, W1, b1, ...]``; all
  gradient lists and Adam moment lists are aligned with it.
"""
from __future__ import annotations

import io
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

LOG_STD_MIN = float(np.log(1e-3))
LOG_STD_MAX = 0.0  # ln 1
_LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass
class Mlp:
    """Tanh MLP parameters. ``layer_sizes`` includes input and output dims."""

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def arrays(self) -> list[np.ndarray]:
        """Interleaved [W0, b0, W1, b1, ...] view of the parameters."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays)

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes,
                   [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases])


def mlp_init(layer_sizes, rng: np.random.Generator,
             out_scale: float = 1.0, out_bias=None) -> Mlp:
    """Fan-in scaled uniform init: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    ``out_scale`` multiplies the final layer's weights (policy heads start
    near-constant with a small value), ``out_bias`` overrides its bias vector.
    """
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ConfigError(f"layer_sizes must be >=2 positive dims, got {sizes}")
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_in, n_out))
        b = np.zeros(n_out)
        if i == len(sizes) - 2:
            w *= out_scale
            if out_bias is not None:
                b = np.array(out_bias, dtype=float).reshape(n_out).copy()
        weights.append(w)
        biases.append(b)
    return Mlp(sizes, weights, biases)


def _check_input(net: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.layer_sizes[0]:
        raise ShapeError(
            f"expected input (*, {net.layer_sizes[0]}), got {x.shape}")
    return x


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Batch forward pass, shape (N, d_in) -> (N, d_out)."""
    a = _check_input(net, x)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w + b
        if i < last:
            a = np.tanh(a)
    return a


def mlp_forward_cached(net: Mlp, x: np.ndarray):
    """Forward pass that also returns the per-layer activations for backward.

    The cache is the list of layer inputs [a0, a1, ..., a_{L-1}] where a0 is
    the network input and a_i (i >= 1) are post-tanh hidden activations.
    """
    a = _check_input(net, x)
    cache = [a]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w + b
        if i < last:
            a = np.tanh(a)
            cache.append(a)
    return a, cache


def mlp_backward(net: Mlp, cache: list[np.ndarray], grad_out: np.ndarray):
    """Backprop an upstream gradient through the net.

    Returns ``(grads, grad_input)`` where ``grads`` aligns with ``net.arrays``
    and ``grad_input`` has the input batch shape.
    """
    g = np.asarray(grad_out, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (cache[0].shape[0], net.layer_sizes[-1]):
        raise ShapeError(
            f"expected upstream ({cache[0].shape[0]}, {net.layer_sizes[-1]}),"
            f" got {g.shape}")
    n_layers = len(net.weights)
    grads: list[np.ndarray | None] = [None] * (2 * n_layers)
    for i in range(n_layers - 1, -1, -1):
        a_in = cache[i]
        grads[2 * i] = a_in.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i].T
        if i > 0:
            g = g * (1.0 - a_in * a_in)  # tanh' through the producing layer
    return grads, g


# ---------------------------------------------------------------------------
# Gaussian policy head
# ---------------------------------------------------------------------------

@dataclass
class GaussianPolicy:
    """Diagonal-Gaussian policy over actions.

    With ``state_dependent_std`` the net emits 2*action_dim values
    (mean || raw log-std); otherwise it emits the mean only and a learnable
    ``log_std_param`` vector supplies the (state-independent) log-std. Raw
    log-stds are clamped to [ln 1e-3, ln 1] in both modes.
    """

    net: Mlp
    action_dim: int
    state_dependent_std: bool = True
    log_std_param: np.ndarray | None = None

    @property
    def arrays(self) -> list[np.ndarray]:
        out = self.net.arrays
        if not self.state_dependent_std:
            out.append(self.log_std_param)
        return out

    @property
    def state_dim(self) -> int:
        return self.net.layer_sizes[0]


def policy_init(state_dim: int, action_dim: int, hidden, rng,
                mean_bias=None, log_std_bias: float = -1.6,
                state_dependent_std: bool = True) -> GaussianPolicy:
    """Build a policy whose initial output sits at the given biases.

    The output layer is down-scaled so early actions are close to
    ``mean_bias`` with exploration std ``exp(log_std_bias)``.
    """
    out_dim = 2 * action_dim if state_dependent_std else action_dim
    if mean_bias is None:
        mean_bias = np.zeros(action_dim)
    mean_bias = np.broadcast_to(np.asarray(mean_bias, float), (action_dim,))
    if state_dependent_std:
        bias = np.concatenate([mean_bias, np.full(action_dim, log_std_bias)])
    else:
        bias = mean_bias
    net = mlp_init((state_dim, *hidden, out_dim), rng,
                   out_scale=0.01, out_bias=bias)
    log_std_param = None
    if not state_dependent_std:
        log_std_param = np.full(action_dim, float(log_std_bias))
    return GaussianPolicy(net, action_dim, state_dependent_std, log_std_param)


def policy_head(policy: GaussianPolicy, states: np.ndarray):
    """Evaluate (mean, clamped log-std) and keep a cache for backward."""
    out, net_cache = mlp_forward_cached(policy.net, states)
    ad = policy.action_dim
    if policy.state_dependent_std:
        mean = out[:, :ad]
        raw = out[:, ad:]
    else:
        mean = out
        raw = np.broadcast_to(policy.log_std_param, mean.shape)
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    clamp_mask = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
    cache = (net_cache, clamp_mask)
    return mean, log_std, cache


def policy_head_mean_std(policy: GaussianPolicy, states: np.ndarray):
    """Cache-free head evaluation (rollout hot path)."""
    out = mlp_forward(policy.net, states)
    ad = policy.action_dim
    if policy.state_dependent_std:
        mean, raw = out[:, :ad], out[:, ad:]
    else:
        mean = out
        raw = np.broadcast_to(policy.log_std_param, mean.shape)
    return mean, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)


def policy_head_backward(policy: GaussianPolicy, cache,
                         d_mean: np.ndarray, d_log_std: np.ndarray):
    """Backprop gradients w.r.t. (mean, log-std) into parameter gradients.

    Clamped log-std coordinates receive zero gradient. Returns a list aligned
    with ``policy.arrays``.
    """
    net_cache, clamp_mask = cache
    d_raw = d_log_std * clamp_mask
    if policy.state_dependent_std:
        upstream = np.concatenate([d_mean, d_raw], axis=1)
        grads, _ = mlp_backward(policy.net, net_cache, upstream)
        return grads
    grads, _ = mlp_backward(policy.net, net_cache, d_mean)
    grads.append(d_raw.sum(axis=0))
    return grads


def gaussian_sample(mean: np.ndarray, log_std: np.ndarray,
                    z: np.ndarray) -> np.ndarray:
    """Reparameterized draw mean + exp(log_std) * z."""
    return mean + np.exp(log_std) * z


def gaussian_log_prob(mean, log_std, actions) -> np.ndarray:
    """Diagonal-Gaussian log density, summed over action dims -> (N,)."""
    u = (actions - mean) * np.exp(-log_std)
    return (-0.5 * u * u - log_std - 0.5 * _LOG_2PI).sum(axis=-1)


def gaussian_log_prob_grads(mean, log_std, actions):
    """d logp / d mean and d logp / d log_std, both (N, action_dim)."""
    inv_var = np.exp(-2.0 * log_std)
    diff = actions - mean
    d_mean = diff * inv_var
    d_log_std = diff * diff * inv_var - 1.0
    return d_mean, d_log_std


def gaussian_kl(mean0, log_std0, mean1, log_std1) -> np.ndarray:
    """KL(N(mean0, e^{2 log_std0}) || N(mean1, e^{2 log_std1})), per row.

    The variance ratio is taken as one exponential of the log-std gap so
    the divergence (and its gradient) is exactly zero at identical
    parameters.
    """
    var_ratio = np.exp(2.0 * (log_std0 - log_std1))
    inv_var1 = np.exp(-2.0 * log_std1)
    diff = mean1 - mean0
    per_dim = (log_std1 - log_std0
               + 0.5 * (var_ratio + diff * diff * inv_var1) - 0.5)
    return per_dim.sum(axis=-1)


def gaussian_kl_grads(mean0, log_std0, mean1, log_std1):
    """Gradients of the KL above w.r.t. the *new* (mean1, log_std1)."""
    var_ratio = np.exp(2.0 * (log_std0 - log_std1))
    inv_var1 = np.exp(-2.0 * log_std1)
    diff = mean1 - mean0
    d_mean1 = diff * inv_var1
    d_log_std1 = 1.0 - var_ratio - diff * diff * inv_var1
    return d_mean1, d_log_std1


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moments aligned with a parameter array list."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_init(arrays: list[np.ndarray], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(lr, beta1, beta2, eps, 0,
                     [np.zeros_like(a) for a in arrays],
                     [np.zeros_like(a) for a in arrays])


def adam_step(state: AdamState, arrays: list[np.ndarray],
              grads: list[np.ndarray]) -> None:
    """One in-place Adam update of ``arrays`` along ``grads`` (descent)."""
    if len(arrays) != len(state.m) or len(grads) != len(state.m):
        raise ShapeError(
            f"adam_step: expected {len(state.m)} arrays, got "
            f"{len(arrays)} params / {len(grads)} grads")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        a -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def pack_mlp(prefix: str, net: Mlp) -> dict[str, np.ndarray]:
    out = {f"{prefix}.sizes": np.array(net.layer_sizes, dtype=np.int64)}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def unpack_mlp(prefix: str, blob: dict[str, np.ndarray]) -> Mlp:
    key = f"{prefix}.sizes"
    if key not in blob:
        raise ConfigError(f"checkpoint missing '{key}'")
    sizes = tuple(int(s) for s in blob[key])
    weights = [blob[f"{prefix}.w{i}"] for i in range(len(sizes) - 1)]
    biases = [blob[f"{prefix}.b{i}"] for i in range(len(sizes) - 1)]
    return Mlp(sizes, weights, biases)


def pack_adam(prefix: str, state: AdamState) -> dict[str, np.ndarray]:
    out = {
        f"{prefix}.hyper": np.array(
            [state.lr, state.beta1, state.beta2, state.eps, state.step]),
    }
    for i, (m, v) in enumerate(zip(state.m, state.v)):
        out[f"{prefix}.m{i}"] = m
        out[f"{prefix}.v{i}"] = v
    return out


def unpack_adam(prefix: str, blob: dict[str, np.ndarray]) -> AdamState:
    key = f"{prefix}.hyper"
    if key not in blob:
        raise ConfigError(f"checkpoint missing '{key}'")
    lr, b1, b2, eps, step = blob[key]
    m, v = [], []
    i = 0
    while f"{prefix}.m{i}" in blob:
        m.append(blob[f"{prefix}.m{i}"])
        v.append(blob[f"{prefix}.v{i}"])
        i += 1
    return AdamState(float(lr), float(b1), float(b2), float(eps),
                     int(step), m, v)


def save_checkpoint(path, blob: dict[str, np.ndarray], meta: dict) -> None:
    """Atomically write arrays + a JSON metadata record to an .npz file."""
    payload = dict(blob)
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Inverse of save_checkpoint -> (arrays dict, meta dict)."""
    with np.load(path) as data:
        blob = {k: data[k] for k in data.files if k != "__meta__"}
        meta = json.loads(bytes(data["__meta__"]).decode()) \
            if "__meta__" in data.files else {}
    return blob, meta
