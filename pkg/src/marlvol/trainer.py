"""Shared-policy training loop over trajectory populations.

All trajectories act through one Gaussian policy. Exploration noise is
drawn only for a small set of basis trajectories, re-picked uniformly at
every (run, step); every other trajectory receives noise interpolated
from the basis set in (standardized) state space and assembles its
action as mean + noise * std from its own policy evaluation. Updates
pool the basis trajectories' experiences into a single PPO step
(clipped surrogate plus an adaptive KL penalty) or, alternatively, one
plain policy-gradient (A2C) step, followed by a few epochs of value-net
regression on undiscounted returns-to-go.

Noise budgeting: basis picks, exploration draws and SGD shuffling use
the iteration-keyed streams so every training iteration explores
fresh directions, while the spot and vol-sampling streams stay
iteration-free (common random numbers across iterations). Rewards are
multiplied by ``reward_scale`` for the optimizer only; history rows and
game values stay unscaled.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
import warnings

import numpy as np
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import QhullError, cKDTree

from . import nets
from .engine import Stream, noise_stream, simulate_episode
from .errors import ConfigError, NumericError, ShapeError
from .game import build_reference_table, episode_rewards, estimate_game_value

log = logging.getLogger(__name__)

# Initial mean of the second action coordinate in variant A (the log
# spread of the sampled log-vol): a tight spread keeps the starting
# smile close to the sigma_init level instead of convexity-lifted.
VOL_LOG_STD_INIT = -2.5

# Coordinates whose basis spread is below this relative floor carry no
# geometric information and are dropped before interpolation.
_COORD_TOL = 1e-12


def action_dim_for(variant):
    """Action vector width of an engine action variant."""
    if variant == "A":
        return 2
    if variant == "B":
        return 3
    raise ConfigError(f"unknown action variant {variant!r}")


def action_mean_bias(variant, sigma_init):
    """Initial policy mean so episode zero starts near sigma_init."""
    if variant == "A":
        return np.array([math.log(sigma_init), VOL_LOG_STD_INIT])
    return np.zeros(action_dim_for(variant))


@dataclasses.dataclass(frozen=True)
class TrainerConfig:
    """Optimization knobs for the shared-policy loop.

    minibatch size is ``floor(minibatch_frac * buffer)`` with the buffer
    holding n_p * runs * steps samples. ``plateau_window = 0`` disables
    the plateau stop. ``algo`` picks PPO (default) or the plain pooled
    policy-gradient step.
    """

    n_p: int = 100
    interp: str = "linear"
    knn_k: int = 4
    knn_idw: bool = False
    clip: float = 0.3
    kl_target: float = 0.01
    kl_coef: float = 1.0
    lr: float = 1e-4
    epochs: int = 30
    minibatch_frac: float = 0.1
    value_lr: float = 1e-3
    value_epochs: int = 10
    max_iterations: int = 500
    plateau_window: int = 50
    plateau_rel_tol: float = 1e-3
    normalize_advantages: bool = True
    reward_scale: float = 1e4
    algo: str = "ppo"
    hidden: tuple = (50, 50, 50)
    value_hidden: tuple = (50, 50, 50)
    log_std_bias: float = -1.6

    def __post_init__(self):
        if self.n_p < 1:
            raise ConfigError("n_p must be >= 1")
        if self.interp not in ("linear", "knn"):
            raise ConfigError(f"unknown interpolation mode {self.interp!r}")
        if self.knn_k < 1:
            raise ConfigError("knn_k must be >= 1")
        if self.clip <= 0.0:
            raise ConfigError("clip must be positive")
        if self.kl_target <= 0.0 or self.kl_coef <= 0.0:
            raise ConfigError("kl_target and kl_coef must be positive")
        if self.lr < 0.0 or self.value_lr < 0.0:
            raise ConfigError("learning rates must be >= 0")
        if self.epochs < 1 or self.value_epochs < 0:
            raise ConfigError("epochs must be >= 1 (value epochs >= 0)")
        if not 0.0 < self.minibatch_frac <= 1.0:
            raise ConfigError("minibatch_frac must be in (0, 1]")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.plateau_window < 0 or self.plateau_rel_tol < 0.0:
            raise ConfigError("plateau settings must be >= 0")
        if self.reward_scale <= 0.0:
            raise ConfigError("reward_scale must be positive")
        if self.algo not in ("ppo", "a2c"):
            raise ConfigError(f"unknown algo {self.algo!r}")
        for h in (*self.hidden, *self.value_hidden):
            if int(h) <= 0:
                raise ConfigError("hidden layer sizes must be positive")

    def minibatch_size(self, buffer_len):
        return max(1, min(buffer_len, int(self.minibatch_frac * buffer_len)))


# ---------------------------------------------------------------------------
# State featurization
# ---------------------------------------------------------------------------

def featurize_states(raw, delta):
    """Map raw observations to net inputs.

    The raw layout is (t_step, spot, vol, [frozen_spot, frozen_vol]);
    features are (t_step * delta, ln spot, ln vol, [ln frozen...]).
    Accepts any leading batch shape.
    """
    raw = np.asarray(raw, dtype=np.float64)
    out = np.empty_like(raw)
    out[..., 0] = raw[..., 0] * delta
    with np.errstate(divide="ignore", invalid="ignore"):
        out[..., 1:] = np.log(raw[..., 1:])
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite state features")
    return out


# ---------------------------------------------------------------------------
# Basis players and exploration interpolation
# ---------------------------------------------------------------------------

def pick_basis_players(n, n_p, rng):
    """Uniform sample of n_p distinct trajectory indices, ascending."""
    if n_p > n:
        raise ConfigError(f"n_p={n_p} exceeds the trajectory count n={n}")
    idx = rng.choice(n, size=n_p, replace=False)
    idx.sort()
    return idx


def basis_actions(policy, states, rng):
    """Sample exploration actions at the basis states.

    Returns (actions, z, log_probs, mean, log_std) where z is the raw
    standard-normal draw and actions = mean + exp(log_std) * z.
    """
    mean, log_std = nets.policy_head_mean_std(policy, states)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_std))):
        raise NumericError("non-finite policy output at basis states")
    z = rng.standard_normal(mean.shape)
    actions = nets.gaussian_sample(mean, log_std, z)
    log_probs = nets.gaussian_log_prob(mean, log_std, actions)
    return actions, z, log_probs, mean, log_std


@dataclasses.dataclass
class ExplorationField:
    """Per-(run, step) exploration noise attached to basis states.

    ``coords`` are the standardized non-time state coordinates that
    survived the zero-spread drop; ``basis_indices`` locates the basis
    rows inside the query population so their own draws are restored
    exactly after interpolation.
    """

    coords: np.ndarray
    z: np.ndarray
    keep: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    mode: str
    k: int
    idw: bool = False
    basis_indices: np.ndarray | None = None
    degenerate: bool = False
    grid_1d: tuple | None = None
    linear: object = None
    tree: object = None


def fit_exploration_field(states, z, *, mode="linear", k=4, idw=False,
                          basis_indices=None):
    """Build the interpolator over basis states.

    states is (n_p, d) featurized with the time column first; z is
    (n_p, action_dim). Coordinates with no spread across the basis set
    are dropped; if none survive, the field is degenerate and every
    query receives the mean basis noise (k-NN with k = n_p).
    """
    states = np.asarray(states, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if states.ndim != 2 or states.shape[0] < 1:
        raise ShapeError(f"need (n_p, d) basis states, got {states.shape}")
    if z.ndim != 2 or z.shape[0] != states.shape[0]:
        raise ShapeError(f"z {z.shape} does not match states {states.shape}")
    if mode not in ("linear", "knn"):
        raise ConfigError(f"unknown interpolation mode {mode!r}")
    raw = states[:, 1:]
    center = raw.mean(axis=0)
    scale = raw.std(axis=0)
    keep = scale > _COORD_TOL * np.maximum(1.0, np.abs(center))
    field = ExplorationField(
        coords=np.empty((states.shape[0], 0)), z=z, keep=keep, center=center,
        scale=scale, mode=mode, k=int(k), idw=idw,
        basis_indices=None if basis_indices is None
        else np.asarray(basis_indices, dtype=np.intp))
    if not np.any(keep):
        field.degenerate = True
        return field
    coords = (raw[:, keep] - center[keep]) / scale[keep]
    field.coords = coords
    if mode == "linear" and coords.shape[1] == 1:
        xs = coords[:, 0]
        grid, inverse, counts = np.unique(xs, return_inverse=True,
                                          return_counts=True)
        zg = np.zeros((grid.size, z.shape[1]))
        np.add.at(zg, inverse, z)
        zg /= counts[:, None]
        field.grid_1d = (grid, zg)
        return field
    field.tree = cKDTree(coords)
    if mode == "linear":
        try:
            field.linear = LinearNDInterpolator(coords, z)
        except QhullError:
            log.debug("flat basis geometry, falling back to k-NN")
            field.linear = None
    return field


def interpolate_exploration(field, states):
    """Evaluate the field at every query state.

    Inside the convex hull the linear mode is simplex-linear; outside
    (and whenever the hull is degenerate) queries fall back to nearest
    neighbors. Basis rows named by ``basis_indices`` get their raw
    draws back verbatim.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != field.keep.size + 1:
        raise ShapeError(
            f"need (m, {field.keep.size + 1}) query states, got "
            f"{states.shape}")
    m = states.shape[0]
    adim = field.z.shape[1]
    if field.degenerate:
        out = np.tile(field.z.mean(axis=0), (m, 1))
    elif field.grid_1d is not None:
        grid, zg = field.grid_1d
        raw = states[:, 1:]
        q = (raw[:, field.keep][:, 0] - field.center[field.keep][0]) \
            / field.scale[field.keep][0]
        out = np.empty((m, adim))
        for j in range(adim):
            out[:, j] = np.interp(q, grid, zg[:, j])
    else:
        raw = states[:, 1:]
        q = (raw[:, field.keep] - field.center[field.keep]) \
            / field.scale[field.keep]
        if field.mode == "linear" and field.linear is not None:
            out = np.asarray(field.linear(q), dtype=np.float64)
            miss = np.isnan(out).any(axis=1)
            if np.any(miss):
                _, nearest = field.tree.query(q[miss], k=1)
                out[miss] = field.z[nearest]
        else:
            kk = min(field.k, field.z.shape[0])
            dist, idx = field.tree.query(q, k=kk)
            if kk == 1:
                out = field.z[idx]
            elif field.idw:
                w = 1.0 / (dist + 1e-12)
                w /= w.sum(axis=1, keepdims=True)
                out = np.einsum("mk,mkj->mj", w, field.z[idx])
            else:
                out = field.z[idx].mean(axis=1)
    if field.basis_indices is not None:
        if field.basis_indices.size and field.basis_indices.max() >= m:
            raise ShapeError(
                f"basis index {int(field.basis_indices.max())} outside the "
                f"query population of {m}")
        out[field.basis_indices] = field.z
    return out


# ---------------------------------------------------------------------------
# Rollout collection
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class RolloutBuffer:
    """Pooled basis-player experiences of one episode.

    Rows are ordered (step, run, player slot). rewards holds the shared
    unscaled reward earned right after each action; rewards_matrix is
    the full (runs, steps+1) table the returns are computed from.
    returns and advantages are filled by compute_advantages.
    """

    states: np.ndarray
    actions: np.ndarray
    z: np.ndarray
    old_mean: np.ndarray
    old_log_std: np.ndarray
    old_logp: np.ndarray
    run: np.ndarray
    step: np.ndarray
    player: np.ndarray
    traj: np.ndarray
    rewards: np.ndarray
    rewards_matrix: np.ndarray
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __len__(self):
        return self.states.shape[0]


def collect_rollout(policy, config, spec, trainer, *, iteration,
                    path_dependent=False, action_variant="A",
                    localization=None, store_actions=False):
    """Simulate one episode under basis-player exploration.

    Returns (episode, breakdown, buffer). The policy head is evaluated
    once per step for all runs; basis rows keep their own sampled
    actions bitwise, everything else gets the interpolated noise.
    """
    n, T, B = config.n, config.steps, config.runs
    if trainer.n_p > n:
        raise ConfigError(f"n_p={trainer.n_p} exceeds n={n}")
    adim = action_dim_for(action_variant)
    n_p = trainer.n_p
    rec_states = np.empty((T, B, n_p, 5 if path_dependent else 3))
    rec_actions = np.empty((T, B, n_p, adim))
    rec_z = np.empty((T, B, n_p, adim))
    rec_mean = np.empty((T, B, n_p, adim))
    rec_lstd = np.empty((T, B, n_p, adim))
    rec_logp = np.empty((T, B, n_p))
    rec_traj = np.empty((T, B, n_p), dtype=np.intp)

    def action_fn(t, state):
        feats = featurize_states(state.raw_array(), config.delta)
        d = feats.shape[-1]
        mean, log_std = nets.policy_head_mean_std(
            policy, feats.reshape(B * n, d))
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_std))):
            raise NumericError(f"non-finite policy output at step {t}")
        mean = mean.reshape(B, n, adim)
        log_std = log_std.reshape(B, n, adim)
        acts = np.empty((B, n, adim))
        for b in range(B):
            pick_rng = noise_stream(config.seed, Stream.BASIS_PICK, run=b,
                                    step=t, iteration=iteration)
            idx = pick_basis_players(n, n_p, pick_rng)
            z_rng = noise_stream(config.seed, Stream.EXPLORE, run=b, step=t,
                                 iteration=iteration)
            z = z_rng.standard_normal((n_p, adim))
            bmean = mean[b, idx]
            blstd = log_std[b, idx]
            ba = nets.gaussian_sample(bmean, blstd, z)
            field = fit_exploration_field(
                feats[b, idx], z, mode=trainer.interp, k=trainer.knn_k,
                idw=trainer.knn_idw, basis_indices=idx)
            zhat = interpolate_exploration(field, feats[b])
            acts[b] = mean[b] + np.exp(log_std[b]) * zhat
            acts[b, idx] = ba
            rec_states[t, b] = feats[b, idx]
            rec_actions[t, b] = ba
            rec_z[t, b] = z
            rec_mean[t, b] = bmean
            rec_lstd[t, b] = blstd
            rec_logp[t, b] = nets.gaussian_log_prob(bmean, blstd, ba)
            rec_traj[t, b] = idx
        return acts

    episode = simulate_episode(
        config, action_fn, action_variant=action_variant,
        path_dependent=path_dependent, localization=localization,
        store_actions=store_actions)
    breakdown = episode_rewards(episode.spots, spec, vols=episode.vols)
    N = T * B * n_p
    steps_col = np.repeat(np.arange(T), B * n_p)
    runs_col = np.tile(np.repeat(np.arange(B), n_p), T)
    players_col = np.tile(np.arange(n_p), T * B)
    buffer = RolloutBuffer(
        states=rec_states.reshape(N, -1),
        actions=rec_actions.reshape(N, adim),
        z=rec_z.reshape(N, adim),
        old_mean=rec_mean.reshape(N, adim),
        old_log_std=rec_lstd.reshape(N, adim),
        old_logp=rec_logp.reshape(N),
        run=runs_col, step=steps_col, player=players_col,
        traj=rec_traj.reshape(N),
        rewards=breakdown.rewards[runs_col, steps_col + 1],
        rewards_matrix=breakdown.rewards)
    return episode, breakdown, buffer


def compute_advantages(buffer, value_net, *, reward_scale=1.0,
                       normalize=True):
    """Fill returns-to-go and advantages on the buffer.

    The return of an action at step t is the undiscounted sum of the
    shared rewards earned strictly after it, times reward_scale; the
    advantage subtracts the value net's estimate (zero when value_net
    is None) and is optionally normalized over the whole batch.
    """
    tail = np.cumsum(buffer.rewards_matrix[:, ::-1], axis=1)[:, ::-1]
    returns = tail[buffer.run, buffer.step + 1] * reward_scale
    if value_net is None:
        values = np.zeros(len(buffer))
    else:
        values = nets.mlp_forward(value_net, buffer.states)[:, 0]
    adv = returns - values
    if not np.all(np.isfinite(adv)):
        raise NumericError("non-finite advantages")
    if normalize:
        centered = adv - adv.mean()
        sd = centered.std()
        adv = centered / sd if sd > 1e-12 else centered
    buffer.returns = returns
    buffer.advantages = adv
    return adv, returns


# ---------------------------------------------------------------------------
# Policy updates
# ---------------------------------------------------------------------------

def ppo_minibatch_grads(policy, buffer, sel, *, clip, kl_coef):
    """Gradients of the clipped surrogate + KL penalty on one minibatch.

    Returns (grads, stats) with grads aligned to policy.arrays (descent
    direction) and stats carrying the minibatch loss pieces.
    """
    states = buffer.states[sel]
    actions = buffer.actions[sel]
    adv = buffer.advantages[sel]
    mean, log_std, cache = nets.policy_head(policy, states)
    logp = nets.gaussian_log_prob(mean, log_std, actions)
    # exp() overflow guard: ratios this large are clipped out anyway.
    ratio = np.exp(np.minimum(logp - buffer.old_logp[sel], 30.0))
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    flow = surr1 <= surr2
    n_mb = sel.size
    d_logp = np.where(flow, ratio * adv, 0.0) * (-1.0 / n_mb)
    d_mean_lp, d_lstd_lp = nets.gaussian_log_prob_grads(mean, log_std,
                                                        actions)
    d_mean = d_logp[:, None] * d_mean_lp
    d_lstd = d_logp[:, None] * d_lstd_lp
    kl = nets.gaussian_kl(buffer.old_mean[sel], buffer.old_log_std[sel],
                          mean, log_std)
    d_mean_kl, d_lstd_kl = nets.gaussian_kl_grads(
        buffer.old_mean[sel], buffer.old_log_std[sel], mean, log_std)
    d_mean += (kl_coef / n_mb) * d_mean_kl
    d_lstd += (kl_coef / n_mb) * d_lstd_kl
    grads = nets.policy_head_backward(policy, cache, d_mean, d_lstd)
    loss = float(-np.minimum(surr1, surr2).mean() + kl_coef * kl.mean())
    return grads, {"loss": loss, "kl": float(kl.mean())}


def _full_batch_kl(policy, buffer):
    mean, log_std = nets.policy_head_mean_std(policy, buffer.states)
    return float(nets.gaussian_kl(buffer.old_mean, buffer.old_log_std,
                                  mean, log_std).mean())


def ppo_update(policy, adam, buffer, trainer, rng, kl_coef):
    """Run the epoch loop of clipped-surrogate minibatch SGD.

    The KL between the behavior policy and the updated one is measured
    on the full buffer after every epoch; the loop stops early when it
    exceeds 10x the target, and the penalty coefficient adapts (x2 when
    above 1.5x target, /2 when below target/1.5). Returns (stats,
    new_kl_coef).
    """
    if buffer.advantages is None:
        raise ConfigError("compute_advantages must run before ppo_update")
    N = len(buffer)
    mb = trainer.minibatch_size(N)
    epochs_run = 0
    kl = 0.0
    for _ in range(trainer.epochs):
        perm = rng.permutation(N)
        for lo in range(0, N, mb):
            sel = perm[lo:lo + mb]
            grads, _ = ppo_minibatch_grads(policy, buffer, sel,
                                           clip=trainer.clip,
                                           kl_coef=kl_coef)
            nets.adam_step(adam, policy.arrays, grads)
        epochs_run += 1
        kl = _full_batch_kl(policy, buffer)
        if kl > 10.0 * trainer.kl_target:
            warnings.warn("policy KL above 10x target; stopping the epoch "
                          "loop early", RuntimeWarning)
            log.debug("epoch loop stopped at epoch %d with KL %.3e",
                      epochs_run, kl)
            break
    mean, log_std = nets.policy_head_mean_std(policy, buffer.states)
    logp = nets.gaussian_log_prob(mean, log_std, buffer.actions)
    ratio = np.exp(np.minimum(logp - buffer.old_logp, 30.0))
    clip_fraction = float(np.mean(np.abs(ratio - 1.0) > trainer.clip))
    surr = np.minimum(ratio * buffer.advantages,
                      np.clip(ratio, 1.0 - trainer.clip,
                              1.0 + trainer.clip) * buffer.advantages)
    loss = float(-surr.mean() + kl_coef * kl)
    new_coef = kl_coef
    if kl > 1.5 * trainer.kl_target:
        new_coef = min(kl_coef * 2.0, 1e6)
    elif kl < trainer.kl_target / 1.5:
        new_coef = max(kl_coef / 2.0, 1e-6)
    stats = {"policy_loss": loss, "kl": kl, "clip_fraction": clip_fraction,
             "epochs_run": epochs_run, "kl_coef": kl_coef}
    return stats, new_coef


def a2c_gradient(policy, buffer):
    """Ascent gradient of the pooled score-function objective.

    The objective is the buffer mean of log pi(a|x) * advantage; the
    returned list aligns with policy.arrays.
    """
    if buffer.advantages is None:
        raise ConfigError("compute_advantages must run before a2c_gradient")
    mean, log_std, cache = nets.policy_head(policy, buffer.states)
    d_mean_lp, d_lstd_lp = nets.gaussian_log_prob_grads(mean, log_std,
                                                        buffer.actions)
    w = (buffer.advantages / len(buffer))[:, None]
    return nets.policy_head_backward(policy, cache, w * d_mean_lp,
                                     w * d_lstd_lp)


def a2c_update(policy, buffer, trainer):
    """One plain gradient-ascent step along the pooled gradient."""
    grads = a2c_gradient(policy, buffer)
    for arr, g in zip(policy.arrays, grads):
        arr += trainer.lr * g
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    return {"policy_loss": float("nan"), "kl": float("nan"),
            "clip_fraction": float("nan"), "epochs_run": 1,
            "grad_norm": norm}


def value_update(value_net, adam, buffer, trainer, rng):
    """Minibatch MSE regression of the value net onto returns-to-go."""
    if buffer.returns is None:
        raise ConfigError("compute_advantages must run before value_update")
    N = len(buffer)
    targets = buffer.returns

    def full_loss():
        out = nets.mlp_forward(value_net, buffer.states)[:, 0]
        return float(np.mean((out - targets) ** 2))

    loss_before = full_loss()
    mb = trainer.minibatch_size(N)
    for _ in range(trainer.value_epochs):
        perm = rng.permutation(N)
        for lo in range(0, N, mb):
            sel = perm[lo:lo + mb]
            out, cache = nets.mlp_forward_cached(value_net,
                                                 buffer.states[sel])
            resid = out[:, 0] - targets[sel]
            grads, _ = nets.mlp_backward(
                value_net, cache, (2.0 * resid / sel.size)[:, None])
            nets.adam_step(adam, value_net.arrays, grads)
    return {"value_loss_before": loss_before, "value_loss_after": full_loss()}


# ---------------------------------------------------------------------------
# Reference model resolution
# ---------------------------------------------------------------------------

def resolve_reference(config, spec, reference_vol_fn):
    """Fill the reward spec's reference table from a reference episode.

    The reference model diffuses the same spot-noise streams with
    vols from reference_vol_fn(t_years, spots); its average residual
    errors become e_ref and, for a Bermudan spec, its pooled
    max-European implied vol replaces the (placeholder) target.
    Returns (resolved spec, reference episode).
    """
    ref = simulate_episode(config, None, fixed_vol=reference_vol_fn,
                           store_actions=False)
    table = build_reference_table(ref.spots, spec)
    kwargs = {"e_ref": table.e_ref}
    if spec.bermudan is not None:
        kwargs["bermudan_target_iv"] = table.bermudan_target_iv
    return dataclasses.replace(spec, **kwargs), ref


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class TrainResult:
    """Trained nets plus the per-iteration history."""

    policy: nets.GaussianPolicy
    value: nets.Mlp
    policy_adam: nets.AdamState
    value_adam: nets.AdamState
    history: list
    iterations: int
    stop_reason: str
    spec: object
    last_episode: object = None
    last_breakdown: object = None


def _worst_quote_error(breakdown, spec):
    errs = [abs(comp.model_iv - comp.target_iv)
            for per_run in breakdown.step_rewards
            for sr in per_run if sr.step in spec.quotes_by_step
            for comp in sr.components]
    return max(errs) if errs else float("nan")


def init_policy(state_dim, action_variant, sigma_init, trainer, rng):
    """Policy whose initial actions sit at the variant's neutral level."""
    adim = action_dim_for(action_variant)
    return nets.policy_init(state_dim, adim, trainer.hidden, rng,
                            mean_bias=action_mean_bias(action_variant,
                                                       sigma_init),
                            log_std_bias=trainer.log_std_bias)


def marlvol_train(config, spec, trainer, *, path_dependent=False,
                  action_variant="A", localization=None,
                  reference_vol_fn=None, policy=None, value=None,
                  callback=None, log_every=25):
    """Iterate rollout / reward / update until plateau or the cap.

    When reference_vol_fn is given the reward spec's e_ref table (and
    Bermudan target) is rebuilt from a reference episode first. The
    callback, when set, receives (history row, episode, reward
    breakdown) after every iteration; returning a truthy value stops
    training with stop_reason "callback". History game values are
    unscaled.
    """
    if reference_vol_fn is not None:
        spec, _ = resolve_reference(config, spec, reference_vol_fn)
    state_dim = 5 if path_dependent else 3
    if policy is None:
        rng = noise_stream(config.seed, Stream.SGD, iteration=0, run=0,
                           step=1)
        policy = init_policy(state_dim, action_variant, config.sigma_init,
                             trainer, rng)
    if policy.state_dim != state_dim:
        raise ConfigError(
            f"policy expects {policy.state_dim}-dim states but the "
            f"{'path-dependent' if path_dependent else 'plain'} mode "
            f"produces {state_dim}")
    if value is None:
        rng = noise_stream(config.seed, Stream.SGD, iteration=0, run=0,
                           step=2)
        value = nets.mlp_init((state_dim, *trainer.value_hidden, 1), rng)
    pol_adam = nets.adam_init(policy.arrays, trainer.lr)
    val_adam = nets.adam_init(value.arrays, trainer.value_lr)
    kl_coef = trainer.kl_coef
    history = []
    values_seen = []
    stop_reason = "max_iterations"
    episode = breakdown = None
    t_start = time.monotonic()
    for it in range(trainer.max_iterations):
        try:
            episode, breakdown, buffer = collect_rollout(
                policy, config, spec, trainer, iteration=it,
                path_dependent=path_dependent,
                action_variant=action_variant, localization=localization)
            gv = estimate_game_value(breakdown.rewards)
            compute_advantages(buffer, value,
                               reward_scale=trainer.reward_scale,
                               normalize=trainer.normalize_advantages)
            sgd_rng = noise_stream(config.seed, Stream.SGD, iteration=it,
                                   run=0, step=0)
            if trainer.algo == "ppo":
                stats, kl_coef = ppo_update(policy, pol_adam, buffer,
                                            trainer, sgd_rng, kl_coef)
            else:
                stats = a2c_update(policy, buffer, trainer)
            vstats = value_update(value, val_adam, buffer, trainer, sgd_rng)
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc}") from exc
        except ShapeError as exc:
            raise ShapeError(f"iteration {it}: {exc}") from exc
        row = {"iteration": it, "game_value": gv.value, "game_se": gv.se,
               "max_quote_error": _worst_quote_error(breakdown, spec),
               "clamp_count": episode.clamp_count,
               "elapsed": time.monotonic() - t_start}
        row.update(stats)
        row.update(vstats)
        if breakdown.bermudan_results:
            sw = [r.switch_volpts for r in breakdown.bermudan_results]
            ses = [r.switch_se_volpts for r in breakdown.bermudan_results]
            row["switch_volpts"] = float(np.mean(sw))
            row["switch_se_volpts"] = float(
                math.sqrt(sum(s * s for s in ses)) / len(ses))
        history.append(row)
        values_seen.append(gv.value)
        if callback is not None and callback(row, episode, breakdown):
            stop_reason = "callback"
            log.info("callback stop after %d iterations", it + 1)
            break
        if log_every and (it % log_every == 0 or it
                          == trainer.max_iterations - 1):
            log.info("iter %d value %.3e kl %.2e quote err %.4f",
                     it, gv.value, row.get("kl", float("nan")),
                     row["max_quote_error"])
        w = trainer.plateau_window
        if w and len(values_seen) >= 2 * w:
            older = float(np.mean(values_seen[-2 * w:-w]))
            newer = float(np.mean(values_seen[-w:]))
            if newer - older < trainer.plateau_rel_tol * max(abs(older),
                                                             1e-12):
                stop_reason = "plateau"
                log.info("plateau after %d iterations "
                         "(window means %.3e -> %.3e)", it + 1, older, newer)
                break
    return TrainResult(policy=policy, value=value, policy_adam=pol_adam,
                       value_adam=val_adam, history=history,
                       iterations=len(history), stop_reason=stop_reason,
                       spec=spec, last_episode=episode,
                       last_breakdown=breakdown)


# ---------------------------------------------------------------------------
# Frozen-policy evaluation
# ---------------------------------------------------------------------------

def policy_action_fn(policy, delta):
    """Exploration-free action function: every trajectory acts the mean."""
    def fn(t, state):
        feats = featurize_states(state.raw_array(), delta)
        B, n, d = feats.shape
        mean, _ = nets.policy_head_mean_std(policy, feats.reshape(B * n, d))
        return mean.reshape(B, n, -1)
    return fn


def evaluate_policy(policy, config, spec, *, path_dependent=False,
                    action_variant="A", localization=None, trainer=None,
                    exploration=False, iteration_tag=0):
    """Re-simulate a frozen policy and price the reward spec.

    With exploration on, the episode replays the training-time basis
    machinery at the given iteration tag (trainer config required);
    otherwise all trajectories act the policy mean. Returns (episode,
    breakdown, game value).
    """
    state_dim = 5 if path_dependent else 3
    if policy.state_dim != state_dim:
        raise ConfigError(
            f"checkpoint expects {policy.state_dim}-dim states but the "
            f"{'path-dependent' if path_dependent else 'plain'} mode "
            f"produces {state_dim}")
    if exploration:
        if trainer is None:
            raise ConfigError("stochastic evaluation needs a trainer config")
        episode, breakdown, _ = collect_rollout(
            policy, config, spec, trainer, iteration=iteration_tag,
            path_dependent=path_dependent, action_variant=action_variant,
            localization=localization)
    else:
        episode = simulate_episode(
            config, policy_action_fn(policy, config.delta),
            action_variant=action_variant, path_dependent=path_dependent,
            localization=localization, store_actions=False)
        breakdown = episode_rewards(episode.spots, spec, vols=episode.vols)
    return episode, breakdown, estimate_game_value(breakdown.rewards)


# ---------------------------------------------------------------------------
# Single-state sanity fixture
# ---------------------------------------------------------------------------

def train_bandit(optimum=2.0, *, iterations=200, seed=0, trainer=None):
    """PPO on a one-state quadratic: reward -(a - optimum)^2.

    A shrunk fixture exercising the whole update stack without the
    diffusion engine; returns (policy, history) where each history row
    records the policy mean action. The mean should land within 0.1 of
    the optimum well inside 200 iterations.
    """
    if trainer is None:
        trainer = TrainerConfig(n_p=100, lr=1e-3, reward_scale=1.0,
                                hidden=(16, 16), value_hidden=(16, 16),
                                max_iterations=iterations,
                                plateau_window=0)
    rng = noise_stream(seed, Stream.SGD, iteration=0, run=0, step=1)
    policy = nets.policy_init(1, 1, trainer.hidden, rng,
                              mean_bias=np.zeros(1),
                              log_std_bias=trainer.log_std_bias)
    rng = noise_stream(seed, Stream.SGD, iteration=0, run=0, step=2)
    value = nets.mlp_init((1, *trainer.value_hidden, 1), rng)
    pol_adam = nets.adam_init(policy.arrays, trainer.lr)
    val_adam = nets.adam_init(value.arrays, trainer.value_lr)
    kl_coef = trainer.kl_coef
    states = np.zeros((trainer.n_p, 1))
    history = []
    for it in range(iterations):
        z_rng = noise_stream(seed, Stream.EXPLORE, iteration=it)
        actions, z, logp, mean, log_std = basis_actions(policy, states,
                                                        z_rng)
        rewards = -(actions[:, 0] - optimum) ** 2
        # One pseudo-run per player with a single step, so the return
        # of each row is its own immediate reward.
        buffer = RolloutBuffer(
            states=states, actions=actions, z=z, old_mean=mean,
            old_log_std=log_std, old_logp=logp,
            run=np.arange(trainer.n_p),
            step=np.zeros(trainer.n_p, dtype=np.intp),
            player=np.arange(trainer.n_p),
            traj=np.arange(trainer.n_p),
            rewards=rewards,
            rewards_matrix=rewards[:, None] * np.array([[0.0, 1.0]]))
        compute_advantages(buffer, value, reward_scale=trainer.reward_scale,
                           normalize=trainer.normalize_advantages)
        sgd_rng = noise_stream(seed, Stream.SGD, iteration=it)
        stats, kl_coef = ppo_update(policy, pol_adam, buffer, trainer,
                                    sgd_rng, kl_coef)
        value_update(value, val_adam, buffer, trainer, sgd_rng)
        mu, _ = nets.policy_head_mean_std(policy, np.zeros((1, 1)))
        history.append({"iteration": it, "mean_action": float(mu[0, 0]),
                        "reward": float(np.mean(rewards)), **stats})
    return policy, history
