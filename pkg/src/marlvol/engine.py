"""Vectorized spot diffusion with policy-driven volatility.

Simulates B independent runs of n trajectories in lockstep. Each step t
uses a volatility decided before the spot shock Z_t is drawn, so the
discrete process stays adapted and the log-Euler step is a martingale in
expectation:

    ln S_{t+1} = ln S_t - 0.5 sigma_t^2 delta + sigma_t sqrt(delta) Z_t

Volatility comes from one of two action conventions. Variant "A" treats
the action as (mean, log-std) of ln sigma_t and samples a fresh vol each
step. Variant "B" treats the action as raw SDE parameters (mu, eta, rho)
and evolves ln sigma with a shock correlated to the spot noise; the
action taken at t shapes sigma_{t+1}.

Noise is drawn from Philox streams keyed by (seed, purpose, run, step),
so the spot stream is untouched by exploration machinery and identical
across training iterations (common random numbers). Streams that must
differ per training iteration carry the iteration in their key; those
purposes live in the trainer.

Leverage localization rescales the vol field so its binned conditional
second moment matches a local-vol slice: sigma~ = sigma_loc(t,S) * sigma
/ sqrt(E[sigma^2|S]), with the conditional moment estimated over
equal-count spot bins. All bin reductions run over value-sorted arrays,
making the estimate exactly invariant to trajectory permutations.

Optional path dump format (binary, little-endian): 8-byte magic
b"MVPATH01", then three uint64 fields B, n, T, then the spot array and
the vol array, each float64 C-order with shape (B, T+1, n).
"""
from __future__ import annotations

import dataclasses
import enum
import logging
import os
import tempfile

import numpy as np

from .errors import ConfigError, EstimationError, NumericError, ShapeError

log = logging.getLogger(__name__)

VOL_CLAMP = (0.01, 2.0)
PATH_DUMP_MAGIC = b"MVPATH01"


class Stream(enum.IntEnum):
    """Noise stream purposes; the purpose value is part of the key."""

    SPOT = 0
    VOL_SAMPLE = 1
    VOL_ORTHO = 2
    BASIS_PICK = 3
    EXPLORE = 4
    SGD = 5


def noise_stream(seed, purpose, run=0, step=0, iteration=None):
    """Philox generator keyed by coordinates.

    Streams without an iteration key are shared across training
    iterations (common random numbers); the purpose value disambiguates
    the two key layouts.
    """
    if iteration is None:
        key = (int(seed), int(purpose), int(run), int(step))
    else:
        key = (int(seed), int(purpose), int(iteration), int(run), int(step))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


@dataclasses.dataclass(frozen=True)
class SimConfig:
    """Episode geometry: trajectory count, horizon, runs and key dates."""

    n: int
    steps: int
    runs: int
    seed: int
    t1_step: int
    t2_step: int
    sigma_init: float
    delta: float = 1.0 / 252.0

    def __post_init__(self):
        if self.n < 1 or self.runs < 1:
            raise ConfigError("n and runs must be positive")
        if not 0 < self.t1_step < self.t2_step <= self.steps:
            raise ConfigError(
                f"need 0 < t1 < t2 <= steps, got "
                f"({self.t1_step}, {self.t2_step}, {self.steps})")
        if self.delta <= 0.0:
            raise ConfigError("delta must be positive")
        if self.sigma_init <= 0.0:
            raise ConfigError("sigma_init must be positive")


@dataclasses.dataclass
class PathState:
    """Per-trajectory observation at a step, as (runs, n) arrays.

    Frozen coordinates track the running values until t1, then hold the
    values attained there: frozen_spot = S_{min(t, t1)} and frozen_vol =
    sigma_{min(t-1, t1)}. With path_dependent off they are omitted from
    the stacked array and the observation is (t, spot, prev_vol).
    """

    t: int
    spot: np.ndarray
    prev_vol: np.ndarray
    frozen_spot: np.ndarray
    frozen_vol: np.ndarray
    path_dependent: bool

    @property
    def dim(self):
        return 5 if self.path_dependent else 3

    def raw_array(self):
        """Stack into (runs, n, dim) with a leading time column."""
        t_col = np.full_like(self.spot, float(self.t))
        cols = [t_col, self.spot, self.prev_vol]
        if self.path_dependent:
            cols += [self.frozen_spot, self.frozen_vol]
        return np.stack(cols, axis=-1)


def step_spot(spots, vols, normals, delta):
    """One log-Euler step; vols must be decided before normals are drawn."""
    spots = np.asarray(spots, dtype=np.float64)
    vols = np.asarray(vols, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    nxt = spots * np.exp(
        vols * (np.sqrt(delta) * normals - 0.5 * vols * delta))
    bad = ~np.isfinite(nxt)
    if np.any(bad):
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise NumericError(f"non-finite spot at trajectory {idx}")
    return nxt


def build_state(spots_hist, vols_hist, t, config, path_dependent):
    """Observation at step t from history arrays shaped (runs, T+1, n).

    vols_hist[:, s] holds sigma_s, the vol that diffuses step s to s+1;
    prev_vol at t is sigma_{t-1}, with sigma_{-1} taken as sigma_init.
    """
    if t == 0:
        prev = np.full_like(spots_hist[:, 0], config.sigma_init)
        f_vol = prev
    else:
        prev = vols_hist[:, t - 1]
        f_vol = vols_hist[:, min(t - 1, config.t1_step)]
    f_spot = spots_hist[:, min(t, config.t1_step)]
    return PathState(t=t, spot=spots_hist[:, t], prev_vol=prev,
                     frozen_spot=f_spot, frozen_vol=f_vol,
                     path_dependent=path_dependent)


def vol_from_action_a(actions, z_vol):
    """Variant A: sample ln sigma ~ N(mean, std^2) and clamp sigma.

    actions[..., 0] is the mean, actions[..., 1] the log-std. Returns
    (vols, clamp_count).
    """
    mean = actions[..., 0]
    std = np.exp(actions[..., 1])
    vols = np.exp(mean + std * z_vol)
    clipped = np.clip(vols, *VOL_CLAMP)
    return clipped, int(np.count_nonzero(clipped != vols))


def vol_from_action_b(prev_vols, actions, z_spot, z_ortho, delta):
    """Variant B: evolve ln sigma with spot-correlated noise.

    Raw action coordinates map to SDE parameters mu = a0 (unbounded),
    eta = softplus(a1) >= 0 and rho = tanh(a2) in [-1, 1]:

        ln sigma' = ln sigma + mu delta
                  + eta sqrt(delta) (rho Z + sqrt(1-rho^2) Zperp)

    where Z is the spot shock of the same step. Returns (vols,
    clamp_count) for sigma at the next step.
    """
    mu = actions[..., 0]
    eta = np.logaddexp(0.0, actions[..., 1])
    rho = np.tanh(actions[..., 2])
    root = np.sqrt(delta)
    incr = mu * delta + eta * root * (
        rho * z_spot + np.sqrt(1.0 - rho * rho) * z_ortho)
    vols = prev_vols * np.exp(incr)
    clipped = np.clip(vols, *VOL_CLAMP)
    return clipped, int(np.count_nonzero(clipped != vols))


# ---------------------------------------------------------------------------
# Leverage localization
# ---------------------------------------------------------------------------

def _sorted_group_mean(values, groups, n_groups):
    """Mean of values per group, summing each group in sorted value order."""
    out = np.empty(n_groups)
    for g in range(n_groups):
        seg = np.sort(values[groups == g])
        if seg.size == 0:
            raise EstimationError(f"group {g} is empty")
        out[g] = seg.mean()
    return out


@dataclasses.dataclass
class LeverageFunction:
    """Binned E[sigma^2|S] estimate with a matching local-vol slice.

    edges are interior spot boundaries at value quantiles; remap sends a
    raw searchsorted bin index to a group index after undersized bins
    were merged leftwards (unoccupied raw bins inherit the group of the
    nearest occupied bin to their left). second_moments and local_vol
    hold one value per group.
    """

    t_years: float
    edges: np.ndarray
    remap: np.ndarray
    second_moments: np.ndarray
    local_vol: np.ndarray

    def assign(self, spots):
        """Map spots to group indices."""
        raw = np.searchsorted(self.edges, spots, side="right")
        return self.remap[raw]


def estimate_leverage(spots, vols, local_vol_fn, t_years,
                      n_bins=50, min_count=10):
    """Equal-count spot binning of E[sigma^2|S] plus the local-vol slice.

    Bin edges sit at spot-value quantiles, so assignment depends only on
    values, never on array order; duplicate edges collapse and bins that
    end up under min_count merge into a neighbour. local_vol_fn is
    evaluated at each group's mean spot.
    """
    spots = np.asarray(spots, dtype=np.float64)
    vols = np.asarray(vols, dtype=np.float64)
    if spots.shape != vols.shape or spots.ndim != 1:
        raise ShapeError("spots and vols must be matching 1-D arrays")
    n = spots.size
    if n < min_count:
        raise EstimationError(f"need at least {min_count} particles, got {n}")
    if n_bins > 1:
        sorted_spots = np.sort(spots)
        k = np.arange(1, n_bins) * n // n_bins
        edges = np.unique(sorted_spots[k])
    else:
        edges = np.empty(0)
    raw = np.searchsorted(edges, spots, side="right")
    counts = np.bincount(raw, minlength=edges.size + 1)
    occupied = np.flatnonzero(counts)
    gid = np.arange(occupied.size)
    occ_counts = counts[occupied]
    # Merge undersized groups into their left neighbour (right for the
    # leftmost) until every group is viable; groups stay contiguous.
    while gid[-1] > 0:
        n_groups = gid[-1] + 1
        sizes = np.zeros(n_groups, dtype=np.int64)
        np.add.at(sizes, gid, occ_counts)
        small = np.flatnonzero(sizes < min_count)
        if small.size == 0:
            break
        s = int(small[0])
        gid[gid == s] = s - 1 if s > 0 else 1
        gid = np.searchsorted(np.unique(gid), gid)
    n_groups = int(gid[-1]) + 1
    # Total raw-bin -> group map so assignment never fails on new spots.
    remap = np.empty(edges.size + 1, dtype=np.int64)
    cursor = int(gid[0])
    oi = 0
    for r in range(edges.size + 1):
        if oi < occupied.size and occupied[oi] == r:
            cursor = int(gid[oi])
            oi += 1
        remap[r] = cursor
    groups = remap[raw]
    moments = _sorted_group_mean(vols * vols, groups, n_groups)
    if np.any(moments <= 0.0):
        raise EstimationError("conditional second moment must be positive")
    reps = _sorted_group_mean(spots, groups, n_groups)
    slice_vols = np.asarray(local_vol_fn(t_years, reps), dtype=np.float64)
    if slice_vols.shape != reps.shape:
        slice_vols = np.broadcast_to(slice_vols, reps.shape).copy()
    return LeverageFunction(t_years=t_years, edges=edges, remap=remap,
                            second_moments=moments, local_vol=slice_vols)


def localize(vols, spots, leverage):
    """Rescale vols so the binned conditional second moment matches.

    sigma~ = sigma_loc(t, S) * sigma / sqrt(E[sigma^2|S]) with both the
    slice and the moment piecewise constant over the leverage groups. No
    clamping here; callers clamp if the result feeds the diffusion.
    """
    pos = leverage.assign(np.asarray(spots, dtype=np.float64))
    scale = leverage.local_vol[pos] / np.sqrt(leverage.second_moments[pos])
    return np.asarray(vols, dtype=np.float64) * scale


@dataclasses.dataclass(frozen=True)
class LocalizeConfig:
    """Switchable localization window over diffusion steps.

    Steps from_step..to_step (inclusive) diffuse with the localized vol,
    so dates from_step+1..to_step+1 see a calibrated marginal. The raw
    policy-driven vol process is untouched; localization is applied at
    spot-diffusion time only.
    """

    local_vol_fn: object
    from_step: int
    to_step: int
    n_bins: int = 50
    min_count: int = 10


# ---------------------------------------------------------------------------
# Episode simulation
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class EpisodeResult:
    """Full path arrays of one episode.

    spots has shape (runs, T+1, n). vols mirrors that shape; vols[:, t]
    is the raw process vol sigma_t that diffuses step t, with the final
    column repeating the last used value. eff_vols holds the localized
    vols actually consumed by the diffusion where localization was
    active (elsewhere equal to vols); it aliases vols when localization
    was off. actions is (runs, T, n, action_dim) or None when not
    stored. clamp_count totals vol-band clips over the whole episode.
    """

    config: SimConfig
    path_dependent: bool
    spots: np.ndarray
    vols: np.ndarray
    eff_vols: np.ndarray
    actions: np.ndarray | None
    clamp_count: int

    def state(self, t):
        return build_state(self.spots, self.vols, t, self.config,
                           self.path_dependent)

    @property
    def state_dim(self):
        return 5 if self.path_dependent else 3


def simulate_episode(config, action_fn, *, action_variant="A",
                     path_dependent=False, localization=None,
                     fixed_vol=None, store_actions=True,
                     spot_noise_fn=None):
    """Diffuse all runs in lockstep and return the path arrays.

    action_fn(t, state) returns (runs, n, action_dim) raw actions; it is
    ignored when fixed_vol is given (a scalar, or a callable
    (t_years, spots) -> vols, serving as the reference model).
    spot_noise_fn(run, step, n) is a testing seam overriding the spot
    noise stream; vol-sampling streams are unaffected by it.
    """
    if action_variant not in ("A", "B"):
        raise ConfigError(f"unknown action variant {action_variant!r}")
    if fixed_vol is None and action_fn is None:
        raise ConfigError("need an action_fn or a fixed_vol")
    n, T, B = config.n, config.steps, config.runs
    spots = np.empty((B, T + 1, n))
    vols = np.empty((B, T + 1, n))
    eff = vols if localization is None else np.empty((B, T + 1, n))
    actions_hist = None
    spots[:, 0] = 1.0
    clamps = 0
    # Variant B evolves sigma forward; seed it at the configured level.
    carry_vols = np.full((B, n), config.sigma_init)
    for t in range(T):
        state = build_state(spots, vols, t, config, path_dependent)
        acts = None
        if fixed_vol is None:
            acts = np.asarray(action_fn(t, state), dtype=np.float64)
            if acts.ndim != 3 or acts.shape[:2] != (B, n):
                raise ShapeError(
                    f"action_fn returned {acts.shape}, want ({B}, {n}, ...)")
            if store_actions:
                if actions_hist is None:
                    actions_hist = np.empty((B, T, n, acts.shape[-1]))
                actions_hist[:, t] = acts
        z_spot = np.empty((B, n))
        for b in range(B):
            if spot_noise_fn is not None:
                z_spot[b] = spot_noise_fn(b, t, n)
            else:
                z_spot[b] = noise_stream(
                    config.seed, Stream.SPOT, run=b, step=t).standard_normal(n)
        if fixed_vol is not None:
            if callable(fixed_vol):
                step_vols = np.empty((B, n))
                for b in range(B):
                    step_vols[b] = fixed_vol(t * config.delta, spots[b, t])
            else:
                step_vols = np.full((B, n), float(fixed_vol))
        elif action_variant == "A":
            z_vol = np.empty((B, n))
            for b in range(B):
                z_vol[b] = noise_stream(
                    config.seed, Stream.VOL_SAMPLE, run=b,
                    step=t).standard_normal(n)
            step_vols, c = vol_from_action_a(acts, z_vol)
            clamps += c
        else:
            step_vols = carry_vols
        vols[:, t] = step_vols
        use_vols = step_vols
        if (localization is not None
                and localization.from_step <= t <= localization.to_step):
            local = np.empty((B, n))
            for b in range(B):
                lev = estimate_leverage(
                    spots[b, t], step_vols[b], localization.local_vol_fn,
                    t * config.delta, n_bins=localization.n_bins,
                    min_count=localization.min_count)
                local[b] = localize(step_vols[b], spots[b, t], lev)
            clipped = np.clip(local, *VOL_CLAMP)
            clamps += int(np.count_nonzero(clipped != local))
            use_vols = clipped
        if eff is not vols:
            eff[:, t] = use_vols
        for b in range(B):
            try:
                spots[b, t + 1] = step_spot(spots[b, t], use_vols[b],
                                            z_spot[b], config.delta)
            except NumericError as exc:
                raise NumericError(f"run {b}, step {t}: {exc}") from exc
        if fixed_vol is None and action_variant == "B":
            z_ortho = np.empty((B, n))
            for b in range(B):
                z_ortho[b] = noise_stream(
                    config.seed, Stream.VOL_ORTHO, run=b,
                    step=t).standard_normal(n)
            carry_vols, c = vol_from_action_b(step_vols, acts, z_spot,
                                              z_ortho, config.delta)
            clamps += c
    vols[:, T] = vols[:, T - 1]
    if eff is not vols:
        eff[:, T] = eff[:, T - 1]
    if clamps:
        log.debug("vol clamp engaged %d times this episode", clamps)
    return EpisodeResult(config=config, path_dependent=path_dependent,
                         spots=spots, vols=vols, eff_vols=eff,
                         actions=actions_hist, clamp_count=clamps)


# ---------------------------------------------------------------------------
# Path dump
# ---------------------------------------------------------------------------

def save_paths(path, result):
    """Write spots and vols in the documented binary layout."""
    B, Tp1, n = result.spots.shape
    header = PATH_DUMP_MAGIC + np.array(
        [B, n, Tp1 - 1], dtype="<u8").tobytes()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(
                result.spots, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(
                result.vols, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_paths(path):
    """Read a path dump; returns (spots, vols) shaped (B, T+1, n)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != PATH_DUMP_MAGIC:
            raise ConfigError(f"bad path-dump magic {magic!r}")
        B, n, T = np.frombuffer(fh.read(24), dtype="<u8").astype(int)
        count = B * (T + 1) * n
        spots = np.frombuffer(fh.read(count * 8), dtype="<f8")
        vols = np.frombuffer(fh.read(count * 8), dtype="<f8")
    if spots.size != count or vols.size != count:
        raise ConfigError("path dump truncated")
    shape = (B, T + 1, n)
    return spots.reshape(shape).copy(), vols.reshape(shape).copy()
