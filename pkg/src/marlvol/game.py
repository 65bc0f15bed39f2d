"""Cooperative calibration rewards over simulated trajectory clouds.

Every trajectory in a run receives the same reward: at each step the
cross-trajectory mean payoff of the options maturing there is mapped to
implied-vol points and penalized by its weighted squared distance to the
target, and the reference model's own error at that step is added back
as a baseline:

    r_t = -sum_m w_m (phi_m(X_hat_m) - c_m)^2 + e_ref(t)

Means use a sorted reduction, so rewards are exactly invariant under
permutations of the trajectory index.

The Bermudan earns its reward at t2, either as a single sparse term or
shaped over [t1, t2] by differencing the reward of a fake cashflow
max{(S_t1 - k1)+, E_t1[(S_t - k_tilde)+]} whose strike drifts toward k2;
the shaped increments telescope back to the sparse terminal reward.
Implied-vol inversions outside the no-arbitrage band clip to the vol
bracket edges with a logged warning, so early untrained policies cannot
crash the reward.
"""
from __future__ import annotations

import dataclasses
import logging
import math

import numpy as np

from . import market, pricing
from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)


def iv_or_edge(price, forward, strike, t_years):
    """Implied vol, mapping out-of-band prices to a bracket edge.

    Returns (iv, on_edge). Prices below intrinsic invert to the lower
    bracket vol, prices at or above the forward to the upper one.
    """
    try:
        return market.implied_vol(price, forward, strike, t_years), False
    except market.ImpliedVolError as exc:
        lo, hi = market.VOL_BRACKET
        edge = lo if price <= exc.lower else hi
        log.warning(
            "price %.6g outside no-arbitrage band [%.6g, %.6g) at "
            "(t=%.4f, k=%.4f); using bracket edge vol %.4f",
            price, exc.lower, exc.upper, t_years, strike, edge)
        return edge, True


@dataclasses.dataclass(frozen=True)
class OptionComponent:
    """One option's contribution to a step reward."""

    option_id: str
    model_value: float
    model_iv: float
    target_iv: float
    weight: float
    penalty: float
    iv_on_edge: bool


@dataclasses.dataclass(frozen=True)
class StepReward:
    """Shared reward of one run at one date, with its breakdown."""

    step: int
    reward: float
    e_ref: float
    components: tuple


@dataclasses.dataclass(frozen=True)
class RewardSpec:
    """Targets, weights, reference-error table and shaping switch.

    e_ref has one entry per date 0..steps and must be non-negative; it
    is zero wherever the reference model has no maturing options. The
    quote maturities must land on step dates. At most one Bermudan is
    supported and its target is quoted in implied-vol points at
    (t2, k2).
    """

    steps: int
    quotes: tuple = ()
    bermudan: pricing.BermudanSpec | None = None
    bermudan_weight: float = 1.0
    bermudan_target_iv: float | None = None
    e_ref: np.ndarray | None = None
    shaping: bool = False
    amc: pricing.AmcConfig = dataclasses.field(
        default_factory=pricing.AmcConfig)
    delta: float = 1.0 / 252.0
    forward: float = 1.0

    def __post_init__(self):
        if self.e_ref is None:
            object.__setattr__(self, "e_ref", np.zeros(self.steps + 1))
        else:
            object.__setattr__(
                self, "e_ref", np.asarray(self.e_ref, dtype=np.float64))
        if self.e_ref.shape != (self.steps + 1,):
            raise ConfigError(
                f"e_ref must have length steps+1={self.steps + 1}, "
                f"got {self.e_ref.shape}")
        if np.any(self.e_ref < 0.0) or not np.all(np.isfinite(self.e_ref)):
            raise ConfigError("e_ref entries must be finite and >= 0")
        for q in self.quotes:
            if q.weight < 0.0:
                raise ConfigError(f"negative weight on quote {q}")
        if self.bermudan is not None:
            if self.bermudan_weight < 0.0:
                raise ConfigError("bermudan weight must be >= 0")
            if self.bermudan_target_iv is None:
                raise ConfigError("bermudan target implied vol is required")
            if self.bermudan.t2_step > self.steps:
                raise ConfigError("bermudan t2 beyond the horizon")
        if self.shaping and self.bermudan is None:
            raise ConfigError("shaping requires a bermudan")
        object.__setattr__(self, "_steps_map", self._group_quotes())

    def _group_quotes(self):
        grouped = {}
        for q in self.quotes:
            step = int(round(q.t_years / self.delta))
            if abs(step * self.delta - q.t_years) > 1e-9:
                raise ConfigError(
                    f"quote maturity {q.t_days}d does not land on a step")
            if not 1 <= step <= self.steps:
                raise ConfigError(
                    f"quote maturity step {step} outside 1..{self.steps}")
            grouped.setdefault(step, []).append(q)
        return grouped

    @property
    def quotes_by_step(self):
        return self._steps_map


def vanilla_reward(spots, quotes, e_ref_t, *, forward=1.0):
    """Shared reward from the quotes maturing at one date.

    spots are the n trajectory values of one run at that date; the
    reward is identical for every trajectory.
    """
    spots = np.asarray(spots, dtype=np.float64)
    if spots.ndim != 1 or spots.size < 2:
        raise ShapeError("need a 1-D spot array with n >= 2")
    comps = []
    total = 0.0
    for q in quotes:
        x_hat, _ = pricing.mc_vanilla_price(spots, q.strike)
        iv, on_edge = iv_or_edge(x_hat, forward, q.strike, q.t_years)
        penalty = q.weight * (iv - q.target_iv) ** 2
        total += penalty
        comps.append(OptionComponent(
            option_id=f"vanilla_{q.t_days}d_{q.strike:g}",
            model_value=x_hat, model_iv=iv, target_iv=q.target_iv,
            weight=q.weight, penalty=penalty, iv_on_edge=on_edge))
    return StepReward(step=-1, reward=-total + float(e_ref_t),
                      e_ref=float(e_ref_t), components=tuple(comps))


def bermudan_terminal_reward(s_t1, s_t2, spec, weight, target_iv, e_ref_t2,
                             *, amc=None, frozen_vol=None, delta=1.0 / 252.0,
                             forward=1.0):
    """Sparse Bermudan reward at t2 plus pricing diagnostics."""
    res = pricing.bermudan_price(s_t1, s_t2, spec, delta, amc=amc,
                                 frozen_vol=frozen_vol, forward=forward)
    t2_years = spec.t2_step * delta
    iv, on_edge = iv_or_edge(res.bermudan, forward, spec.k2, t2_years)
    penalty = weight * (iv - target_iv) ** 2
    comp = OptionComponent(
        option_id="bermudan", model_value=res.bermudan, model_iv=iv,
        target_iv=target_iv, weight=weight, penalty=penalty,
        iv_on_edge=on_edge)
    reward = StepReward(step=spec.t2_step, reward=-penalty + float(e_ref_t2),
                        e_ref=float(e_ref_t2), components=(comp,))
    return reward, res


def fake_strike(t_step, spec, *, forward=1.0, mode=None):
    """Strike of the fake cashflow at step t within [t1, t2].

    Delta-space mode drifts the strike toward k2 along
    forward * (k2/forward)^sqrt(t/t2); forward-percent mode keeps k2
    (rates are zero, so a constant forward fraction is a constant).
    """
    if not spec.t1_step <= t_step <= spec.t2_step:
        raise ConfigError(
            f"fake strike step {t_step} outside "
            f"[{spec.t1_step}, {spec.t2_step}]")
    mode = spec.fake_strike_mode if mode is None else mode
    if mode == "forward":
        return spec.k2
    power = math.sqrt(t_step / spec.t2_step)
    return forward * (spec.k2 / forward) ** power


def fake_cashflow_value(s_t1, s_t, t_step, spec, *, amc=None, frozen_vol=None,
                        forward=1.0):
    """Cross-trajectory mean of max{(S_t1-k1)+, E_t1[(S_t - k_tilde)+]}.

    At t1 the conditional expectation is the payoff itself (S_t == S_t1),
    so no regression runs there; at t2 the fake strike is k2 and the
    value coincides with the sparse Bermudan estimate.
    """
    strike = fake_strike(t_step, spec, forward=forward)
    intrinsic = np.maximum(np.asarray(s_t1, dtype=np.float64) - spec.k1, 0.0)
    target = np.maximum(np.asarray(s_t, dtype=np.float64) - strike, 0.0)
    if t_step == spec.t1_step:
        cont = target
    else:
        cont = pricing.amc_continuation(s_t1, target, config=amc,
                                        frozen_vol=frozen_vol)
    return pricing.sorted_mean(np.maximum(intrinsic, cont))


def shaped_rewards(step_values, terminal_reward=None, anchor=0.0):
    """Difference a reward sequence so its increments telescope.

    step_values[i] is the fake-cashflow reward at date t1+i (the last
    entry sits at t2). Returns increments of the same length; their sum
    equals step_values[-1] - anchor up to float re-association. When
    terminal_reward is given it must match the final value, which the
    shared evaluation path guarantees.
    """
    values = np.asarray(step_values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ShapeError("need a non-empty 1-D value sequence")
    if terminal_reward is not None \
            and abs(values[-1] - terminal_reward) > 1e-9:
        log.warning("shaped terminal %.12g differs from sparse %.12g",
                    values[-1], terminal_reward)
    prev = np.concatenate(([anchor], values[:-1]))
    return values - prev


@dataclasses.dataclass
class RewardBreakdown:
    """Per-run, per-date shared rewards plus diagnostics.

    rewards has shape (runs, steps+1); column t holds the reward earned
    at date t (column 0 is zero). step_rewards[b] lists the StepReward
    records of run b in date order; bermudan_results[b] holds pricing
    diagnostics when a Bermudan is present.
    """

    rewards: np.ndarray
    step_rewards: list
    bermudan_results: list


def episode_rewards(spots, spec, *, vols=None):
    """Assemble the reward matrix of an episode.

    spots is (runs, steps+1, n); vols supplies the frozen-vol regressor
    when the AMC config asks for it.
    """
    spots = np.asarray(spots, dtype=np.float64)
    if spots.ndim != 3 or spots.shape[1] != spec.steps + 1:
        raise ShapeError(
            f"spots must be (runs, {spec.steps + 1}, n), got {spots.shape}")
    runs = spots.shape[0]
    rewards = np.zeros((runs, spec.steps + 1))
    all_steps = []
    berm_results = []
    e_used = np.zeros(spec.steps + 1, dtype=bool)
    for b in range(runs):
        per_run = []
        for t in range(1, spec.steps + 1):
            quotes = spec.quotes_by_step.get(t)
            if quotes:
                sr = vanilla_reward(spots[b, t], quotes, spec.e_ref[t],
                                    forward=spec.forward)
                sr = dataclasses.replace(sr, step=t)
                rewards[b, t] += sr.reward
                per_run.append(sr)
                e_used[t] = True
            elif spec.e_ref[t] != 0.0 and (
                    spec.bermudan is None or t != spec.bermudan.t2_step):
                rewards[b, t] += spec.e_ref[t]
                e_used[t] = True
        if spec.bermudan is not None:
            bspec = spec.bermudan
            t1, t2 = bspec.t1_step, bspec.t2_step
            frozen = None
            if spec.amc.use_frozen_vol:
                if vols is None:
                    raise ConfigError(
                        "AMC frozen-vol regressor needs the vol paths")
                frozen = vols[b, t1]
            e_t2 = 0.0 if e_used[t2] else spec.e_ref[t2]
            sparse, res = bermudan_terminal_reward(
                spots[b, t1], spots[b, t2], bspec, spec.bermudan_weight,
                spec.bermudan_target_iv, e_t2, amc=spec.amc,
                frozen_vol=frozen, delta=spec.delta, forward=spec.forward)
            berm_results.append(res)
            if spec.shaping:
                values = np.empty(t2 - t1 + 1)
                for i, t in enumerate(range(t1, t2 + 1)):
                    x_hat = fake_cashflow_value(
                        spots[b, t1], spots[b, t], t, bspec, amc=spec.amc,
                        frozen_vol=frozen, forward=spec.forward)
                    iv, _ = iv_or_edge(x_hat, spec.forward, bspec.k2,
                                       t2 * spec.delta)
                    values[i] = -spec.bermudan_weight * (
                        iv - spec.bermudan_target_iv) ** 2
                increments = shaped_rewards(
                    values, terminal_reward=sparse.reward - e_t2)
                rewards[b, t1:t2 + 1] += increments
                rewards[b, t2] += e_t2
            else:
                rewards[b, t2] += sparse.reward
            per_run.append(sparse)
        all_steps.append(per_run)
    return RewardBreakdown(rewards=rewards, step_rewards=all_steps,
                           bermudan_results=berm_results)


@dataclasses.dataclass(frozen=True)
class GameValue:
    """Mean per-run reward sum with its standard error over runs."""

    value: float
    se: float
    runs: int


def estimate_game_value(rewards):
    """Average the per-run reward sums; SE is NaN for a single run."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 2 or rewards.shape[0] < 1:
        raise ShapeError("rewards must be (runs, steps+1)")
    sums = rewards.sum(axis=1)
    value = float(np.sort(sums).mean())
    if sums.size > 1:
        se = float(sums.std(ddof=1) / math.sqrt(sums.size))
    else:
        se = float("nan")
        log.info("game value from a single run; standard error undefined")
    return GameValue(value=value, se=se, runs=int(sums.size))


# ---------------------------------------------------------------------------
# Reference-model baseline
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class ReferenceTable:
    """Precomputed reference-model errors and Bermudan target.

    e_ref[t] averages the reference model's squared calibration error at
    date t over its runs; bermudan_target_iv is the reference
    max-European level in vol points at (t2, k2), estimated from the
    pooled trajectories of all runs.
    """

    e_ref: np.ndarray
    bermudan_target_iv: float | None


def build_reference_table(ref_spots, spec):
    """Reference errors from a reference-model episode.

    ref_spots is (runs, steps+1, n) simulated under the reference model
    with the same spot-noise streams as training episodes. The returned
    table plugs into a RewardSpec as e_ref; for a Bermudan spec the
    returned target is the pooled max-European implied vol and e_ref at
    t2 includes the reference model's own switch penalty against it.
    """
    ref_spots = np.asarray(ref_spots, dtype=np.float64)
    if ref_spots.ndim != 3 or ref_spots.shape[1] != spec.steps + 1:
        raise ShapeError(
            f"ref_spots must be (runs, {spec.steps + 1}, n), "
            f"got {ref_spots.shape}")
    runs = ref_spots.shape[0]
    table = np.zeros(spec.steps + 1)
    for t, quotes in spec.quotes_by_step.items():
        acc = 0.0
        for b in range(runs):
            for q in quotes:
                x_hat, _ = pricing.mc_vanilla_price(ref_spots[b, t], q.strike)
                iv, _ = iv_or_edge(x_hat, spec.forward, q.strike, q.t_years)
                acc += q.weight * (iv - q.target_iv) ** 2
        table[t] = acc / runs
    target_iv = None
    if spec.bermudan is not None:
        bspec = spec.bermudan
        t2_years = bspec.t2_step * spec.delta
        pooled_t1 = ref_spots[:, bspec.t1_step].reshape(-1)
        pooled_t2 = ref_spots[:, bspec.t2_step].reshape(-1)
        max_eu, _, _ = pricing.max_european(pooled_t1, pooled_t2, bspec)
        target_iv, _ = iv_or_edge(max_eu, spec.forward, bspec.k2, t2_years)
        acc = 0.0
        for b in range(runs):
            res = pricing.bermudan_price(
                ref_spots[b, bspec.t1_step], ref_spots[b, bspec.t2_step],
                bspec, spec.delta, amc=spec.amc, forward=spec.forward)
            iv, _ = iv_or_edge(res.bermudan, spec.forward, bspec.k2, t2_years)
            acc += spec.bermudan_weight * (iv - target_iv) ** 2
        table[bspec.t2_step] += acc / runs
    return ReferenceTable(e_ref=table, bermudan_target_iv=target_iv)
