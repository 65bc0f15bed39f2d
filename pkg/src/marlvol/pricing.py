"""Monte Carlo pricing: vanillas, regression continuation, Bermudans.

Cross-trajectory means here use a sorted reduction (`sorted_mean`) and the
continuation regression canonically sorts its rows, so every price is exactly
invariant under permutations of the trajectory index: blocked float summation
would otherwise leak the ordering into the last ulp.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import EstimationError, ImpliedVolError, ShapeError
from . import market

log = logging.getLogger(__name__)


def sorted_mean(x: np.ndarray) -> float:
    """Mean with a canonical (sorted) summation order."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise EstimationError("mean of an empty sample")
    return float(np.sort(x, kind="stable").sum() / x.size)


def mc_vanilla_price(spots, strike: float):
    """Undiscounted call estimate from terminal spots -> (price, se)."""
    s = np.asarray(spots, dtype=float)
    payoff = np.maximum(s - strike, 0.0)
    price = sorted_mean(payoff)
    se = float(payoff.std(ddof=1) / math.sqrt(payoff.size)) \
        if payoff.size > 1 else 0.0
    return price, se


# ---------------------------------------------------------------------------
# Regression continuation (AMC)
# ---------------------------------------------------------------------------

@dataclass
class AmcConfig:
    """Continuation regression settings: polynomial degree in the t1 spot,
    optionally a frozen-vol linear regressor."""

    degree: int = 8
    use_frozen_vol: bool = False


@dataclass
class ContinuationFit:
    """Fitted per-path continuation values plus regression diagnostics."""

    values: np.ndarray
    coefficients: np.ndarray
    degree_used: int
    residual_rms: float


def fit_continuation(x, y, degree: int = 8, extra=None) -> ContinuationFit:
    """Least-squares fit of y on standardized monomials of x (all paths).

    Rows are sorted canonically before the solve so the coefficients do not
    depend on path order; fitted values are evaluated pointwise in the
    original order. Degenerate designs fall back to lower degree.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"regression needs 1-d x, y of equal length, got"
                         f" {x.shape} / {y.shape}")
    n = x.size
    distinct = np.unique(x).size
    deg = min(int(degree), max(distinct - 1, 0))
    if deg < degree:
        log.warning("continuation regression degree reduced %d -> %d"
                    " (only %d distinct regressors)", degree, deg, distinct)

    def standardize(col):
        # Sorted reductions keep the scaling independent of path order.
        ordered = np.sort(col)
        mean = ordered.mean()
        sd = math.sqrt(float(np.mean(np.sort((col - mean) ** 2))))
        return (col - mean) / sd if sd > 0.0 else np.zeros(col.size)

    z = standardize(x)
    cols = [z ** p for p in range(deg + 1)]
    if extra is not None:
        extra = np.atleast_2d(np.asarray(extra, dtype=float))
        if extra.shape[0] != n:
            extra = extra.T
        if extra.shape[0] != n:
            raise ShapeError(f"extra regressors must have {n} rows")
        for j in range(extra.shape[1]):
            cols.append(standardize(extra[:, j]))
    design = np.column_stack(cols)

    order = np.lexsort((y, x))
    coef, *_ = np.linalg.lstsq(design[order], y[order], rcond=None)
    values = design @ coef
    rms = float(np.sqrt(np.mean((np.sort(values - y)) ** 2)))
    return ContinuationFit(values, coef, deg, rms)


def amc_continuation(s_t1, target, config: AmcConfig | None = None,
                     frozen_vol=None) -> np.ndarray:
    """Estimated E[target | S_t1] per path, clamped at >= 0."""
    config = config or AmcConfig()
    extra = frozen_vol if config.use_frozen_vol else None
    fit = fit_continuation(s_t1, target, config.degree, extra)
    return np.maximum(fit.values, 0.0)


# ---------------------------------------------------------------------------
# Bermudan claim
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BermudanSpec:
    """Two-date call: exercise (S-k1)+ at step t1 or (S-k2)+ at step t2."""

    t1_step: int
    t2_step: int
    k1: float = 1.0
    k2: float = 1.012
    fake_strike_mode: str = "delta"  # or "forward"

    def __post_init__(self):
        if not 0 < self.t1_step < self.t2_step:
            raise ShapeError(
                f"need 0 < t1 < t2, got {self.t1_step}, {self.t2_step}")
        if self.k1 <= 0.0 or self.k2 <= 0.0:
            raise ShapeError("strikes must be positive")
        if self.fake_strike_mode not in ("delta", "forward"):
            raise ShapeError(
                f"unknown fake_strike_mode {self.fake_strike_mode!r}")


@dataclass
class BermudanResult:
    """Bermudan estimate plus its European legs, all undiscounted.

    Switch value is quoted in implied-vol points at (t2, k2), so 1.0 means
    one vol point (an IV gap of 0.01); ``iv_ok`` is False when a price fell
    outside the invertible band (flags, not raises).
    """

    bermudan: float
    bermudan_se: float
    eu1: float
    eu1_se: float
    eu2: float
    eu2_se: float
    max_eu: float
    max_eu_leg: int
    exercise_fraction: float
    iv_bermudan: float
    iv_max_eu: float
    switch_volpts: float
    switch_se_volpts: float
    iv_ok: bool


def max_european(s_t1, s_t2, spec: BermudanSpec):
    """Larger of the two European legs -> (value, se, leg index 1|2)."""
    eu1, se1 = mc_vanilla_price(s_t1, spec.k1)
    eu2, se2 = mc_vanilla_price(s_t2, spec.k2)
    if eu1 >= eu2:
        return eu1, se1, 1
    return eu2, se2, 2


def bermudan_price(s_t1, s_t2, spec: BermudanSpec, dt: float,
                   amc: AmcConfig | None = None, frozen_vol=None,
                   forward: float = 1.0) -> BermudanResult:
    """Price max{(S_t1-k1)+, E_t1[(S_t2-k2)+]} by regression continuation."""
    s_t1 = np.asarray(s_t1, dtype=float)
    s_t2 = np.asarray(s_t2, dtype=float)
    if s_t1.shape != s_t2.shape:
        raise ShapeError(f"path slices differ: {s_t1.shape} vs {s_t2.shape}")
    n = s_t1.size
    intrinsic = np.maximum(s_t1 - spec.k1, 0.0)
    terminal = np.maximum(s_t2 - spec.k2, 0.0)
    continuation = amc_continuation(s_t1, terminal, amc, frozen_vol)
    per_path = np.maximum(intrinsic, continuation)
    value = sorted_mean(per_path)
    value_se = float(per_path.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0

    eu1, se1 = mc_vanilla_price(s_t1, spec.k1)
    eu2, se2 = mc_vanilla_price(s_t2, spec.k2)
    if eu1 >= eu2:
        max_eu, max_eu_leg = eu1, 1
        leg_payoff = intrinsic
    else:
        max_eu, max_eu_leg = eu2, 2
        leg_payoff = terminal
    exercised = intrinsic >= continuation
    exercise_fraction = float(exercised.mean())

    t2_years = spec.t2_step * dt
    iv_ok = True
    iv_berm = iv_max = float("nan")
    switch = switch_se = float("nan")
    try:
        iv_berm = market.implied_vol(value, forward, spec.k2, t2_years)
        iv_max = market.implied_vol(max_eu, forward, spec.k2, t2_years)
        switch = 100.0 * (iv_berm - iv_max)
        # Pathwise difference estimator: the two prices share the paths.
        diff = per_path - leg_payoff
        se_price = float(diff.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        vega = market.bs_vega(forward, spec.k2, t2_years, iv_berm)
        switch_se = 100.0 * se_price / vega if vega > 1e-12 \
            else float("nan")
    except ImpliedVolError as exc:
        iv_ok = False
        log.warning("Bermudan switch value not quotable in vol points: %s",
                    exc)
    return BermudanResult(value, value_se, eu1, se1, eu2, se2, max_eu,
                          max_eu_leg, exercise_fraction, iv_berm, iv_max,
                          switch, switch_se, iv_ok)


# ---------------------------------------------------------------------------
# Binomial-lattice oracle (constant vol, exercise at the two dates only)
# ---------------------------------------------------------------------------

def lattice_bermudan_price(vol: float, spec: BermudanSpec, dt: float,
                           forward: float = 1.0,
                           n_steps: int = 2040) -> float:
    """CRR tree price of the two-date Bermudan under constant vol.

    The step count is rounded so both exercise dates land exactly on tree
    levels. Zero rates: up-probability p = (1-d)/(u-d).
    """
    per_step = max(1, round(n_steps / spec.t2_step))
    n = per_step * spec.t2_step
    m1 = per_step * spec.t1_step
    t2 = spec.t2_step * dt
    h = t2 / n
    u = math.exp(vol * math.sqrt(h))
    d = 1.0 / u
    p = (1.0 - d) / (u - d)
    j = np.arange(n + 1)
    s_terminal = forward * u ** j * d ** (n - j)
    v = np.maximum(s_terminal - spec.k2, 0.0)
    for level in range(n - 1, -1, -1):
        v = p * v[1:] + (1.0 - p) * v[:-1]
        if level == m1:
            s_level = forward * u ** np.arange(level + 1) * d ** (level - np.arange(level + 1))
            v = np.maximum(s_level - spec.k1, v)
    return float(v[0])
