"""Market data: Black pricing, implied vol, SVI surfaces, local vol.

Conventions: zero rates and dividends everywhere, so forwards equal spot and
prices are undiscounted. Maturities are quoted in business days with a 252-day
year. Total implied variance w(t, y) is interpolated linearly in t at fixed
log-moneyness y = ln(strike / spot) between SVI pillars, with an implicit
w(0, y) = 0 anchor so that short maturities below the first pillar stay
covered (a flat surface stays exactly flat under this anchor).
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import (ArbitrageError, ConfigError, ImpliedVolError,
                     SurfaceRangeError)

DAYS_PER_YEAR = 252.0
VOL_BRACKET = (1e-4, 5.0)
PRICE_TOL = 1e-10

# Dupire finite-difference stencil and the local-variance clamp.
DUPIRE_DT = 1.0 / 365.0
DUPIRE_DY = 0.005
LOCAL_VAR_CLAMP = (1e-4, 4.0)


def _norm_pdf(x):
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Black formula (undiscounted) and implied vol
# ---------------------------------------------------------------------------

def bs_call_price(forward, strike, maturity, vol):
    """Undiscounted Black call price; degenerate vol/maturity -> intrinsic."""
    f = np.asarray(forward, dtype=float)
    k = np.asarray(strike, dtype=float)
    t = np.asarray(maturity, dtype=float)
    v = np.asarray(vol, dtype=float)
    if np.any(k <= 0.0) or np.any(f <= 0.0):
        raise ConfigError("bs_call_price requires positive forward and strike")
    stddev = v * np.sqrt(t)
    intrinsic = np.maximum(f - k, 0.0)
    degenerate = stddev < 1e-12
    sd = np.where(degenerate, 1.0, stddev)
    d1 = np.log(f / k) / sd + 0.5 * sd
    d2 = d1 - sd
    price = f * ndtr(d1) - k * ndtr(d2)
    out = np.where(degenerate, intrinsic, price)
    return float(out) if out.ndim == 0 else out


def bs_vega(forward, strike, maturity, vol):
    """d price / d vol of the undiscounted Black call."""
    f = np.asarray(forward, dtype=float)
    k = np.asarray(strike, dtype=float)
    t = np.asarray(maturity, dtype=float)
    v = np.asarray(vol, dtype=float)
    stddev = v * np.sqrt(t)
    sd = np.where(stddev < 1e-12, 1e-12, stddev)
    d1 = np.log(f / k) / sd + 0.5 * sd
    out = f * _norm_pdf(d1) * np.sqrt(t)
    return float(out) if out.ndim == 0 else out


def implied_vol(price, forward, strike, maturity) -> float:
    """Invert the Black call price: Newton with a bisection fallback.

    The admissible band is [(forward-strike)+, forward); prices outside raise
    ImpliedVolError carrying the band. Search is confined to vols in
    [1e-4, 5]; prices below the band's low-vol price return the bracket edge.
    """
    p = float(price)
    f = float(forward)
    k = float(strike)
    t = float(maturity)
    lo_v, hi_v = VOL_BRACKET
    intrinsic = max(f - k, 0.0)
    if not np.isfinite(p) or p < intrinsic - PRICE_TOL or p >= f:
        raise ImpliedVolError(
            f"price {p!r} outside no-arbitrage band [{intrinsic}, {f})",
            price=p, lower=intrinsic, upper=f)
    p_lo = bs_call_price(f, k, t, lo_v)
    if p <= p_lo:
        return lo_v
    p_hi = bs_call_price(f, k, t, hi_v)
    if p >= p_hi:
        raise ImpliedVolError(
            f"price {p!r} above the vol-bracket price {p_hi} (vol > {hi_v})",
            price=p, lower=intrinsic, upper=p_hi)

    def polish(v: float) -> float:
        # One extra Newton step after meeting the price tolerance; quadratic
        # convergence puts the final vol error far below tol / vega.
        vega = bs_vega(f, k, t, v)
        if vega > 1e-12:
            v2 = v - (bs_call_price(f, k, t, v) - p) / vega
            if lo_v <= v2 <= hi_v:
                return v2
        return v

    # Newton from a Brenner-Subrahmanyam style seed, clipped to the bracket.
    v = min(max(math.sqrt(2.0 * math.pi / t) * p / f, lo_v), hi_v)
    lo, hi = lo_v, hi_v
    for _ in range(50):
        diff = bs_call_price(f, k, t, v) - p
        if abs(diff) < PRICE_TOL:
            return polish(v)
        if diff > 0.0:
            hi = min(hi, v)
        else:
            lo = max(lo, v)
        vega = bs_vega(f, k, t, v)
        if vega > 1e-12:
            v_new = v - diff / vega
        else:
            v_new = math.nan
        if not (lo < v_new < hi):
            v_new = 0.5 * (lo + hi)  # bisection fallback step
        v = v_new
    # Newton stalled; finish with plain bisection.
    for _ in range(200):
        v = 0.5 * (lo + hi)
        diff = bs_call_price(f, k, t, v) - p
        if abs(diff) < PRICE_TOL:
            return polish(v)
        if diff > 0.0:
            hi = v
        else:
            lo = v
    raise ImpliedVolError(
        f"implied vol failed to converge for price {p}", price=p,
        lower=intrinsic, upper=f)


# ---------------------------------------------------------------------------
# SVI pillars and the surface
# ---------------------------------------------------------------------------

def svi_total_variance(y, a, b, rho, m, s):
    """Raw-SVI total variance w(y) = a + b (rho (y-m) + sqrt((y-m)^2 + s^2))."""
    ym = np.asarray(y, dtype=float) - m
    return a + b * (rho * ym + np.sqrt(ym * ym + s * s))


@dataclass(frozen=True)
class SviPillar:
    """One maturity slice of raw-SVI parameters."""

    t_days: int
    a: float
    b: float
    rho: float
    m: float
    s: float

    def __post_init__(self):
        if self.t_days <= 0:
            raise ConfigError(f"pillar t_days must be positive, got {self.t_days}")
        if self.b < 0.0:
            raise ConfigError(f"SVI b must be >= 0, got {self.b}")
        if not -1.0 < self.rho < 1.0:
            raise ConfigError(f"SVI rho must be in (-1, 1), got {self.rho}")
        if self.s <= 0.0:
            raise ConfigError(f"SVI s must be > 0, got {self.s}")
        w_min = self.a + self.b * self.s * math.sqrt(1.0 - self.rho ** 2)
        if w_min < 0.0:
            raise ArbitrageError(
                f"pillar {self.t_days}d: negative total variance (min {w_min:g})")

    @property
    def t_years(self) -> float:
        return self.t_days / DAYS_PER_YEAR

    def total_variance(self, y):
        return svi_total_variance(y, self.a, self.b, self.rho, self.m, self.s)


_CALENDAR_GRID = np.linspace(-1.5, 1.5, 301)


@dataclass
class MarketSurface:
    """Target implied-vol surface built from SVI pillars.

    ``anchor_zero`` adds the implicit (t=0, w=0) pillar; ``extrapolate_flat``
    allows flat-in-total-variance reads beyond the last pillar instead of a
    SurfaceRangeError.
    """

    spot: float
    pillars: list[SviPillar]
    anchor_zero: bool = True
    extrapolate_flat: bool = False

    def __post_init__(self):
        if self.spot <= 0.0:
            raise ConfigError(f"spot must be positive, got {self.spot}")
        if not self.pillars:
            raise ConfigError("surface needs at least one pillar")
        self.pillars = sorted(self.pillars, key=lambda p: p.t_days)
        days = [p.t_days for p in self.pillars]
        if len(set(days)) != len(days):
            raise ConfigError(f"duplicate pillar maturities: {days}")
        prev = np.zeros_like(_CALENDAR_GRID) if self.anchor_zero else None
        for pillar in self.pillars:
            w = pillar.total_variance(_CALENDAR_GRID)
            if prev is not None and np.any(w < prev - 1e-12):
                y_bad = _CALENDAR_GRID[int(np.argmin(w - prev))]
                raise ArbitrageError(
                    f"calendar arbitrage at pillar {pillar.t_days}d,"
                    f" log-moneyness {y_bad:+.3f}: total variance decreases")
            prev = w

    @property
    def t_min(self) -> float:
        return 0.0 if self.anchor_zero else self.pillars[0].t_years

    @property
    def t_max(self) -> float:
        return self.pillars[-1].t_years

    def total_variance(self, t: float, y):
        """w(t, y) by linear-in-t interpolation at fixed log-moneyness."""
        if t <= 0.0:
            raise SurfaceRangeError(f"maturity must be positive, got {t}")
        times = [p.t_years for p in self.pillars]
        if t > self.t_max + 1e-12:
            if not self.extrapolate_flat:
                raise SurfaceRangeError(
                    f"maturity {t:.6f} beyond last pillar {self.t_max:.6f}"
                    " (set extrapolate_flat to allow)")
            return self.pillars[-1].total_variance(y)
        if t < times[0]:
            if self.anchor_zero:
                return (t / times[0]) * self.pillars[0].total_variance(y)
            if self.extrapolate_flat:
                return self.pillars[0].total_variance(y)
            raise SurfaceRangeError(
                f"maturity {t:.6f} below first pillar {times[0]:.6f}"
                " (set anchor_zero or extrapolate_flat to allow)")
        hi = int(np.searchsorted(np.array(times), t, side="left"))
        hi = min(hi, len(times) - 1)
        if abs(times[hi] - t) < 1e-14:
            return self.pillars[hi].total_variance(y)
        lo = hi - 1
        wl = self.pillars[lo].total_variance(y)
        wh = self.pillars[hi].total_variance(y)
        lam = (t - times[lo]) / (times[hi] - times[lo])
        return wl + lam * (wh - wl)

    def to_dict(self) -> dict:
        return {
            "spot": self.spot,
            "anchor_zero": self.anchor_zero,
            "extrapolate_flat": self.extrapolate_flat,
            "pillars": [
                {"t_days": p.t_days, "a": p.a, "b": p.b, "rho": p.rho,
                 "m": p.m, "s": p.s}
                for p in self.pillars
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarketSurface":
        try:
            pillars = [SviPillar(**p) for p in d["pillars"]]
            return cls(spot=float(d["spot"]), pillars=pillars,
                       anchor_zero=bool(d.get("anchor_zero", True)),
                       extrapolate_flat=bool(d.get("extrapolate_flat", False)))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed surface record: {exc}") from exc


def save_surface(path, surface: MarketSurface) -> None:
    """Atomic JSON dump of the surface."""
    text = json.dumps(surface.to_dict(), indent=2, sort_keys=True) + "\n"
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_surface(path) -> MarketSurface:
    try:
        with open(path) as fh:
            return MarketSurface.from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"surface file {path} is not valid JSON: {exc}") from exc


def surface_implied_vol(surface: MarketSurface, t: float, strike):
    """Implied vol read from the surface at maturity t (years) and strike."""
    y = np.log(np.asarray(strike, dtype=float) / surface.spot)
    w = surface.total_variance(t, y)
    out = np.sqrt(w / t)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Dupire local vol (total-variance form)
# ---------------------------------------------------------------------------

def dupire_local_vol(surface: MarketSurface, t: float, spot_level):
    """Local vol via the total-variance Dupire formula, FD derivatives.

    Central differences with dt = 1/365 (one-sided at span edges) and
    dy = 0.005; the resulting local *variance* is clamped to [1e-4, 4].
    A non-positive butterfly denominator raises ArbitrageError.
    """
    levels = np.asarray(spot_level, dtype=float)
    scalar = levels.ndim == 0
    y = np.log(np.atleast_1d(levels) / surface.spot)

    lo_t = surface.t_min
    tm, tp = t - DUPIRE_DT, t + DUPIRE_DT
    if tm <= lo_t + 1e-12:
        tm = t
    if tp > surface.t_max and not surface.extrapolate_flat:
        tp = t
    if tp <= tm:
        raise SurfaceRangeError(
            f"maturity {t:.6f} leaves no room for a time derivative")
    w0 = surface.total_variance(t, y)
    dw_dt = (surface.total_variance(tp, y)
             - surface.total_variance(tm, y)) / (tp - tm)

    wp = surface.total_variance(t, y + DUPIRE_DY)
    wm = surface.total_variance(t, y - DUPIRE_DY)
    dw_dy = (wp - wm) / (2.0 * DUPIRE_DY)
    d2w_dy2 = (wp - 2.0 * w0 + wm) / (DUPIRE_DY * DUPIRE_DY)

    w_safe = np.maximum(w0, 1e-12)
    denom = (1.0 - (y / w_safe) * dw_dy
             + 0.25 * (-0.25 - 1.0 / w_safe + (y / w_safe) ** 2) * dw_dy ** 2
             + 0.5 * d2w_dy2)
    if np.any(denom <= 0.0):
        i = int(np.argmin(denom))
        raise ArbitrageError(
            f"butterfly arbitrage: Dupire denominator {denom[i]:g} <= 0 at"
            f" t={t:.6f}, level={np.atleast_1d(levels)[i]:.6f}")
    var = np.clip(dw_dt / denom, *LOCAL_VAR_CLAMP)
    out = np.sqrt(var)
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# Target quotes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VanillaQuote:
    """One calibration target: a call quote in implied-vol terms."""

    t_days: int
    strike: float
    target_iv: float
    weight: float = 1.0

    @property
    def t_years(self) -> float:
        return self.t_days / DAYS_PER_YEAR


def make_target_set(surface: MarketSurface, maturities_days, strikes,
                    vega_weighted: bool = False) -> list[VanillaQuote]:
    """Read quotes off the surface for a maturity x strike grid.

    Weights default to 1; with ``vega_weighted`` they are proportional to the
    Black vega at the quote, normalized to mean 1.
    """
    quotes = []
    for d in maturities_days:
        d = int(d)
        t = d / DAYS_PER_YEAR
        for k in strikes:
            iv = surface_implied_vol(surface, t, float(k))
            quotes.append(VanillaQuote(d, float(k), float(iv)))
    if vega_weighted:
        vegas = np.array([
            bs_vega(surface.spot, q.strike, q.t_years, q.target_iv)
            for q in quotes])
        if np.all(vegas <= 0.0):
            raise ConfigError("vega weighting degenerate: all vegas zero")
        weights = vegas / vegas.mean()
        quotes = [VanillaQuote(q.t_days, q.strike, q.target_iv, float(w))
                  for q, w in zip(quotes, weights)]
    return quotes


# ---------------------------------------------------------------------------
# Synthetic surface presets
# ---------------------------------------------------------------------------

def flat_surface(vol: float, pillar_days=(21, 51), spot: float = 1.0,
                 ) -> MarketSurface:
    """Flat implied vol at every (t, k) covered by the pillar span."""
    if vol <= 0.0:
        raise ConfigError(f"flat surface vol must be positive, got {vol}")
    pillars = [
        SviPillar(t_days=int(d), a=vol * vol * (int(d) / DAYS_PER_YEAR),
                  b=0.0, rho=0.0, m=0.0, s=0.1)
        for d in pillar_days]
    return MarketSurface(spot=spot, pillars=pillars)


def skewed_surface(atm_vol: float = 0.14, skew: float = -0.5,
                   pillar_days=(21, 51), spot: float = 1.0,
                   rho: float = -0.7, s_base: float = 0.2) -> MarketSurface:
    """Equity-like SVI surface with a target ATM skew.

    ``skew`` is d(implied vol)/d(log-moneyness) at the money (e.g. -0.5 is
    -2.5 vol points per 5% moneyness). The first pillar is built from the
    stated ATM vol and skew; later pillars are exact scalar multiples of it
    (total variance scaled by t / t_first), which keeps the implied-vol skew
    identical across maturities and makes calendar order hold pointwise.
    """
    if atm_vol <= 0.0:
        raise ConfigError(f"atm_vol must be positive, got {atm_vol}")
    base_t = pillar_days[0] / DAYS_PER_YEAR
    b0 = 2.0 * atm_vol * base_t * skew / rho
    a0 = atm_vol * atm_vol * base_t - b0 * s_base
    pillars = []
    for d in pillar_days:
        scale = (int(d) / DAYS_PER_YEAR) / base_t
        pillars.append(SviPillar(t_days=int(d), a=a0 * scale, b=b0 * scale,
                                 rho=rho, m=0.0, s=s_base))
    return MarketSurface(spot=spot, pillars=pillars)
