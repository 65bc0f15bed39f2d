"""Exception types shared across the package."""
from __future__ import annotations


class MarlvolError(Exception):
    """Base class for package errors."""


class ConfigError(MarlvolError):
    """Bad user-supplied configuration (CLI exit code 2)."""


class ShapeError(MarlvolError):
    """Array shape inconsistent with the declared layout."""


class NumericError(MarlvolError):
    """NaN/Inf or a numerical procedure that failed (CLI exit code 3)."""


class ImpliedVolError(NumericError):
    """Price outside the no-arbitrage band, or root search failure.

    Carries the offending price and the admissible band so callers can decide
    whether to clip to a bracket edge instead of aborting.
    """

    def __init__(self, message: str, price: float | None = None,
                 lower: float | None = None, upper: float | None = None):
        super().__init__(message)
        self.price = price
        self.lower = lower
        self.upper = upper


class ArbitrageError(NumericError):
    """Arbitrage detected in a volatility surface (calendar or butterfly)."""


class SurfaceRangeError(NumericError):
    """Query outside the maturity span covered by the surface pillars."""


class EstimationError(NumericError):
    """A statistical estimate (regression, leverage, game value) degenerated."""
