"""Straight-line fits on log axes and the slope of a transition scan."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

MODELS = ("power_law", "exponential")
PRONOUNCED_RATIO = 2.0


@dataclass(frozen=True)
class FitResult:
    """Result of a log-space least-squares fit.

    ``power_law``: ``y = amplitude * x**exponent``. ``exponential``:
    ``y = amplitude * exp(-x / length)``; ``exponent`` then holds the fitted
    log-slope ``-1/length``. ``residual_norm`` is the Euclidean norm of the
    residuals of ``log y``, so both models are comparable on the same data.
    """

    model: str
    amplitude: float
    amplitude_err: float
    exponent: float
    exponent_err: float
    fit_range: tuple[float, float]
    residual_norm: float
    n_points: int
    length: float | None = None
    length_err: float | None = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown fit model {self.model!r}")
        if self.amplitude_err < 0 or self.exponent_err < 0 or (self.length_err or 0) < 0:
            raise ValueError("standard errors must be non-negative")

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.model == "power_law":
            return self.amplitude * x**self.exponent
        return self.amplitude * np.exp(self.exponent * x)

    def format(self, digits: int = 2) -> str:
        """Human-readable form, e.g. ``(0.063±0.010)·x^{0.98±0.05}``."""
        a = f"({self.amplitude:.{digits}g}±{self.amplitude_err:.{digits}g})"
        if self.model == "power_law":
            return f"{a}·x^{{{self.exponent:.{digits}f}±{self.exponent_err:.{digits}f}}}"
        return f"{a}·exp(-x/({self.length:.{digits}f}±{self.length_err:.{digits}f}))"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        data = json.loads(text)
        data["fit_range"] = tuple(data["fit_range"])
        return cls(**data)


def _select(x, y, fit_range):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    lo, hi = (x.min(), x.max()) if fit_range is None else fit_range
    if not lo < hi:
        raise ValueError(f"degenerate fit range ({lo}, {hi})")
    keep = (x >= lo) & (x <= hi)
    if keep.sum() < 3:
        raise ValueError(f"need at least 3 points in range ({lo}, {hi}), have {int(keep.sum())}")
    return x[keep], y[keep], (float(lo), float(hi))


def _line_fit(u, v):
    """OLS of ``v = c0 + c1 u``; returns coefficients, their standard errors, residual norm."""
    A = np.column_stack([np.ones_like(u), u])
    coef, *_ = np.linalg.lstsq(A, v, rcond=None)
    resid = v - A @ coef
    dof = len(u) - 2
    s2 = float(resid @ resid) / dof if dof > 0 else 0.0
    cov = s2 * np.linalg.inv(A.T @ A)
    return coef, np.sqrt(np.clip(np.diag(cov), 0.0, None)), float(np.linalg.norm(resid))


def fit_power_law(x, y, fit_range=None) -> FitResult:
    """Fit ``y = a x^b`` by least squares on ``log y`` versus ``log x``."""
    x, y, rng = _select(x, y, fit_range)
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("power-law fit needs strictly positive x and y")
    (c0, c1), (e0, e1), res = _line_fit(np.log(x), np.log(y))
    amp = math.exp(c0)
    return FitResult("power_law", amp, amp * e0, float(c1), float(e1), rng, res, len(x))


def fit_exponential(r, g, fit_range=None) -> FitResult:
    """Fit ``g = a exp(-r / lambda)`` by least squares on ``log g`` versus ``r``."""
    r, g, rng = _select(r, g, fit_range)
    if np.any(g <= 0):
        raise ValueError("exponential fit needs strictly positive values")
    (c0, c1), (e0, e1), res = _line_fit(r, np.log(g))
    amp = math.exp(c0)
    length = -1.0 / c1 if c1 != 0 else math.inf
    length_err = e1 / c1**2 if c1 != 0 else math.inf
    return FitResult("exponential", amp, amp * e0, float(c1), float(e1), rng, res, len(r), length, float(length_err))


@dataclass(frozen=True)
class SlopeResult:
    slope: float
    F_star: float
    pronounced: bool
    slopes: np.ndarray

    def __iter__(self):
        yield self.slope
        yield self.F_star


def transition_slope(F, n, *, refine: bool = True) -> SlopeResult:
    """Largest slope ``dn/dF`` of a scan and where it occurs.

    Centered differences (one-sided at the ends). With ``refine``, a parabola
    through the maximum and its neighbours refines both numbers. ``pronounced``
    is False when the maximum is less than twice the median slope.
    """
    F = np.asarray(F, dtype=float)
    n = np.asarray(n, dtype=float)
    if F.ndim != 1 or F.shape != n.shape:
        raise ValueError("scan must be two 1-D arrays of equal length")
    if F.size < 5:
        raise ValueError(f"need at least 5 scan points, have {F.size}")
    if np.any(np.diff(F) <= 0):
        raise ValueError("scan must be sorted by strictly increasing F")
    slopes = np.gradient(n, F)
    k = int(np.argmax(slopes))
    S, F_star = float(slopes[k]), float(F[k])
    if refine and 0 < k < F.size - 1:
        x = F[k - 1 : k + 2]
        c2, c1, c0 = np.polyfit(x, slopes[k - 1 : k + 2], 2)
        if c2 < 0:
            xv = -c1 / (2 * c2)
            if x[0] <= xv <= x[2]:
                F_star, S = float(xv), float(np.polyval([c2, c1, c0], xv))
    median = float(np.median(slopes))
    pronounced = bool(median <= 0 or S >= PRONOUNCED_RATIO * median)
    return SlopeResult(S, F_star, pronounced, slopes)


class PowerLawRegressor(BaseEstimator, RegressorMixin):
    """``y = a x^b`` fitted in log-log space; ``X`` is a single column."""

    def __init__(self, fit_range=None):
        self.fit_range = fit_range

    def fit(self, X, y):
        self.result_ = fit_power_law(np.ravel(X), y, self.fit_range)
        return self

    def predict(self, X):
        return self.result_.predict(np.ravel(X))


class ExponentialDecayRegressor(BaseEstimator, RegressorMixin):
    """``y = a exp(-x / lambda)`` fitted in semilog space; ``X`` is a single column."""

    def __init__(self, fit_range=None):
        self.fit_range = fit_range

    def fit(self, X, y):
        self.result_ = fit_exponential(np.ravel(X), y, self.fit_range)
        return self

    def predict(self, X):
        return self.result_.predict(np.ravel(X))
