"""ARMA(p, q) estimation, streaming residual extraction, and the parametric
CUSUM detector (CUSUM over model residuals).

Estimation is conditional sum of squares: the residual recursion is started
from zero lags and the squared-residual sum is minimized by multi-start
Nelder-Mead inside the stationarity/invertibility region.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter

from .cusum import (
    Calibration,
    CusumConfig,
    DetectionEvent,
    TrainingTransform,
    WindowedCusumMonitor,
)
from .errors import ConfigError, EstimationError
from .timeseries import TimeSeries

__all__ = [
    "ArmaModel",
    "ResidualState",
    "fit_arma",
    "residual_step",
    "css_residuals",
    "ArmaResidualTransform",
    "pcusum_monitor",
]

_PENALTY = 1e12
_ROOT_MARGIN = 1e-6


def _poly_roots_ok(coeffs: Sequence[float], negate: bool) -> bool:
    if not len(coeffs):
        return True
    sign = -1.0 if negate else 1.0
    poly = np.r_[1.0, sign * np.asarray(coeffs, dtype=float)]
    roots = np.polynomial.polynomial.polyroots(poly)
    return bool(np.all(np.abs(roots) > 1.0 + _ROOT_MARGIN))


def _reflect_roots(coeffs: Sequence[float], negate: bool) -> tuple[float, ...]:
    """Reflect any root inside the unit circle to its reciprocal conjugate."""
    sign = -1.0 if negate else 1.0
    poly = np.r_[1.0, sign * np.asarray(coeffs, dtype=float)]
    roots = np.polynomial.polynomial.polyroots(poly)
    flipped = np.where(np.abs(roots) <= 1.0, 1.0 / np.conj(roots) * (1.0 + 10 * _ROOT_MARGIN), roots)
    new_poly = np.polynomial.polynomial.polyfromroots(flipped)
    new_poly = np.real(new_poly / new_poly[0])
    return tuple(float(c) for c in sign * new_poly[1:])


@dataclass(frozen=True)
class ArmaModel:
    """Fitted ARMA parameters: mean, AR and MA coefficients, innovation variance."""

    mean: float
    ar: tuple[float, ...] = ()
    ma: tuple[float, ...] = ()
    innovation_var: float = 1.0
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ar", tuple(float(c) for c in self.ar))
        object.__setattr__(self, "ma", tuple(float(c) for c in self.ma))
        if self.innovation_var <= 0:
            raise ConfigError(f"innovation_var must be > 0, got {self.innovation_var}")
        if not _poly_roots_ok(self.ar, negate=True):
            raise ConfigError(f"non-stationary AR coefficients {self.ar}")
        if not _poly_roots_ok(self.ma, negate=False):
            raise ConfigError(f"non-invertible MA coefficients {self.ma}")

    @property
    def p(self) -> int:
        return len(self.ar)

    @property
    def q(self) -> int:
        return len(self.ma)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "ar": list(self.ar),
            "ma": list(self.ma),
            "innovation_var": self.innovation_var,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArmaModel":
        return cls(mean=d["mean"], ar=tuple(d.get("ar", ())), ma=tuple(d.get("ma", ())),
                   innovation_var=d.get("innovation_var", 1.0),
                   flags=tuple(d.get("flags", ())))


def css_residuals(values: Sequence[float], mean: float, ar: Sequence[float],
                  ma: Sequence[float]) -> np.ndarray:
    """Residuals of the centered series under the conditional (zero initial
    lags) convention; vectorized equivalent of repeated residual_step."""
    x = np.asarray(values, dtype=float) - mean
    b = np.r_[1.0, -np.asarray(ar, dtype=float)] if len(ar) else np.array([1.0])
    a = np.r_[1.0, np.asarray(ma, dtype=float)] if len(ma) else np.array([1.0])
    return lfilter(b, a, x)


def _css_objective(params: np.ndarray, x: np.ndarray, p: int, q: int) -> float:
    ar = params[1:1 + p]
    ma = params[1 + p:1 + p + q]
    if not _poly_roots_ok(ar, negate=True) or not _poly_roots_ok(ma, negate=False):
        return _PENALTY
    eps = css_residuals(x, params[0], ar, ma)
    return float(np.dot(eps, eps))


def _start_points(sample_mean: float, p: int, q: int, n_starts: int) -> list[np.ndarray]:
    # fixed lattice over the stationarity/invertibility box
    grid = (-0.5, 0.0, 0.5)
    combos = list(itertools.product(grid, repeat=p + q))
    step = max(1, len(combos) // n_starts)
    picked = combos[::step][:n_starts]
    if (0.0,) * (p + q) not in picked:
        picked[-1] = (0.0,) * (p + q)
    return [np.r_[sample_mean, combo] for combo in picked]


def fit_arma(training: Sequence[float], p: int, q: int, n_starts: int = 5,
             max_iter: int = 2000) -> ArmaModel:
    """Conditional-sum-of-squares fit of an ARMA(p, q) model.

    Derivative-free simplex minimization from ``n_starts`` lattice points;
    innovation variance is the CSS minimum over n - p - q - 1. Raises
    EstimationError when no start converges.
    """
    x = np.asarray(training, dtype=float)
    n = len(x)
    if p < 0 or q < 0:
        raise ConfigError("orders must be non-negative")
    if n < 10 * (p + q + 1):
        raise ConfigError(f"need >= {10 * (p + q + 1)} samples for ARMA({p},{q}), got {n}")
    if p + q == 0:
        var = float(np.var(x))
        if var <= 0:
            raise EstimationError("degenerate training data")
        return ArmaModel(mean=float(x.mean()), innovation_var=var)
    best = None
    converged = False
    for s0 in _start_points(float(x.mean()), p, q, n_starts):
        res = minimize(_css_objective, s0, args=(x, p, q), method="Nelder-Mead",
                       options={"fatol": 1e-8, "xatol": 1e-8, "maxiter": max_iter})
        if res.fun >= _PENALTY:
            continue
        converged = converged or bool(res.success)
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not converged:
        raise EstimationError(f"CSS optimization did not converge for ARMA({p},{q})")
    mean = float(best.x[0])
    ar = tuple(float(c) for c in best.x[1:1 + p])
    ma = tuple(float(c) for c in best.x[1 + p:1 + p + q])
    flags: tuple[str, ...] = ()
    if not _poly_roots_ok(ar, negate=True):
        ar = _reflect_roots(ar, negate=True)
        flags += ("projected-ar",)
    if not _poly_roots_ok(ma, negate=False):
        ma = _reflect_roots(ma, negate=False)
        flags += ("projected-ma",)
    dof = max(1, n - p - q - 1)
    sigma2 = float(best.fun / dof)
    if sigma2 <= 0:
        raise EstimationError("degenerate residual variance")
    return ArmaModel(mean=mean, ar=ar, ma=ma, innovation_var=sigma2, flags=flags)


@dataclass
class ResidualState:
    """Streaming residual recursion state: the model plus rings of the last
    p centered observations and last q residuals (seeded with zeros)."""

    model: ArmaModel
    lagged_values: list[float] = field(default_factory=list)
    lagged_residuals: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.lagged_values:
            self.lagged_values = [0.0] * self.model.p
        if not self.lagged_residuals:
            self.lagged_residuals = [0.0] * self.model.q
        if len(self.lagged_values) != self.model.p or len(self.lagged_residuals) != self.model.q:
            raise ConfigError("lag ring sizes must match model orders")

    def step(self, value: float) -> float:
        return residual_step(self, value)


def residual_step(state: ResidualState, value: float) -> float:
    """One-step residual: centered value minus AR terms on lagged centered
    values minus MA terms on lagged residuals. O(p + q) per sample."""
    model = state.model
    centered = value - model.mean
    eps = centered
    for j in range(model.p):
        eps -= model.ar[j] * state.lagged_values[j]
    for j in range(model.q):
        eps -= model.ma[j] * state.lagged_residuals[j]
    if model.p:
        state.lagged_values.insert(0, centered)
        state.lagged_values.pop()
    if model.q:
        state.lagged_residuals.insert(0, eps)
        state.lagged_residuals.pop()
    return eps


class ArmaResidualTransform(TrainingTransform):
    """Training transform for the parametric CUSUM: fit an ARMA model on each
    training window and feed residuals (training and monitoring) into the
    detector. The residual recursion carries over the training/monitoring
    boundary."""

    def __init__(self, p: int = 1, q: int = 1):
        self.p = p
        self.q = q
        self.model: ArmaModel | None = None
        self._state: ResidualState | None = None

    def fit(self, training: np.ndarray) -> np.ndarray:
        self.model = fit_arma(training, self.p, self.q)
        self._state = ResidualState(self.model)
        return np.array([self._state.step(v) for v in training])

    def step(self, value: float) -> float:
        if self._state is None:
            raise ConfigError("transform used before fit")
        return self._state.step(value)


def pcusum_monitor(stream: Iterable[float] | TimeSeries, config: CusumConfig,
                   p: int = 1, q: int = 1,
                   calibration: Calibration | None = None) -> list[DetectionEvent]:
    """Windowed CUSUM over ARMA residuals: identical control flow to the
    non-parametric procedure, plus a model fit at every training boundary.
    Falls back to the raw-data detector (events flagged) if a fit fails."""
    values = stream.values if isinstance(stream, TimeSeries) else stream
    monitor = WindowedCusumMonitor(config, calibration,
                                   transform=ArmaResidualTransform(p, q))
    for v in values:
        monitor.push(v)
    return monitor.events
