"""Non-parametric windowed sequential CUSUM detector.

The detector compares the running sum of post-training samples against the
training baseline, normalized by a Bartlett-kernel long-run variance
estimate, with a Monte Carlo calibrated critical value for the weighted
Brownian-motion limit. Monitoring is restricted to a window of fixed length;
an offline change-point pre-test validates each training window, and the
whole procedure repeats to catch multiple change points.
"""

from __future__ import annotations

import csv
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateVarianceError,
    EstimationError,
    TrainingInvalidError,
    WindowExhaustedError,
)
from .timeseries import TimeSeries, empirical_autocovariance

__all__ = [
    "CusumConfig",
    "CusumState",
    "DetectionEvent",
    "newey_west_window",
    "bartlett_lrv",
    "calibrate_cv",
    "calibrate_bridge_cv",
    "Calibration",
    "threshold_at",
    "start_monitoring",
    "cusum_step",
    "offline_cp_test",
    "TrainingTransform",
    "IdentityTransform",
    "WindowedCusumMonitor",
    "run_windowed_procedure",
]

VARIANCE_FLOOR = 1e-12

ONE_SIDED = "one-sided"
TWO_SIDED = "two-sided"


def newey_west_window(n: int) -> int:
    """Default Bartlett window for a sample of length n: 4*(n/100)^(2/9)."""
    return max(1, round(4.0 * (n / 100.0) ** (2.0 / 9.0)))


@dataclass(frozen=True)
class CusumConfig:
    """Tuning parameters for the windowed CUSUM detector.

    ``bartlett_window=None`` resolves to the Newey-West rule for the
    training length.
    """

    alpha: float = 0.05
    gamma: float = 0.25
    training_len: int = 100
    window_len: int = 50
    bartlett_window: int | None = None
    sidedness: str = TWO_SIDED

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0,1), got {self.alpha}")
        if not 0.0 <= self.gamma < 0.5:
            raise ConfigError(f"gamma must be in [0, 0.5), got {self.gamma}")
        if self.training_len < 1 or self.window_len < 1:
            raise ConfigError("training_len and window_len must be positive")
        if self.sidedness not in (ONE_SIDED, TWO_SIDED):
            raise ConfigError(f"unknown sidedness {self.sidedness!r}")
        W = self.resolve_bartlett()
        if self.training_len < 2 * W:
            raise ConfigError(
                f"training_len {self.training_len} < 2 * bartlett_window {W}"
            )

    def resolve_bartlett(self) -> int:
        if self.bartlett_window is not None:
            if self.bartlett_window < 1:
                raise ConfigError("bartlett_window must be >= 1")
            return self.bartlett_window
        return newey_west_window(self.training_len)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "gamma": self.gamma,
            "training_len": self.training_len,
            "window_len": self.window_len,
            "bartlett_window": self.bartlett_window,
            "sidedness": self.sidedness,
        }


@dataclass
class DetectionEvent:
    """A threshold crossing: where it was detected and what is reported."""

    detection_seq: int
    cp_estimate: int
    wall_detect_ns: int
    statistic_value: float
    flags: tuple[str, ...] = ()


@dataclass
class CusumState:
    """Monitoring state after a validated training window."""

    training_mean: float
    lrv: float
    cv: float
    config: CusumConfig
    t: int = 0
    cumulative_post_sum: float = 0.0
    base_seq: int = 0
    flags: tuple[str, ...] = ()

    @property
    def omega(self) -> float:
        return math.sqrt(self.lrv)


def bartlett_lrv(training: Sequence[float], bartlett_window: int) -> float:
    """Bartlett-kernel long-run variance: k0 + 2*sum_{j<W} (1-j/W)*kj.

    Raises DegenerateVarianceError when the estimate hits the numerical
    floor (constant data).
    """
    x = np.asarray(training, dtype=float)
    W = bartlett_window
    if W < 1:
        raise ConfigError("bartlett_window must be >= 1")
    if len(x) < 2 * W:
        raise ConfigError(f"need at least {2 * W} samples for window {W}, got {len(x)}")
    lrv = empirical_autocovariance(x, 0)
    for j in range(1, W):
        lrv += 2.0 * (1.0 - j / W) * empirical_autocovariance(x, j)
    if lrv <= VARIANCE_FLOOR:
        raise DegenerateVarianceError(f"long-run variance {lrv} at or below floor")
    return float(lrv)


# --- Monte Carlo calibration -------------------------------------------------

def _sup_over_paths(weights: np.ndarray, absolute: bool, grid_points: int,
                    replications: int, rng: np.random.Generator,
                    bridge: bool) -> np.ndarray:
    """Sup of (possibly bridged, possibly |.|) scaled Brownian paths on the grid."""
    N = grid_points
    sups = np.empty(replications)
    chunk = max(1, int(4e6 / N))
    done = 0
    scale = 1.0 / math.sqrt(N)
    while done < replications:
        b = min(chunk, replications - done)
        paths = np.cumsum(rng.standard_normal((b, N)) * scale, axis=1)
        if bridge:
            t = np.arange(1, N + 1) / N
            paths = paths - t * paths[:, -1:]
        if absolute:
            np.abs(paths, out=paths)
        sups[done:done + b] = (paths / weights).max(axis=1)
        done += b
    return sups


def calibrate_cv(gamma: float, alpha: float, sidedness: str = ONE_SIDED,
                 grid_points: int = 10_000, replications: int = 100_000,
                 seed: int = 0) -> float:
    """Critical value: empirical (1-alpha) quantile of sup W(t)/t^gamma over a
    grid t = i/N, i = 1..N (two-sided uses |W(t)|)."""
    if not 0.0 <= gamma < 0.5:
        raise ConfigError(f"gamma must be in [0, 0.5), got {gamma}")
    if grid_points < 1_000:
        raise ConfigError("grid_points must be >= 1000")
    if replications < 10_000:
        raise ConfigError("replications must be >= 10000")
    if sidedness not in (ONE_SIDED, TWO_SIDED):
        raise ConfigError(f"unknown sidedness {sidedness!r}")
    t = np.arange(1, grid_points + 1) / grid_points
    weights = t ** gamma
    rng = np.random.default_rng(seed)
    sups = _sup_over_paths(weights, sidedness == TWO_SIDED, grid_points,
                           replications, rng, bridge=False)
    return float(np.quantile(sups, 1.0 - alpha))


def calibrate_bridge_cv(alpha: float, grid_points: int = 10_000,
                        replications: int = 100_000, seed: int = 0) -> float:
    """(1-alpha) quantile of sup |Brownian bridge| (Kolmogorov statistic)."""
    if grid_points < 1_000:
        raise ConfigError("grid_points must be >= 1000")
    if replications < 10_000:
        raise ConfigError("replications must be >= 10000")
    weights = np.ones(grid_points)
    rng = np.random.default_rng(seed)
    sups = _sup_over_paths(weights, True, grid_points, replications, rng, bridge=True)
    return float(np.quantile(sups, 1.0 - alpha))


BRIDGE_KEY = "bridge"


class Calibration:
    """Critical-value provider with an in-memory table and optional CSV cache.

    Cache rows are keyed exactly on (gamma, alpha, sidedness, grid_points,
    replications, seed); a miss triggers a Monte Carlo run whose result is
    appended to the cache file. Thread safe; the table is shared read-only
    after each insert.
    """

    FIELDS = ("gamma", "alpha", "sidedness", "grid_points", "replications", "seed", "cv")

    def __init__(self, cache_path: str | Path | None = None,
                 grid_points: int = 10_000, replications: int = 100_000,
                 seed: int = 0):
        self.cache_path = Path(cache_path) if cache_path else None
        self.grid_points = grid_points
        self.replications = replications
        self.seed = seed
        self._table: dict[tuple, float] = {}
        self._lock = threading.Lock()
        if self.cache_path and self.cache_path.exists():
            self._load()

    def _key(self, gamma: float, alpha: float, sidedness: str) -> tuple:
        return (round(float(gamma), 12), round(float(alpha), 12), sidedness,
                self.grid_points, self.replications, self.seed)

    def _load(self):
        with open(self.cache_path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (round(float(row["gamma"]), 12), round(float(row["alpha"]), 12),
                       row["sidedness"], int(row["grid_points"]),
                       int(row["replications"]), int(row["seed"]))
                self._table[key] = float(row["cv"])

    def _append(self, key: tuple, cv: float):
        if not self.cache_path:
            return
        exists = self.cache_path.exists()
        self.cache_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.cache_path, "a", newline="") as fh:
            w = csv.writer(fh)
            if not exists:
                w.writerow(self.FIELDS)
            w.writerow([key[0], key[1], key[2], key[3], key[4], key[5],
                        format(cv, ".17g")])

    def lookup(self, gamma: float, alpha: float, sidedness: str) -> float | None:
        return self._table.get(self._key(gamma, alpha, sidedness))

    def monitor_cv(self, gamma: float, alpha: float, sidedness: str) -> float:
        key = self._key(gamma, alpha, sidedness)
        with self._lock:
            if key not in self._table:
                cv = calibrate_cv(gamma, alpha, sidedness, self.grid_points,
                                  self.replications, self.seed)
                self._table[key] = cv
                self._append(key, cv)
            return self._table[key]

    def bridge_cv(self, alpha: float) -> float:
        key = self._key(0.0, alpha, BRIDGE_KEY)
        with self._lock:
            if key not in self._table:
                cv = calibrate_bridge_cv(alpha, self.grid_points,
                                         self.replications, self.seed)
                self._table[key] = cv
                self._append(key, cv)
            return self._table[key]


_default_calibration: Calibration | None = None
_default_lock = threading.Lock()


def default_calibration() -> Calibration:
    """Process-wide fallback provider (in-memory cache only)."""
    global _default_calibration
    with _default_lock:
        if _default_calibration is None:
            _default_calibration = Calibration()
        return _default_calibration


# --- detector ----------------------------------------------------------------

def threshold_at(t: int, m: int, gamma: float, cv: float) -> float:
    """Detection boundary cv * sqrt(m) * (1 + t/m) * (t/(m+t))^gamma."""
    return cv * math.sqrt(m) * (1.0 + t / m) * (t / (m + t)) ** gamma


def start_monitoring(training: Sequence[float], config: CusumConfig,
                     calibration: Calibration | None = None,
                     base_seq: int | None = None,
                     pretested: bool = False) -> CusumState:
    """Validate a training window and build the monitoring state.

    Runs the offline pre-test unless ``pretested``; raises
    TrainingInvalidError (carrying the offline CP estimate) when the window
    contains a change point, DegenerateVarianceError on constant data.
    """
    x = np.asarray(training, dtype=float)
    if len(x) != config.training_len:
        raise ConfigError(f"training length {len(x)} != {config.training_len}")
    cal = calibration or default_calibration()
    if not pretested:
        cp = offline_cp_test(x, config.alpha, calibration=cal,
                             bartlett_window=config.resolve_bartlett())
        if cp is not None:
            raise TrainingInvalidError(cp)
    lrv = bartlett_lrv(x, config.resolve_bartlett())
    cv = cal.monitor_cv(config.gamma, config.alpha, config.sidedness)
    return CusumState(
        training_mean=float(x.mean()),
        lrv=lrv,
        cv=cv,
        config=config,
        base_seq=base_seq if base_seq is not None else config.training_len,
    )


def cusum_step(state: CusumState, value: float) -> DetectionEvent | None:
    """Advance the detector by one sample; O(1) per call.

    Returns a DetectionEvent when the weighted boundary is crossed, None to
    continue. Raises WindowExhaustedError when called with the monitoring
    window already used up.
    """
    cfg = state.config
    if state.t >= cfg.window_len:
        raise WindowExhaustedError(f"monitoring window of {cfg.window_len} exhausted")
    state.t += 1
    state.cumulative_post_sum += value
    detector = state.cumulative_post_sum - state.t * state.training_mean
    stat = detector / state.omega
    if cfg.sidedness == TWO_SIDED:
        stat = abs(stat)
    if stat >= threshold_at(state.t, cfg.training_len, cfg.gamma, state.cv):
        seq = state.base_seq + state.t
        return DetectionEvent(
            detection_seq=seq,
            cp_estimate=seq,
            wall_detect_ns=time.monotonic_ns(),
            statistic_value=float(stat),
            flags=state.flags,
        )
    return None


def offline_cp_test(segment: Sequence[float], alpha: float,
                    calibration: Calibration | None = None,
                    bridge_cv: float | None = None,
                    bartlett_window: int | None = None) -> int | None:
    """Offline CUSUM test for one change point in a fixed segment.

    Computes M = max_k |S_k - (k/n) S_n| / (omega * sqrt(n)) and rejects
    when M exceeds the (1-alpha) quantile of sup |Brownian bridge|.
    Returns the argmax index (1-based) on rejection, None otherwise.
    """
    x = np.asarray(segment, dtype=float)
    n = len(x)
    if n < 20:
        raise ConfigError(f"offline test needs >= 20 samples, got {n}")
    W = bartlett_window if bartlett_window is not None else newey_west_window(n)
    lrv = bartlett_lrv(x, W)
    if bridge_cv is None:
        bridge_cv = (calibration or default_calibration()).bridge_cv(alpha)
    cs = np.cumsum(x)
    k = np.arange(1, n + 1)
    stats = np.abs(cs - k / n * cs[-1]) / (math.sqrt(lrv) * math.sqrt(n))
    kmax = int(np.argmax(stats))
    if stats[kmax] > bridge_cv:
        return kmax + 1
    return None


# --- iterative windowed procedure ---------------------------------------------

class TrainingTransform:
    """Hook mapping raw samples to the values fed into the CUSUM statistic.

    ``fit`` is called once per validated training window and returns the
    transformed training values; ``step`` transforms each subsequent
    monitoring sample, carrying state across the boundary.
    """

    def fit(self, training: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self, value: float) -> float:
        raise NotImplementedError


class IdentityTransform(TrainingTransform):
    def fit(self, training: np.ndarray) -> np.ndarray:
        return training

    def step(self, value: float) -> float:
        return value


class WindowedCusumMonitor:
    """Streaming multi-CP monitor: validate training, monitor up to the window
    length, re-train on the most recent samples after each detection or
    window exhaustion.

    When the offline pre-test rejects a training candidate, samples up to the
    estimated change point are discarded and collection resumes, so training
    always restarts on post-change data.
    """

    def __init__(self, config: CusumConfig, calibration: Calibration | None = None,
                 transform: TrainingTransform | None = None):
        self.config = config
        self.calibration = calibration or default_calibration()
        self.transform = transform or IdentityTransform()
        # boundary function inputs are data independent: fetch once
        self.cv = self.calibration.monitor_cv(config.gamma, config.alpha, config.sidedness)
        self.bridge_cv = self.calibration.bridge_cv(config.alpha)
        self.events: list[DetectionEvent] = []
        self.seq = 0
        self._recent: deque[float] = deque(maxlen=config.training_len)
        self._pending: list[float] = []
        self._state: CusumState | None = None
        self._active: TrainingTransform = self.transform
        self._window_flags: tuple[str, ...] = ()

    @property
    def monitoring(self) -> bool:
        return self._state is not None

    def push(self, value: float) -> DetectionEvent | None:
        """Feed one sample; returns a DetectionEvent at threshold crossings."""
        value = float(value)
        self.seq += 1
        self._recent.append(value)
        if self._state is None:
            self._pending.append(value)
            if len(self._pending) >= self.config.training_len:
                self._try_train()
            return None
        event = cusum_step(self._state, self._active.step(value))
        if event is not None:
            event.flags = self._window_flags
            self.events.append(event)
            self._retrain()
            return event
        if self._state.t >= self.config.window_len:
            self._retrain()
        return None

    def _retrain(self):
        self._state = None
        self._pending = list(self._recent)
        if len(self._pending) >= self.config.training_len:
            self._try_train()

    def _try_train(self):
        m = self.config.training_len
        while len(self._pending) >= m:
            candidate = np.asarray(self._pending[-m:], dtype=float)
            cp = offline_cp_test(candidate, self.config.alpha,
                                 bridge_cv=self.bridge_cv,
                                 bartlett_window=self.config.resolve_bartlett())
            if cp is not None:
                # drop everything up to the estimated CP, wait for fresh data
                self._pending = list(candidate[cp:])
                return
            self._start(candidate)
            return

    def _start(self, training: np.ndarray):
        self._window_flags = ()
        self._active = self.transform
        try:
            transformed = np.asarray(self._active.fit(training), dtype=float)
        except EstimationError:
            # fit failure: raw-data detector for this window, events flagged
            self._active = IdentityTransform()
            transformed = training
            self._window_flags = ("fit-fallback",)
        self._state = start_monitoring(transformed, self.config, self.calibration,
                                       base_seq=self.seq, pretested=True)
        self._state.flags = self._window_flags


def run_windowed_procedure(stream: Iterable[float] | TimeSeries,
                           config: CusumConfig,
                           calibration: Calibration | None = None,
                           transform: TrainingTransform | None = None,
                           ) -> list[DetectionEvent]:
    """Run the iterative windowed procedure over a finite stream and return
    every detection event (empty when the stream is shorter than one
    training window)."""
    values = stream.values if isinstance(stream, TimeSeries) else stream
    monitor = WindowedCusumMonitor(config, calibration, transform)
    for v in values:
        monitor.push(v)
    return monitor.events
