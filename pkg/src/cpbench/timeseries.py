"""Synthetic ARMA time series with injected mean shifts, plus the basic
statistical primitives (empirical autocovariance) shared by the detectors.

Series are stored as plain float arrays; the data index ("seq") is 1-based
and implicit in the array position.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError

__all__ = [
    "Sample",
    "GeneratorSpec",
    "CpInjection",
    "TimeSeries",
    "generate_arma",
    "inject_mean_shift",
    "empirical_autocovariance",
    "write_series_csv",
    "read_series_csv",
]


@dataclass(frozen=True)
class Sample:
    """One observation: 1-based data index and real value."""

    seq: int
    value: float


@dataclass(frozen=True)
class GeneratorSpec:
    """ARMA(p, q) generator parameters.

    The AR polynomial 1 - sum_j ar[j] z^j must have all roots outside the
    unit circle (stationarity); checked at construction. Innovations are
    standard normal scaled by ``innovation_std``.
    """

    ar_coeffs: tuple[float, ...] = ()
    ma_coeffs: tuple[float, ...] = ()
    innovation_std: float = 1.0
    length: int = 500
    burn_in: int = 500
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ar_coeffs", tuple(float(c) for c in self.ar_coeffs))
        object.__setattr__(self, "ma_coeffs", tuple(float(c) for c in self.ma_coeffs))
        if self.innovation_std <= 0:
            raise ConfigError(f"innovation_std must be > 0, got {self.innovation_std}")
        if self.length <= 0:
            raise ConfigError(f"length must be > 0, got {self.length}")
        if self.burn_in < 0:
            raise ConfigError(f"burn_in must be >= 0, got {self.burn_in}")
        if self.ar_coeffs and not _roots_outside_unit_circle(self.ar_coeffs, negate=True):
            raise ConfigError(f"non-stationary AR coefficients {self.ar_coeffs}")

    def to_dict(self) -> dict:
        return {
            "ar_coeffs": list(self.ar_coeffs),
            "ma_coeffs": list(self.ma_coeffs),
            "innovation_std": self.innovation_std,
            "length": self.length,
            "burn_in": self.burn_in,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(
            ar_coeffs=tuple(d.get("ar_coeffs", ())),
            ma_coeffs=tuple(d.get("ma_coeffs", ())),
            innovation_std=d.get("innovation_std", 1.0),
            length=d["length"],
            burn_in=d.get("burn_in", 500),
            seed=d.get("seed", 0),
        )


@dataclass(frozen=True)
class CpInjection:
    """Mean-shift injection: samples with seq >= t_cp get value + mean_shift."""

    t_cp: int
    mean_shift: float

    def __post_init__(self):
        if self.t_cp <= 1:
            raise ConfigError(f"t_cp must be > 1, got {self.t_cp}")


@dataclass
class TimeSeries:
    """Indexed observations with generation metadata and optional ground truth."""

    values: np.ndarray
    t_cp: int | None = None
    spec: GeneratorSpec | None = None
    injection: CpInjection | None = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    def __len__(self) -> int:
        return len(self.values)

    def samples(self) -> Iterator[Sample]:
        for i, v in enumerate(self.values, start=1):
            yield Sample(i, float(v))


def _roots_outside_unit_circle(coeffs: Sequence[float], negate: bool) -> bool:
    # Polynomial 1 -+ c_1 z - ... in ascending order; negate=True for the AR
    # convention 1 - sum c_j z^j.
    sign = -1.0 if negate else 1.0
    poly = np.r_[1.0, sign * np.asarray(coeffs, dtype=float)]
    roots = np.polynomial.polynomial.polyroots(poly)
    return bool(np.all(np.abs(roots) > 1.0))


def generate_arma(spec: GeneratorSpec) -> TimeSeries:
    """Generate a stationary ARMA series, discarding ``burn_in`` warm-up samples.

    Deterministic in ``spec.seed``; the recursion starts from zero state so
    the burn-in washes out initialization transients.
    """
    rng = np.random.default_rng(spec.seed)
    innov = rng.standard_normal(spec.length + spec.burn_in) * spec.innovation_std
    ar_poly = np.r_[1.0, -np.asarray(spec.ar_coeffs)] if spec.ar_coeffs else np.array([1.0])
    ma_poly = np.r_[1.0, np.asarray(spec.ma_coeffs)] if spec.ma_coeffs else np.array([1.0])
    y = lfilter(ma_poly, ar_poly, innov)
    return TimeSeries(values=y[spec.burn_in:], spec=spec)


def inject_mean_shift(ts: TimeSeries, inj: CpInjection) -> TimeSeries:
    """Return a copy with the mean shifted from ``inj.t_cp`` on and the ground
    truth recorded on the series."""
    if not 1 < inj.t_cp <= len(ts):
        raise ConfigError(f"t_cp {inj.t_cp} outside series of length {len(ts)}")
    values = ts.values.copy()
    values[inj.t_cp - 1:] += inj.mean_shift
    return TimeSeries(values=values, t_cp=inj.t_cp, spec=ts.spec, injection=inj)


def empirical_autocovariance(values: Sequence[float], lag: int) -> float:
    """Biased (1/n) empirical autocovariance at the given lag.

    The 1/n normalization keeps the Bartlett-weighted sum positive
    semi-definite.
    """
    x = np.asarray(values, dtype=float)
    n = len(x)
    if n == 0:
        raise ConfigError("empty input")
    if not 0 <= lag < n:
        raise ConfigError(f"lag {lag} out of range for length {n}")
    xc = x - x.mean()
    return float(np.dot(xc[: n - lag], xc[lag:]) / n)


# --- CSV serialization -----------------------------------------------------

def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".meta.json")


def write_series_csv(ts: TimeSeries, path: str | Path) -> Path:
    """Write ``seq,value`` rows plus a JSON metadata sidecar (ground-truth
    t_cp and generator spec, when known). Returns the CSV path."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq", "value"])
        for s in ts.samples():
            w.writerow([s.seq, format(s.value, ".17g")])
    meta = {
        "t_cp": ts.t_cp,
        "mean_shift": ts.injection.mean_shift if ts.injection else None,
        "generator": ts.spec.to_dict() if ts.spec else None,
    }
    with open(_sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=2)
    return path


def read_series_csv(path: str | Path) -> TimeSeries:
    """Read a series written by :func:`write_series_csv` (sidecar optional)."""
    path = Path(path)
    values = []
    with open(path, newline="") as fh:
        rdr = csv.reader(fh)
        header = next(rdr)
        if header[:2] != ["seq", "value"]:
            raise ConfigError(f"unexpected series header {header!r} in {path}")
        for expected, row in enumerate(rdr, start=1):
            if int(row[0]) != expected:
                raise ConfigError(f"non-consecutive seq {row[0]} in {path}")
            values.append(float(row[1]))
    t_cp = None
    spec = None
    side = _sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        t_cp = meta.get("t_cp")
        if meta.get("generator"):
            spec = GeneratorSpec.from_dict(meta["generator"])
    return TimeSeries(values=np.array(values), t_cp=t_cp, spec=spec)
