"""One-sided, time-varying conformal band over score trajectories.

Calibration uses successful rollouts only.  The set is split in two: the
first part fixes a mean curve ``mu_t`` and a modulation ``s_t``, the second
supplies the normalized max deviations ``max_t (D(t) - mu_t) / s_t`` whose
conformal quantile ``h`` sets the band ``upper_t = mu_t + h * s_t``.  A test
trajectory that stays below ``upper_t`` for every ``t`` is covered with
probability at least ``1 - alpha`` under exchangeability.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ScoreSeries

EPS_FLOOR = 1e-12


class CoverageWarning(UserWarning):
    """Too few calibration series for the requested alpha; the max is used instead."""


def conformal_rank(n: int, alpha: float) -> int:
    """1-based rank ceil((n + 1)(1 - alpha)), unclamped."""
    # the epsilon keeps exact products such as 20 * 0.95 from rounding up
    return math.ceil((n + 1) * (1.0 - alpha) - 1e-12)


@dataclass(frozen=True)
class CPBand:
    alpha: float
    mu: np.ndarray
    s: np.ndarray
    h: float
    upper: np.ndarray
    lower: float
    variant: str
    n1: int
    n2: int
    t_grid: np.ndarray
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        for name in ("mu", "s", "upper", "t_grid"):
            object.__setattr__(self, name, np.asarray(getattr(self, name)))
        T = len(self.t_grid)
        if not (len(self.mu) == len(self.s) == len(self.upper) == T):
            raise ValueError("mu, s, upper and t_grid must have equal length")
        if np.any(self.s <= 0):
            raise ValueError("modulation must be strictly positive")

    def __len__(self) -> int:
        return len(self.t_grid)

    def threshold(self, index: int) -> float:
        """Upper threshold at grid position ``index``; past the horizon the last value holds."""
        return float(self.upper[min(index, len(self.upper) - 1)])

    def thresholds(self, n: int) -> np.ndarray:
        idx = np.minimum(np.arange(n), len(self.upper) - 1)
        return self.upper[idx]

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "variant": self.variant,
            "n1": self.n1,
            "n2": self.n2,
            "t_grid": [int(t) for t in self.t_grid],
            "mu": self.mu.tolist(),
            "s": self.s.tolist(),
            "h": self.h,
            "upper": self.upper.tolist(),
            "lower": self.lower,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, d: dict) -> "CPBand":
        return cls(
            alpha=float(d["alpha"]),
            mu=np.array(d["mu"], dtype=np.float64),
            s=np.array(d["s"], dtype=np.float64),
            h=float(d["h"]),
            upper=np.array(d["upper"], dtype=np.float64),
            lower=float(d["lower"]),
            variant=str(d["variant"]),
            n1=int(d["n1"]),
            n2=int(d["n2"]),
            t_grid=np.array(d["t_grid"], dtype=np.int64),
            warnings=tuple(d.get("warnings", ())),
        )


def save_band(band: CPBand, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(band.to_json(), fh, indent=1)
        fh.write("\n")


def load_band(path: str | Path) -> CPBand:
    with open(path, encoding="utf-8") as fh:
        return CPBand.from_json(json.load(fh))


def align_series(series: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Stack series of unequal length by holding each one's final value.

    Accepts ScoreSeries or plain arrays.  The grid is taken from the longest
    ScoreSeries, or ``0..T-1`` for plain arrays.
    """
    if len(series) == 0:
        raise ValueError("no series to align")
    vals = [np.asarray(s.values if isinstance(s, ScoreSeries) else s, dtype=np.float64) for s in series]
    if any(v.ndim != 1 or v.size == 0 for v in vals):
        raise ValueError("every series must be a non-empty 1-D sequence")
    T = max(v.size for v in vals)
    out = np.empty((len(vals), T))
    for i, v in enumerate(vals):
        out[i, : v.size] = v
        out[i, v.size :] = v[-1]
    longest = int(np.argmax([v.size for v in vals]))
    if isinstance(series[longest], ScoreSeries):
        t_grid = np.asarray(series[longest].t, dtype=np.int64)
    else:
        t_grid = np.arange(T, dtype=np.int64)
    return out, t_grid


def split_calibration(
    scores: np.ndarray, ratio: float = 0.3, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle; the first ceil(ratio * N) rows go to the mean/modulation part."""
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n < 2:
        raise ValueError(f"need at least 2 calibration series, got {n}")
    if not 0.0 < ratio < 1.0:
        raise ValueError("split ratio must be in (0, 1)")
    n1 = math.ceil(ratio * n - 1e-12)
    if n1 < 1 or n1 > n - 1:
        raise ValueError(f"split ratio {ratio} leaves an empty part for N={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return scores[perm[:n1]], scores[perm[n1:]]


def mean_curve(cal_a: np.ndarray) -> np.ndarray:
    cal_a = np.atleast_2d(cal_a)
    if len(cal_a) < 1:
        raise ValueError("empty calibration part")
    return cal_a.mean(axis=0)


def modulation_v1(t_grid) -> np.ndarray:
    """Constant modulation 1/T."""
    T = len(t_grid) if not np.isscalar(t_grid) else int(t_grid)
    if T < 1:
        raise ValueError("empty time grid")
    return np.full(T, 1.0 / T)


def modulation_v2(cal_a: np.ndarray, mu: np.ndarray, alpha: float, eps: float = EPS_FLOOR) -> np.ndarray:
    """Pointwise max |D_k(t) - mu_t| over the non-extreme series of ``cal_a``.

    When the conformal rank exceeds N1 every series is kept; otherwise series
    whose sup-deviation is above the (1 - alpha) order statistic are dropped.
    """
    cal_a = np.atleast_2d(cal_a)
    n1 = len(cal_a)
    if n1 < 1:
        raise ValueError("empty calibration part")
    dev = np.abs(cal_a - mu)
    if (n1 + 1) * (1.0 - alpha) > n1:
        keep = np.ones(n1, dtype=bool)
    else:
        sup = dev.max(axis=1)
        k = min(max(conformal_rank(n1, alpha), 1), n1)
        gamma = np.sort(sup)[k - 1]
        keep = sup <= gamma
    assert keep.any(), "H set cannot be empty"
    s = dev[keep].max(axis=0)
    return np.where(s > 0, s, eps)


def max_deviation(series: np.ndarray, mu: np.ndarray, s: np.ndarray) -> np.ndarray:
    """max_t (D(t) - mu_t) / s_t for each row of ``series`` (upward deviations)."""
    series = np.atleast_2d(series)
    if series.shape[1] != len(mu) or len(mu) != len(s):
        raise ValueError("series, mean and modulation lengths differ")
    return ((series - mu) / s).max(axis=1)


def band_width(deviations: np.ndarray, alpha: float) -> tuple[float, str | None]:
    """Conformal quantile of the max deviations and an optional coverage warning."""
    d = np.sort(np.asarray(deviations, dtype=np.float64))
    n = len(d)
    if n == 0:
        raise ValueError("no deviations to take a quantile of")
    k = max(conformal_rank(n, alpha), 1)
    if k > n:
        msg = (
            f"rank ceil((N2+1)(1-alpha)) = {k} exceeds N2 = {n}; using the max deviation, "
            f"nominal coverage {1 - alpha:.3f} is not guaranteed"
        )
        return float(d[-1]), msg
    return float(d[k - 1]), None


def build_band(
    series: Sequence,
    alpha: float = 0.05,
    variant: str = "V2",
    split_ratio: float = 0.3,
    seed: int = 0,
    modulation_alpha: float | None = None,
) -> CPBand:
    """Calibrate a band on successful-rollout score series (see module docstring).

    ``modulation_alpha`` sets the level of the V2 outlier filter; by default it
    equals ``alpha``.  Holding it fixed makes ``upper`` monotone in ``alpha``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    variant = variant.upper()
    if variant not in ("V1", "V2"):
        raise ValueError(f"unknown modulation variant {variant!r}")
    scores, t_grid = align_series(series)
    cal_a, cal_b = split_calibration(scores, split_ratio, seed)
    mu = mean_curve(cal_a)
    if variant == "V1":
        s = modulation_v1(t_grid)
    else:
        s = modulation_v2(cal_a, mu, alpha if modulation_alpha is None else modulation_alpha)
    dev = max_deviation(cal_b, mu, s)
    h, warn = band_width(dev, alpha)
    # a negative quantile would put the band below the mean curve
    h = max(h, 0.0)
    notes = ()
    if warn:
        warnings.warn(warn, CoverageWarning, stacklevel=2)
        notes = (warn,)
    return CPBand(
        alpha=alpha,
        mu=mu,
        s=s,
        h=h,
        upper=mu + h * s,
        lower=float(scores.min()),
        variant=variant,
        n1=len(cal_a),
        n2=len(cal_b),
        t_grid=t_grid,
        warnings=notes,
    )


def flat_band(threshold: float, t_grid, alpha: float = 0.05, lower: float = 0.0, variant: str = "flat") -> CPBand:
    """A constant threshold expressed as a band (mu = threshold, h = 0, s = 1).

    ``variant="cumulative"`` tells the detector to compare running sums of the
    scores against the threshold (STAC's calibration rule).
    """
    t_grid = np.asarray(t_grid, dtype=np.int64)
    T = len(t_grid)
    mu = np.full(T, float(threshold))
    return CPBand(
        alpha=alpha,
        mu=mu,
        s=np.ones(T),
        h=0.0,
        upper=mu.copy(),
        lower=lower,
        variant=variant,
        n1=0,
        n2=0,
        t_grid=t_grid,
    )
