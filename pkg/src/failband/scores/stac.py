"""Temporal action consistency: MMD between overlapping segments of consecutive plan batches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from ..conformal import conformal_rank

# (observation, batch size, rng) -> (B, H, d_a) action chunks
PolicySampler = Callable[[np.ndarray, int, np.random.Generator], np.ndarray]


@dataclass
class StacConfig:
    batch_size: int = 256
    H: int = 16
    H_prime: int = 8
    bandwidth: float | None = None  # None -> median heuristic on the first batch seen
    threshold_mode: str = "cumulative"  # or "band"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ValueError("STAC batch size must be >= 2")
        if self.H - self.H_prime < 1:
            raise ValueError("STAC needs an overlap H - H' >= 1")
        if self.threshold_mode not in ("cumulative", "band"):
            raise ValueError(f"unknown STAC threshold mode {self.threshold_mode!r}")

    @property
    def overlap(self) -> int:
        return self.H - self.H_prime


def _kernel(a: np.ndarray, b: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * sigma**2))


def mmd2(x: np.ndarray, y: np.ndarray, sigma: float, unbiased: bool = True, clip: bool = True) -> float:
    """Squared MMD with an RBF kernel.

    The unbiased U-statistic drops the diagonal self-similarity terms and
    needs at least two points per batch; ``unbiased=False`` gives the
    V-statistic.  ``clip`` floors the estimate at 0 for use as a score.
    """
    if sigma <= 0:
        raise ValueError("kernel bandwidth must be positive")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    m, n = len(x), len(y)
    if m == 0 or n == 0:
        raise ValueError("MMD needs non-empty batches")
    kxx = _kernel(x, x, sigma)
    kyy = _kernel(y, y, sigma)
    kxy = _kernel(x, y, sigma)
    if unbiased:
        if m < 2 or n < 2:
            raise ValueError("unbiased MMD needs at least 2 points per batch")
        val = (
            (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
            + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
            - 2.0 * kxy.mean()
        )
    else:
        val = kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
    val = float(val)
    return max(val, 0.0) if clip else val


def median_bandwidth(batch: np.ndarray, fallback: float = 1.0) -> float:
    d = pdist(np.atleast_2d(batch))
    med = float(np.median(d)) if d.size else 0.0
    return med if med > 0 else fallback


def overlap_segments(prev_batch: np.ndarray, cur_batch: np.ndarray, H_prime: int) -> tuple[np.ndarray, np.ndarray]:
    """Last H - H' rows of the previous plans and first H - H' rows of the current ones, flattened."""
    H = prev_batch.shape[1]
    k = H - H_prime
    a = prev_batch[:, H_prime:, :].reshape(len(prev_batch), -1)
    b = cur_batch[:, :k, :].reshape(len(cur_batch), -1)
    return a, b


def stac_score(
    sampler: PolicySampler,
    obs: np.ndarray,
    prev_batch: np.ndarray | None,
    config: StacConfig,
    rng: np.random.Generator,
    sigma: float | None = None,
) -> tuple[float, np.ndarray]:
    """Score one execution step and return the new batch for chaining.

    The first step of a rollout (``prev_batch is None``) scores 0.
    """
    cur = np.asarray(sampler(obs, config.batch_size, rng), dtype=np.float64)
    if prev_batch is None:
        return 0.0, cur
    a, b = overlap_segments(prev_batch, cur, config.H_prime)
    bw = sigma if sigma is not None else (config.bandwidth or median_bandwidth(np.vstack([a, b])))
    return mmd2(a, b, bw), cur


def cumulative_quantile(values: Sequence[float], alpha: float) -> float:
    """Conformal (1 - alpha) order statistic, k = ceil((N + 1)(1 - alpha)) clamped to [1, N]."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)
    if n == 0:
        raise ValueError("empty calibration set")
    k = min(max(conformal_rank(n, alpha), 1), n)
    return float(v[k - 1])


def stac_calibrate_threshold(series: Sequence[np.ndarray], alpha: float = 0.05) -> float:
    """Single time-invariant threshold on the running sum of STAC scores."""
    if len(series) == 0:
        raise ValueError("empty calibration set")
    totals = [float(np.sum(np.asarray(s, dtype=np.float64))) for s in series]
    return cumulative_quantile(totals, alpha)
