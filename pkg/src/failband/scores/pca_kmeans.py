"""PCA embedding followed by k-means; distance to the nearest centroid is the score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PcaKmeansModel:
    mean: np.ndarray
    components: np.ndarray  # (m, d), orthonormal rows
    centroids: np.ndarray  # (K, m)
    inertia: float = 0.0

    def embed(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.shape[0]:
            raise ValueError(f"feature dim {x.shape[-1]} != model dim {self.mean.shape[0]}")
        return (x - self.mean) @ self.components.T


def pca(x: np.ndarray, m: int | None = None, var_ratio: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Top principal directions from the covariance eigendecomposition.

    With ``m=None`` the smallest m whose components explain ``var_ratio`` of
    the variance is used.
    """
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(len(x) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    if m is None:
        total = evals.sum()
        if total <= 0:
            m = 1
        else:
            m = int(np.searchsorted(np.cumsum(evals) / total, var_ratio - 1e-12) + 1)
    m = max(1, min(int(m), x.shape[1]))
    comps = evecs[:, :m].T
    # fix the sign so the decomposition is reproducible
    signs = np.sign(comps[np.arange(m), np.argmax(np.abs(comps), axis=1)])
    return mean, comps * signs[:, None]


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] - 2.0 * a @ b.T + (b * b).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(
    x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 300, tol: float = 1e-6
) -> tuple[np.ndarray, float]:
    """k-means++ seeding then Lloyd iterations until the relative inertia change < tol."""
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers[j] = x[idx]
        d2 = np.minimum(d2, _sq_dists(x, centers[j : j + 1])[:, 0])
    prev = np.inf
    inertia = np.inf
    for _ in range(max_iter):
        dist = _sq_dists(x, centers)
        assign = dist.argmin(axis=1)
        inertia = float(dist[np.arange(n), assign].sum())
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
        if np.isfinite(prev) and (prev == 0.0 or abs(prev - inertia) <= tol * prev):
            break
        prev = inertia
    dist = _sq_dists(x, centers)
    inertia = float(dist.min(axis=1).sum())
    return centers, inertia


def pca_kmeans_fit(
    features: np.ndarray, m: int | None = None, k: int = 64, seed: int = 0
) -> PcaKmeansModel:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D array")
    if len(x) < k:
        raise ValueError(f"need at least K={k} samples, got {len(x)}")
    mean, comps = pca(x, m)
    emb = (x - mean) @ comps.T
    centers, inertia = kmeans(emb, k, np.random.default_rng(seed))
    return PcaKmeansModel(mean, comps, centers, inertia)


def pca_kmeans_score(model: PcaKmeansModel, obs: np.ndarray) -> np.ndarray | float:
    obs = np.asarray(obs, dtype=np.float64)
    emb = np.atleast_2d(model.embed(obs))
    out = np.linalg.norm(emb[:, None, :] - model.centroids[None, :, :], axis=2).min(axis=1)
    return float(out[0]) if obs.ndim == 1 else out
