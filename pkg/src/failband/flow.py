"""Flow-matching density scores over observation vectors.

A velocity field ``f(x, s)`` is regressed onto ``Z - x`` along the straight
path ``x_s = x + s (Z - x)`` between a (z-normalized) observation ``x`` at
``s = 0`` and standard normal noise ``Z`` at ``s = 1``.  Two scores come out
of the same field:

* ``logpzo_score``: squared norm of the one-step noise estimate
  ``x + f(x, 0)``.  No ODE solve, one network evaluation.
* ``logpo_score``: negative log density of the observation, from the
  change-of-variables formula along the forward ODE (RK4 + trace of the
  Jacobian).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Activation, AdamState, Mlp, adam_step, init_mlp, load_mlp, minibatches, save_mlp

LOG_2PI = float(np.log(2.0 * np.pi))


class IntegrationError(ArithmeticError):
    """The ODE state became non-finite during integration."""


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        if np.any(~(self.std > 0)):
            raise ValueError("normalizer std must be positive in every dimension")

    @classmethod
    def fit(cls, x: np.ndarray, min_std: float = 1e-8) -> "Normalizer":
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        if np.all(std <= min_std):
            raise ValueError("degenerate data: zero variance in every dimension")
        return cls(x.mean(axis=0), np.maximum(std, min_std))

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    @property
    def log_scale(self) -> float:
        """log |det| of the map from normalized back to raw coordinates."""
        return float(np.sum(np.log(self.std)))


@dataclass
class FlowConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    hidden: tuple[int, ...] = (128, 128)
    activation: str = "smooth_relu"
    seed: int = 0


@dataclass
class FlowModel:
    velocity: Mlp
    normalizer: Normalizer
    config: FlowConfig = field(default_factory=FlowConfig)

    def __post_init__(self) -> None:
        d = self.normalizer.mean.shape[0]
        if self.velocity.in_dim != d + 1 or self.velocity.out_dim != d:
            raise ValueError(
                f"velocity net maps {self.velocity.in_dim}->{self.velocity.out_dim}, "
                f"expected {d + 1}->{d}"
            )

    @property
    def data_dim(self) -> int:
        return self.velocity.out_dim

    def field(self, x: np.ndarray, s) -> np.ndarray:
        """Velocity at normalized points ``x`` (n, d) and time(s) ``s``."""
        x = np.atleast_2d(x)
        s_col = np.broadcast_to(np.asarray(s, dtype=np.float64).reshape(-1, 1), (x.shape[0], 1))
        return self.velocity.forward(np.hstack([x, s_col]))

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape[-1] != self.data_dim:
            raise ValueError(f"observation dim {obs.shape[-1]} != model dim {self.data_dim}")
        return self.normalizer(obs)


def _as_batch(obs: np.ndarray) -> tuple[np.ndarray, bool]:
    obs = np.asarray(obs, dtype=np.float64)
    return np.atleast_2d(obs), obs.ndim == 1


def fit_velocity(
    x: np.ndarray,
    config: FlowConfig,
    consistency_weight: float = 0.0,
) -> tuple[Mlp, list[float]]:
    """Train a velocity net on already-normalized data; returns (net, per-epoch loss)."""
    n, d = x.shape
    rng = np.random.default_rng(config.seed)
    net = init_mlp((d + 1, *config.hidden, d), Activation(config.activation), seed=int(rng.integers(2**31)))
    opt = AdamState.for_model(net, lr=config.lr)
    history = []
    for _ in range(config.epochs):
        total = 0.0
        for idx in minibatches(n, config.batch_size, rng):
            xb = x[idx]
            b = xb.shape[0]
            z = rng.standard_normal((b, d))
            s1 = rng.uniform(size=(b, 1))
            xs1 = xb + s1 * (z - xb)
            out1, cache1 = net.forward_cached(np.hstack([xs1, s1]))
            resid = out1 - (z - xb)
            loss = np.sum(resid**2) / b
            g1 = 2.0 * resid / b
            grads = None
            if consistency_weight > 0.0:
                s2 = rng.uniform(size=(b, 1))
                xs2 = xb + s2 * (z - xb)
                out2, cache2 = net.forward_cached(np.hstack([xs2, s2]))
                diff = (xs1 + (1.0 - s1) * out1) - (xs2 + (1.0 - s2) * out2)
                loss += consistency_weight * np.sum(diff**2) / b
                g1 = g1 + consistency_weight * 2.0 * diff * (1.0 - s1) / b
                g2 = -consistency_weight * 2.0 * diff * (1.0 - s2) / b
                grads = net.backward(cache2, g2)
            g = net.backward(cache1, g1)
            if grads is not None:
                g = [a + c for a, c in zip(g, grads)]
            adam_step(net, g, opt)
            total += loss * b
        history.append(total / n)
    return net, history


def train_flow(observations: np.ndarray, config: FlowConfig | None = None) -> FlowModel:
    """Fit a flow-matching velocity field to z-normalized observations."""
    config = config or FlowConfig()
    x = np.asarray(observations, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a (n >= 2, d) array of observations")
    if len(np.unique(x, axis=0)) < 2:
        raise ValueError("degenerate data: fewer than 2 distinct observations")
    norm = Normalizer.fit(x)
    net, _ = fit_velocity(norm(x), config)
    return FlowModel(net, norm, config)


def noise_estimate(model: FlowModel, obs: np.ndarray, steps: int = 1) -> np.ndarray:
    """Latent noise estimate of raw observation(s).

    ``steps == 1`` is the single-evaluation estimate ``x + f(x, 0)`` (one
    Euler step over the whole unit interval).  Larger ``steps`` integrate the
    forward ODE to ``s = 1`` with RK4, which is what makes the latent close
    to N(0, I) for in-distribution inputs; the one-step estimate regresses to
    ``E[Z | x] = 0`` instead and only deviates from it off-distribution.
    """
    x, single = _as_batch(obs)
    x = model.normalize(x)
    if steps == 1:
        z = x + model.field(x, 0.0)
    else:
        z, _ = _integrate(model, x, steps, None)
    return z[0] if single else z


def logpzo_score(model: FlowModel, obs: np.ndarray, steps: int = 1) -> np.ndarray | float:
    """Squared norm of the latent noise estimate; higher means less likely."""
    z = noise_estimate(model, obs, steps)
    if z.ndim == 1:
        return float(z @ z)
    return np.einsum("ij,ij->i", z, z)


def transport(model: FlowModel, obs: np.ndarray, steps: int = 32) -> np.ndarray:
    """Integrate the forward ODE from the normalized observation to s = 1 (RK4)."""
    if steps < 2:
        raise ValueError("transport needs at least 2 RK4 steps")
    return noise_estimate(model, obs, steps)


@dataclass(frozen=True)
class Integrator:
    steps: int = 32
    divergence: str = "auto"  # "exact", "hutchinson" or "auto"
    probes: int = 8
    seed: int = 0
    fd_step: float = 1e-6

    def resolved(self, dim: int) -> str:
        if self.divergence == "auto":
            return "exact" if dim <= 64 else "hutchinson"
        if self.divergence not in ("exact", "hutchinson"):
            raise ValueError(f"unknown divergence estimator {self.divergence!r}")
        return self.divergence


def _divergence(model: FlowModel, x: np.ndarray, s: float, f0: np.ndarray, integ: Integrator, probes) -> np.ndarray:
    n, d = x.shape
    h = integ.fd_step
    if probes is None:
        # forward differences along every coordinate: one batched call of n*d points
        pert = (x[:, None, :] + h * np.eye(d)[None, :, :]).reshape(n * d, d)
        fp = model.field(pert, s).reshape(n, d, d)
        return (np.einsum("nii->n", fp) - f0.sum(axis=1)) / h
    k = probes.shape[0]
    pert = (x[:, None, :] + h * probes[None, :, :]).reshape(n * k, d)
    fp = model.field(pert, s).reshape(n, k, d)
    jv = (fp - f0[:, None, :]) / h
    return np.einsum("nkd,kd->n", jv, probes) / k


def _integrate(
    model: FlowModel,
    x: np.ndarray,
    steps: int,
    integ: Integrator | None,
    s_start: float = 0.0,
    s_end: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """RK4 on the state (x, accumulated divergence); divergence skipped when integ is None."""
    if steps < 1:
        raise ValueError("need at least one integration step")
    n, d = x.shape
    probes = None
    if integ is not None and integ.resolved(d) == "hutchinson":
        rng = np.random.default_rng(integ.seed)
        probes = rng.choice([-1.0, 1.0], size=(integ.probes, d))

    def rhs(xc: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
        f = model.field(xc, s)
        if integ is None:
            return f, np.zeros(n)
        return f, _divergence(model, xc, s, f, integ, probes)

    dt = (s_end - s_start) / steps
    acc = np.zeros(n)
    for i in range(steps):
        s = s_start + i * dt
        k1, d1 = rhs(x, s)
        k2, d2 = rhs(x + 0.5 * dt * k1, s + 0.5 * dt)
        k3, d3 = rhs(x + 0.5 * dt * k2, s + 0.5 * dt)
        k4, d4 = rhs(x + dt * k3, s + dt)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        acc = acc + dt / 6.0 * (d1 + 2 * d2 + 2 * d3 + d4)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(acc))):
            raise IntegrationError(f"ODE state diverged at s={s + dt:.4f}")
    return x, acc


def trajectory(model: FlowModel, x: np.ndarray, grid, steps: int = 16) -> np.ndarray:
    """Forward-ODE states of normalized points ``x`` at each time in ``grid``.

    Returns shape (len(grid), n, d).  Between grid points RK4 runs with about
    ``steps`` steps per unit time.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(grid) < 0) or grid[0] < 0 or grid[-1] > 1:
        raise ValueError("grid must be sorted and inside [0, 1]")
    out = np.empty((len(grid),) + x.shape)
    cur, s_cur = x, 0.0
    for i, s in enumerate(grid):
        if s > s_cur:
            k = max(1, int(np.ceil((s - s_cur) * steps - 1e-9)))
            cur, _ = _integrate(model, cur, k, None, s_cur, s)
            s_cur = s
        out[i] = cur
    return out


def logpo_score(model: FlowModel, obs: np.ndarray, integrator: Integrator | None = None) -> np.ndarray | float:
    """Negative log density of raw observation(s); higher means less likely.

    ``log p(O) = log N(Z; 0, I) + int_0^1 div f(x(s), s) ds - sum(log std)``
    with ``Z = x(1)`` and the last term undoing the z-normalization.
    """
    integ = integrator or Integrator()
    if integ.steps < 4:
        raise ValueError("logpO integration needs at least 4 steps")
    x, single = _as_batch(obs)
    x = model.normalize(x)
    z, div_int = _integrate(model, x, integ.steps, integ)
    d = x.shape[1]
    log_pz = -0.5 * d * LOG_2PI - 0.5 * np.einsum("ij,ij->i", z, z)
    nll = -(log_pz + div_int) + model.normalizer.log_scale
    return float(nll[0]) if single else nll


# -- persistence -------------------------------------------------------------


def flow_sections(model: FlowModel, prefix: str = "flow") -> dict:
    return {
        f"{prefix}.velocity": model.velocity,
        f"{prefix}.norm_mean": model.normalizer.mean,
        f"{prefix}.norm_std": model.normalizer.std,
    }


def flow_from_sections(sections: dict, prefix: str = "flow") -> FlowModel:
    norm = Normalizer(sections[f"{prefix}.norm_mean"], sections[f"{prefix}.norm_std"])
    return FlowModel(sections[f"{prefix}.velocity"], norm)


def save_flow(model: FlowModel, path: str | Path) -> None:
    """Velocity net as an FBND model file plus a ``<path>.norm.json`` sidecar."""
    save_mlp(model.velocity, path)
    with open(f"{path}.norm.json", "w", encoding="utf-8") as fh:
        json.dump({"mean": model.normalizer.mean.tolist(), "std": model.normalizer.std.tolist()}, fh)


def load_flow(path: str | Path) -> FlowModel:
    with open(f"{path}.norm.json", encoding="utf-8") as fh:
        rec = json.load(fh)
    norm = Normalizer(np.array(rec["mean"], dtype=np.float64), np.array(rec["std"], dtype=np.float64))
    return FlowModel(load_mlp(path), norm)
