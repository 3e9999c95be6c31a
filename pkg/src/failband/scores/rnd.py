"""Random network distillation over (action chunk, observation) pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..flow import Normalizer
from ..nn import Activation, AdamState, Mlp, adam_step, init_mlp, loss_and_grad, minibatches


@dataclass
class RndConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    hidden: tuple[int, ...] = (128, 128)
    out_dim: int = 64
    activation: str = "smooth_relu"
    seed: int = 0
    # None -> derived from seed; target and predictor must differ
    target_seed: int | None = None
    predictor_seed: int | None = None


@dataclass
class RndModel:
    target: Mlp
    predictor: Mlp
    normalizer: Normalizer

    @property
    def in_dim(self) -> int:
        return self.target.in_dim


def rnd_inputs(actions: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Concatenate flattened action chunks with observations, row per pair."""
    actions = np.asarray(actions, dtype=np.float64)
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    a = actions.reshape(obs.shape[0], -1)
    return np.hstack([a, obs])


def rnd_train(actions: np.ndarray, obs: np.ndarray, config: RndConfig | None = None) -> RndModel:
    config = config or RndConfig()
    x = rnd_inputs(actions, obs)
    if x.shape[0] < 1:
        raise ValueError("need at least one (A, O) pair")
    norm = Normalizer(x.mean(axis=0), np.maximum(x.std(axis=0), 1e-6))
    xn = norm(x)
    dims = (x.shape[1], *config.hidden, config.out_dim)
    act = Activation(config.activation)
    t_seed = config.seed if config.target_seed is None else config.target_seed
    p_seed = config.seed + 1 if config.predictor_seed is None else config.predictor_seed
    target = init_mlp(dims, act, seed=t_seed)
    predictor = init_mlp(dims, act, seed=p_seed)
    y = target.forward(xn)
    opt = AdamState.for_model(predictor, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    for _ in range(config.epochs):
        for idx in minibatches(len(xn), config.batch_size, rng):
            _, grads = loss_and_grad(predictor, xn[idx], y[idx])
            adam_step(predictor, grads, opt)
    return RndModel(target, predictor, norm)


def rnd_score(model: RndModel, actions: np.ndarray, obs: np.ndarray) -> np.ndarray | float:
    """||f_target(A, O) - f_pred(A, O)||^2 per pair."""
    single = np.asarray(obs).ndim == 1
    x = rnd_inputs(actions, obs)
    if x.shape[1] != model.in_dim:
        raise ValueError(f"pair dim {x.shape[1]} != model input dim {model.in_dim}")
    xn = model.normalizer(x)
    diff = model.target.forward(xn) - model.predictor.forward(xn)
    out = np.einsum("ij,ij->i", diff, diff)
    return float(out[0]) if single else out
