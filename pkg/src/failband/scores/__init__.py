"""One scoring interface over every method, plus model-file persistence.

Stateless scorers map a batch of (observation, action chunk) pairs to scores.
STAC carries chaining state between consecutive steps, so every scorer also
exposes ``reset`` / ``score_step`` for streaming use.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..core import Rollout, ScoreMethodId, ScoreSeries
from ..flow import (
    FlowConfig,
    FlowModel,
    Integrator,
    Normalizer,
    flow_from_sections,
    flow_sections,
    logpo_score,
    logpzo_score,
    train_flow,
)
from ..nn import load_container, save_container
from .cfm import CfmConfig, CfmModel, cfm_score, cfm_train
from .pca_kmeans import PcaKmeansModel, pca_kmeans_fit, pca_kmeans_score
from .rnd import RndConfig, RndModel, rnd_score, rnd_train
from .sparc import sparc_chunk
from .stac import PolicySampler, StacConfig, median_bandwidth, mmd2, overlap_segments

TRAINABLE = (ScoreMethodId.LOGPZO, ScoreMethodId.LOGPO, ScoreMethodId.RND, ScoreMethodId.CFM, ScoreMethodId.PCA_KMEANS)


class Scorer:
    method: ScoreMethodId

    def score_batch(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Scores for ``obs`` (n, d_O) and ``actions`` (n, H, d_a)."""
        raise NotImplementedError

    def reset(self) -> None:
        pass

    def score_step(self, obs: np.ndarray, action_chunk: np.ndarray) -> float:
        return float(self.score_batch(np.asarray(obs)[None], np.asarray(action_chunk)[None])[0])

    def score_rollout(self, rollout: Rollout) -> ScoreSeries:
        vals = self.score_batch(rollout.observations, rollout.actions)
        return ScoreSeries(rollout.id, self.method.value, rollout.t_grid, vals)


@dataclass
class LogpzoScorer(Scorer):
    flow: FlowModel
    steps: int = 1
    method = ScoreMethodId.LOGPZO

    def score_batch(self, obs, actions):
        return np.atleast_1d(logpzo_score(self.flow, obs, steps=self.steps))


@dataclass
class LogpoScorer(Scorer):
    flow: FlowModel
    integrator: Integrator = field(default_factory=Integrator)
    method = ScoreMethodId.LOGPO

    def score_batch(self, obs, actions):
        return np.atleast_1d(logpo_score(self.flow, obs, self.integrator))


@dataclass
class RndScorer(Scorer):
    model: RndModel
    method = ScoreMethodId.RND

    def score_batch(self, obs, actions):
        return np.atleast_1d(rnd_score(self.model, actions, obs))


@dataclass
class CfmScorer(Scorer):
    model: CfmModel
    method = ScoreMethodId.CFM

    def score_batch(self, obs, actions):
        return np.atleast_1d(cfm_score(self.model, obs))


@dataclass
class PcaKmeansScorer(Scorer):
    model: PcaKmeansModel
    method = ScoreMethodId.PCA_KMEANS

    def score_batch(self, obs, actions):
        return np.atleast_1d(pca_kmeans_score(self.model, obs))


@dataclass
class SparcScorer(Scorer):
    fs: float = 1.0
    pad_level: int = 2
    f_cut: float = 10.0
    amp_threshold: float = 0.05
    method = ScoreMethodId.SPARC

    def score_batch(self, obs, actions):
        params = asdict(self)
        return np.array([sparc_chunk(a, **params) for a in np.asarray(actions, dtype=np.float64)])


class StacScorer(Scorer):
    """Stateful STAC: each step samples a fresh batch and compares it with the last one.

    The RNG is re-seeded on ``reset`` so a rollout's scores do not depend on
    what was scored before it.  With ``bandwidth=None`` the median heuristic
    runs once, on the first overlap pair seen, and the value is kept.
    """

    method = ScoreMethodId.STAC

    def __init__(self, sampler: PolicySampler, config: StacConfig | None = None):
        self.sampler = sampler
        self.config = config or StacConfig()
        self.sigma = self.config.bandwidth
        self.reset()

    def reset(self) -> None:
        self._prev: np.ndarray | None = None
        self._rng = np.random.default_rng(self.config.seed)

    def score_step(self, obs, action_chunk=None) -> float:
        cur = np.asarray(self.sampler(np.asarray(obs, dtype=np.float64), self.config.batch_size, self._rng), dtype=np.float64)
        prev, self._prev = self._prev, cur
        if prev is None:
            return 0.0
        a, b = overlap_segments(prev, cur, self.config.H_prime)
        if self.sigma is None:
            self.sigma = median_bandwidth(np.vstack([a, b]))
        return mmd2(a, b, self.sigma)

    def score_batch(self, obs, actions):
        # consecutive rows are treated as consecutive steps of one rollout
        self.reset()
        acts = [None] * len(obs) if actions is None else actions
        return np.array([self.score_step(o, a) for o, a in zip(obs, acts)])

    @property
    def cumulative(self) -> bool:
        return self.config.threshold_mode == "cumulative"


# -- training -----------------------------------------------------------------


def _pairs(rollouts) -> tuple[np.ndarray, np.ndarray]:
    obs = np.concatenate([r.observations for r in rollouts])
    acts = np.concatenate([r.actions for r in rollouts])
    return obs, acts


def train_scorer(method, rollouts, hyper: dict | None = None) -> Scorer:
    """Fit a trainable scorer on the (O_t, A_t) pairs of ``rollouts``."""
    method = ScoreMethodId(method)
    hyper = dict(hyper or {})
    if method not in TRAINABLE:
        raise ValueError(f"{method.value}: method requires no training")
    if not rollouts:
        raise ValueError("no training rollouts")
    obs, acts = _pairs(rollouts)
    if method in (ScoreMethodId.LOGPZO, ScoreMethodId.LOGPO):
        steps = hyper.pop("steps", None)
        flow = train_flow(obs, FlowConfig(**hyper))
        if method is ScoreMethodId.LOGPZO:
            return LogpzoScorer(flow, steps=int(steps or 1))
        return LogpoScorer(flow, Integrator(steps=int(steps or 32)))
    if method is ScoreMethodId.RND:
        return RndScorer(rnd_train(acts, obs, RndConfig(**hyper)))
    if method is ScoreMethodId.CFM:
        return CfmScorer(cfm_train(obs, CfmConfig(**hyper)))
    return PcaKmeansScorer(pca_kmeans_fit(obs, **hyper))


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode("utf-8")).hexdigest()[:16]


# -- persistence ----------------------------------------------------------------


def save_scorer(scorer: Scorer, path: str | Path, manifest: dict | None = None) -> dict:
    """Write a model container with a ``manifest`` section; returns the manifest."""
    method = scorer.method
    sections: dict = {}
    params: dict = {}
    if isinstance(scorer, LogpzoScorer):
        sections.update(flow_sections(scorer.flow))
        params = {"steps": scorer.steps}
    elif isinstance(scorer, LogpoScorer):
        sections.update(flow_sections(scorer.flow))
        params = {"integrator": asdict(scorer.integrator)}
    elif isinstance(scorer, RndScorer):
        m = scorer.model
        sections.update({"rnd.target": m.target, "rnd.predictor": m.predictor,
                         "rnd.norm_mean": m.normalizer.mean, "rnd.norm_std": m.normalizer.std})
    elif isinstance(scorer, CfmScorer):
        sections.update(flow_sections(scorer.model.flow))
        params = {"eval_grid": list(scorer.model.eval_grid), "ode_steps": scorer.model.ode_steps}
    elif isinstance(scorer, PcaKmeansScorer):
        m = scorer.model
        sections.update({"pca.mean": m.mean, "pca.components": m.components, "kmeans.centroids": m.centroids})
        params = {"inertia": m.inertia}
    else:
        raise ValueError(f"{method.value}: nothing to persist (parameter-free method)")
    man = {"method": method.value, "params": params, **(manifest or {})}
    save_container(path, {"manifest": man, **sections})
    return man


def load_scorer(path: str | Path) -> tuple[Scorer, dict]:
    sec = load_container(path)
    if "manifest" not in sec:
        raise ValueError(f"{path}: model container has no manifest")
    man = sec["manifest"]
    method = ScoreMethodId(man["method"])
    params = man.get("params", {})
    if method is ScoreMethodId.LOGPZO:
        return LogpzoScorer(flow_from_sections(sec), steps=int(params.get("steps", 1))), man
    if method is ScoreMethodId.LOGPO:
        return LogpoScorer(flow_from_sections(sec), Integrator(**params.get("integrator", {}))), man
    if method is ScoreMethodId.CFM:
        model = CfmModel(flow_from_sections(sec), tuple(params["eval_grid"]), int(params["ode_steps"]))
        return CfmScorer(model), man
    if method is ScoreMethodId.RND:
        norm = Normalizer(sec["rnd.norm_mean"], sec["rnd.norm_std"])
        return RndScorer(RndModel(sec["rnd.target"], sec["rnd.predictor"], norm)), man
    if method is ScoreMethodId.PCA_KMEANS:
        model = PcaKmeansModel(sec["pca.mean"], sec["pca.components"], sec["kmeans.centroids"], float(params.get("inertia", 0.0)))
        return PcaKmeansScorer(model), man
    raise ValueError(f"{path}: cannot load a model for {method.value}")


__all__ = [
    "Scorer", "LogpzoScorer", "LogpoScorer", "RndScorer", "CfmScorer", "PcaKmeansScorer",
    "SparcScorer", "StacScorer", "StacConfig", "train_scorer", "save_scorer", "load_scorer",
    "config_hash", "TRAINABLE",
]
