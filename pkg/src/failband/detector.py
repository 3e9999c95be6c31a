"""Runtime decision rule: flag a rollout once its score rises above the band."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, TextIO

import numpy as np

from .conformal import CPBand
from .core import Rollout, ScoreSeries
from .scores import Scorer


@dataclass(frozen=True)
class DetectionResult:
    rollout_id: str
    flagged: bool
    detection_time: int | None
    per_step: tuple[bool, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "per_step", tuple(bool(x) for x in self.per_step))
        if self.flagged != (self.detection_time is not None) or self.flagged != any(self.per_step):
            raise ValueError(f"{self.rollout_id}: flagged, detection_time and per_step disagree")

    def to_json(self) -> dict:
        return {
            "rollout_id": self.rollout_id,
            "flagged": self.flagged,
            "detection_time": self.detection_time,
            "per_step": list(self.per_step),
        }

    @classmethod
    def from_json(cls, d: dict) -> "DetectionResult":
        t = d.get("detection_time")
        return cls(str(d["rollout_id"]), bool(d["flagged"]), None if t is None else int(t), tuple(d["per_step"]))


def decision_values(band: CPBand, values: np.ndarray) -> np.ndarray:
    """Quantity compared with the band: raw scores, or running sums for a cumulative band."""
    values = np.asarray(values, dtype=np.float64)
    return np.cumsum(values) if band.variant == "cumulative" else values


def detect_rollout(band: CPBand, series: ScoreSeries) -> DetectionResult:
    """Per-step crossings ``value > upper_t`` and the first crossing time."""
    if len(series) == 0:
        raise ValueError("empty score series")
    vals = decision_values(band, series.values)
    cross = vals > band.thresholds(len(vals))
    hits = np.flatnonzero(cross)
    t_star = int(series.t[hits[0]]) if hits.size else None
    return DetectionResult(series.rollout_id, bool(hits.size), t_star, tuple(cross.tolist()))


class Detector:
    """Step-at-a-time detector for one rollout stream (not reentrant)."""

    def __init__(self, scorer: Scorer, band: CPBand):
        self.scorer = scorer
        self.band = band
        self.reset()

    def reset(self, rollout_id: str = "") -> None:
        self.scorer.reset()
        self.rollout_id = rollout_id
        self.cursor = 0
        self.raised = False
        self._running = 0.0
        self.t: list[int] = []
        self.scores: list[float] = []
        self.per_step: list[bool] = []
        self.detection_time: int | None = None

    def step(self, obs: np.ndarray, action_chunk: np.ndarray, t: int | None = None) -> tuple[float, bool]:
        score = self.scorer.score_step(obs, action_chunk)
        value = score
        if self.band.variant == "cumulative":
            self._running += score
            value = self._running
        flagged_now = bool(value > self.band.threshold(self.cursor))
        t = self.cursor * self._h_prime() if t is None else int(t)
        if flagged_now and not self.raised:
            self.raised = True
            self.detection_time = t
        self.t.append(t)
        self.scores.append(score)
        self.per_step.append(flagged_now)
        self.cursor += 1
        return score, flagged_now

    def _h_prime(self) -> int:
        g = self.band.t_grid
        return int(g[1] - g[0]) if len(g) > 1 else 1

    def result(self) -> DetectionResult:
        return DetectionResult(self.rollout_id, self.raised, self.detection_time, tuple(self.per_step))

    def series(self) -> ScoreSeries:
        return ScoreSeries(self.rollout_id, self.scorer.method.value, np.array(self.t), np.array(self.scores))


@dataclass
class StreamOutput:
    results: list[DetectionResult] = field(default_factory=list)
    series: list[ScoreSeries] = field(default_factory=list)
    # (rollout_id, t, seconds) per scored step
    latencies: list[tuple[str, int, float]] = field(default_factory=list)

    def latency_ms(self) -> np.ndarray:
        return np.array([x[2] for x in self.latencies]) * 1e3


def run_stream(
    scorer: Scorer,
    band: CPBand,
    source: Iterable[Rollout],
    sink: TextIO | Callable[[dict], None] | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> StreamOutput:
    """Replay rollouts one step at a time, timing each scoring call.

    ``sink`` receives one per-step record and one result record per rollout,
    either as JSON lines (file handle) or as dicts (callable).
    """
    out = StreamOutput()
    det = Detector(scorer, band)

    def emit(rec: dict) -> None:
        if sink is None:
            return
        if callable(sink):
            sink(rec)
        else:
            sink.write(json.dumps(rec) + "\n")

    for r in source:
        det.reset(r.id)
        for s in r.steps:
            t0 = clock()
            score, flag = det.step(s.obs, s.action_chunk, t=s.t)
            dt = clock() - t0
            out.latencies.append((r.id, s.t, dt))
            emit({"kind": "step", "rollout_id": r.id, "t": s.t, "score": score, "flagged": flag, "seconds": dt})
        res = det.result()
        out.results.append(res)
        out.series.append(det.series())
        emit({"kind": "result", **res.to_json()})
    return out
