"""Per-step scoring latency of a scorer on a fixed set of rollouts."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Rollout
from .scores import Scorer

BENCH_COLUMNS = ("method", "p50_ms", "p95_ms", "mean_ms")


@dataclass(frozen=True)
class BenchStats:
    method: str
    p50_ms: float
    p95_ms: float
    mean_ms: float
    n_calls: int


def bench_score(scorer: Scorer, rollouts: Sequence[Rollout], reps: int = 3, warmup: int = 1) -> BenchStats:
    """Time ``score_step`` on every step of every rollout, ``reps`` times over.

    Warmup passes run first and are discarded.  Scoring goes through the same
    call path as detection, so outputs are unaffected by the timing.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if not rollouts:
        raise ValueError("no rollouts to benchmark")
    times: list[float] = []
    for rep in range(warmup + reps):
        for r in rollouts:
            scorer.reset()
            for s in r.steps:
                t0 = time.perf_counter()
                scorer.score_step(s.obs, s.action_chunk)
                dt = time.perf_counter() - t0
                if rep >= warmup:
                    times.append(dt)
    ms = np.array(times) * 1e3
    return BenchStats(
        scorer.method.value,
        float(np.percentile(ms, 50)),
        float(np.percentile(ms, 95)),
        float(ms.mean()),
        len(ms),
    )


def emit_bench(stats: Sequence[BenchStats], path: str | Path, append: bool = True) -> None:
    """Write (or append to) a CSV with columns method, p50_ms, p95_ms, mean_ms."""
    path = Path(path)
    new = not append or not path.exists() or os.path.getsize(path) == 0
    with open(path, "w" if not append else "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(BENCH_COLUMNS)
        for s in stats:
            w.writerow([s.method, f"{s.p50_ms:.6f}", f"{s.p95_ms:.6f}", f"{s.mean_ms:.6f}"])
