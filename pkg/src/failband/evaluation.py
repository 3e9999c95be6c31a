"""Confusion counts, accuracy metrics, alpha sweeps and report files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .conformal import build_band, flat_band
from .core import Label, ScoreSeries
from .detector import DetectionResult, detect_rollout
from .scores.stac import stac_calibrate_threshold

REPORT_COLUMNS = ("method", "setting", "alpha", "tpr", "tnr", "balanced", "weighted", "mean_detection_time", "n_test")
DEFAULT_ALPHA_GRID = tuple(round(float(a), 12) for a in np.linspace(0.01, 0.1, 10))


@dataclass(frozen=True)
class Counts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    tpr: float | None
    tnr: float | None
    balanced_acc: float | None
    weighted_acc: float | None
    beta: float | None
    mean_detection_time: float | None
    n_undetected: int
    alpha_used: float | None = None
    method: str = ""
    setting: str = ""

    @property
    def n_test(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def row(self) -> dict:
        return {
            "method": self.method,
            "setting": self.setting,
            "alpha": self.alpha_used,
            "tpr": self.tpr,
            "tnr": self.tnr,
            "balanced": self.balanced_acc,
            "weighted": self.weighted_acc,
            "mean_detection_time": self.mean_detection_time,
            "n_test": self.n_test,
        }


def _label(labels: Mapping[str, Label], rid: str) -> Label:
    try:
        return Label(labels[rid])
    except KeyError:
        raise KeyError(f"no label for rollout {rid!r}") from None


def confusion(results: Sequence[DetectionResult], labels: Mapping[str, Label]) -> Counts:
    """Failure is the positive class; Unknown-labeled rollouts are skipped."""
    tp = fp = tn = fn = 0
    for r in results:
        lab = _label(labels, r.rollout_id)
        if lab is Label.FAILURE:
            tp += r.flagged
            fn += not r.flagged
        elif lab is Label.SUCCESS:
            fp += r.flagged
            tn += not r.flagged
    return Counts(tp, fp, tn, fn)


def _ratio(a: int, b: int) -> float | None:
    return a / b if b > 0 else None


def metrics(
    counts: Counts,
    detection_times: Sequence[int | None],
    alpha: float | None = None,
    method: str = "",
    setting: str = "",
) -> MetricsReport:
    """TPR, TNR, balanced and weighted accuracy; undefined values are None.

    ``detection_times`` holds one entry per test rollout (None when never
    flagged); the mean runs over flagged rollouts only.
    """
    tpr = _ratio(counts.tp, counts.tp + counts.fn)
    tnr = _ratio(counts.tn, counts.tn + counts.fp)
    beta = _ratio(counts.tn + counts.fp, counts.total)
    balanced = (tpr + tnr) / 2 if tpr is not None and tnr is not None else None
    weighted = None
    if beta is not None:
        # a term with zero weight may be undefined (e.g. no failures at all)
        parts = [(beta, tpr), (1.0 - beta, tnr)]
        if all(v is not None or w == 0 for w, v in parts):
            weighted = sum(w * v for w, v in parts if w != 0)
    hit = [t for t in detection_times if t is not None]
    mdt = float(np.mean(hit)) if hit else None
    return MetricsReport(
        counts.tp, counts.fp, counts.tn, counts.fn, tpr, tnr, balanced, weighted, beta, mdt,
        n_undetected=len(detection_times) - len(hit), alpha_used=alpha, method=method, setting=setting,
    )


def evaluate(
    results: Sequence[DetectionResult],
    labels: Mapping[str, Label],
    alpha: float | None = None,
    method: str = "",
    setting: str = "",
) -> MetricsReport:
    kept = [r for r in results if _label(labels, r.rollout_id) is not Label.UNKNOWN]
    return metrics(confusion(kept, labels), [r.detection_time for r in kept], alpha, method, setting)


def calibrate(
    cal_series: Sequence[ScoreSeries],
    alpha: float = 0.05,
    variant: str = "V2",
    split_ratio: float = 0.3,
    seed: int = 0,
    cumulative: bool = False,
    modulation_alpha: float | None = None,
):
    """Band for a method; ``cumulative`` selects STAC's running-sum threshold."""
    if cumulative:
        thr = stac_calibrate_threshold([s.values for s in cal_series], alpha)
        longest = max(cal_series, key=len)
        return flat_band(thr, longest.t, alpha=alpha, variant="cumulative")
    return build_band(
        cal_series, alpha=alpha, variant=variant, split_ratio=split_ratio, seed=seed, modulation_alpha=modulation_alpha
    )


def alpha_sweep(
    cal_series: Sequence[ScoreSeries],
    test_series: Sequence[ScoreSeries],
    labels: Mapping[str, Label],
    grid: Sequence[float] = DEFAULT_ALPHA_GRID,
    variant: str = "V2",
    split_ratio: float = 0.3,
    seed: int = 0,
    method: str = "",
    setting: str = "",
    cumulative: bool = False,
    modulation_alpha: float | None = 0.05,
) -> list[MetricsReport]:
    """Recalibrate on the same series for every alpha in ``grid`` and re-evaluate.

    The V2 modulation is held at ``modulation_alpha`` across the sweep so that
    only the width ``h`` moves with alpha; pass None to refit it per alpha.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty alpha grid")
    if any(not 0.0 < a < 1.0 for a in grid):
        raise ValueError("alpha values must lie in (0, 1)")
    reports = []
    for a in grid:
        band = calibrate(cal_series, a, variant, split_ratio, seed, cumulative, modulation_alpha)
        results = [detect_rollout(band, s) for s in test_series]
        reports.append(evaluate(results, labels, a, method, setting))
    return reports


# -- report files -----------------------------------------------------------------


def _sort_key(row: dict):
    return (row["method"], row["setting"], -1.0 if row["alpha"] is None else row["alpha"])


def emit_report(reports: Sequence[MetricsReport], fmt: str, path: str | Path) -> None:
    """Write rows sorted by method, then alpha.  Missing values: empty cell / null."""
    rows = sorted((r.row() for r in reports), key=_sort_key)
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for row in rows:
                w.writerow(["" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else row[c] for c in REPORT_COLUMNS])
    elif fmt in ("json", "structured-text"):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"columns": list(REPORT_COLUMNS), "rows": rows}, fh, indent=1)
            fh.write("\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report(path: str | Path) -> list[dict]:
    """Parse a report written by ``emit_report`` back to row dicts."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return json.loads(text)["rows"]
    rows = []
    for rec in csv.DictReader(text.splitlines()):
        row: dict = {"method": rec["method"], "setting": rec["setting"]}
        for c in REPORT_COLUMNS[2:]:
            v = rec[c]
            row[c] = None if v == "" else int(v) if c == "n_test" else float(v)
        rows.append(row)
    return rows
