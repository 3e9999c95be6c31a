import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from failband.conformal import build_band, flat_band
from failband.core import Rollout, ScoreMethodId, ScoreSeries, Step
from failband.detector import DetectionResult, Detector, detect_rollout, run_stream
from failband.scores import Scorer
from oracles import brute_detect


class FirstCoordScorer(Scorer):
    """Score = first observation coordinate, so tests control the series exactly."""

    method = ScoreMethodId.LOGPZO

    def score_batch(self, obs, actions):
        return np.asarray(obs, dtype=np.float64)[:, 0]


def rollout_from_values(rid, values, h_prime=8):
    steps = [Step(i * h_prime, np.array([v, 0.0]), np.zeros((4, 2))) for i, v in enumerate(values)]
    return Rollout(rid, steps)


def series(values, h_prime=8, rid="r"):
    return ScoreSeries(rid, "x", np.arange(len(values)) * h_prime, np.asarray(values, dtype=np.float64))


def test_equal_to_threshold_is_not_flagged():
    band = flat_band(1.0, np.arange(3) * 8)
    res = detect_rollout(band, series([1.0, 1.0, 1.0]))
    assert not res.flagged and res.detection_time is None
    res = detect_rollout(band, series([1.0, 1.0 + 1e-12, 0.0]))
    assert res.flagged and res.detection_time == 8


def test_first_of_several_crossings():
    band = flat_band(0.5, np.arange(12))
    vals = np.zeros(12)
    vals[[6, 9]] = 1.0
    res = detect_rollout(band, series(vals, h_prime=1))
    assert res.detection_time == 6
    assert [i for i, p in enumerate(res.per_step) if p] == [6, 9]


def test_horizon_clamp_uses_last_threshold():
    band = flat_band(1.0, [0, 8])
    band = type(band)(**{**band.__dict__, "upper": np.array([5.0, 1.0])})
    res = detect_rollout(band, series([2.0, 0.5, 0.9, 1.5]))
    assert res.per_step == (False, False, False, True)
    assert res.detection_time == 24


def test_cumulative_band_uses_running_sum():
    band = flat_band(2.5, np.arange(5) * 8, variant="cumulative")
    res = detect_rollout(band, series([1.0, 1.0, 1.0, 0.0, 0.0]))
    assert res.per_step == (False, False, True, True, True)
    assert res.detection_time == 16


def test_detector_streaming_latches():
    band = flat_band(1.0, np.arange(4) * 8)
    det = Detector(FirstCoordScorer(), band)
    det.reset("a")
    flags = [det.step(np.array([v, 0.0]), np.zeros((4, 2)))[1] for v in [0.0, 2.0, 0.0, 0.0]]
    assert flags == [False, True, False, False]
    res = det.result()
    assert res.flagged and res.detection_time == 8
    det.reset("b")
    assert not det.result().flagged and det.result().per_step == ()


def test_result_invariant_enforced():
    with pytest.raises(ValueError):
        DetectionResult("x", True, None, (True,))
    with pytest.raises(ValueError):
        DetectionResult("x", False, None, (True,))
    r = DetectionResult("x", True, 3, (False, True))
    assert DetectionResult.from_json(json.loads(json.dumps(r.to_json()))) == r


def test_run_stream_writes_records_and_times():
    band = flat_band(1.0, np.arange(3) * 8)
    rolls = [rollout_from_values("a", [0.0, 3.0, 0.0]), rollout_from_values("b", [0.0, 0.0])]
    ticks = iter(np.arange(100) * 0.5)
    buf = io.StringIO()
    out = run_stream(FirstCoordScorer(), band, rolls, sink=buf, clock=lambda: float(next(ticks)))
    recs = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["kind"] for r in recs] == ["step"] * 3 + ["result"] + ["step"] * 2 + ["result"]
    assert recs[3]["detection_time"] == 8
    assert np.allclose(out.latency_ms(), 500.0)
    assert [r.flagged for r in out.results] == [True, False]


@settings(max_examples=50, deadline=None)
@given(
    cal=st.lists(st.lists(st.floats(0, 5), min_size=6, max_size=6), min_size=8, max_size=20),
    test=st.lists(st.lists(st.floats(0, 8), min_size=1, max_size=10), min_size=1, max_size=5),
)
def test_property_stream_equals_batch_equals_brute(cal, test):
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        band = build_band([np.array(c) for c in cal], alpha=0.1, variant="V2")
    rolls = [rollout_from_values(f"r{i}", v) for i, v in enumerate(test)]
    out = run_stream(FirstCoordScorer(), band, rolls)
    for r, v, res in zip(rolls, test, out.results):
        batch = detect_rollout(band, series(v, rid=r.id))
        per, first = brute_detect(v, band.upper.tolist(), r.t_grid.tolist())
        assert res == batch
        assert list(batch.per_step) == per
        assert batch.detection_time == first
        # latching: once flagged, detection time never moves to a later crossing
        if first is not None:
            assert batch.detection_time <= max(t for t, p in zip(r.t_grid, per) if p)
