"""
A time-varying conformal band, by hand
======================================

Calibrate a one-sided band on score series from successful rollouts, then
watch it flag a series that drifts upward.
"""

import numpy as np

from failband.conformal import build_band
from failband.core import ScoreSeries
from failband.detector import detect_rollout

rng = np.random.default_rng(0)

# In-distribution scores: a slow random walk on top of positive noise.
def id_series(i, T=40):
    v = np.cumsum(rng.normal(size=T)) * 0.2 + rng.gamma(2.0, size=T)
    return ScoreSeries(f"ok{i}", "demo", np.arange(T) * 8, v)

cal = [id_series(i) for i in range(200)]

###############################################################################
# Both modulation variants: V1 scales the width by a constant, V2 by the
# per-step spread of the calibration scores.
for variant in ("V1", "V2"):
    band = build_band(cal, alpha=0.05, variant=variant, seed=0)
    print(variant, "h =", round(band.h, 3), "upper[:5] =", np.round(band.upper[:5], 2))

band = build_band(cal, alpha=0.05, variant="V2", seed=0)

###############################################################################
# False positives on fresh in-distribution series should sit near alpha.
fresh = [id_series(1000 + i) for i in range(300)]
fpr = np.mean([detect_rollout(band, s).flagged for s in fresh])
print(f"false-positive rate on 300 fresh series: {fpr:.3f}")

###############################################################################
# A failing series: scores start climbing halfway through.
T = 40
bad = id_series(9999).values + np.where(np.arange(T) > 20, 0.5 * (np.arange(T) - 20), 0.0)
res = detect_rollout(band, ScoreSeries("bad", "demo", np.arange(T) * 8, bad))
print("drifting series flagged:", res.flagged, "at t =", res.detection_time)
