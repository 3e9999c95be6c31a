"""Runtime failure detection for stochastic policies.

Scalar anomaly scores (flow-matching densities, RND, CFM, SPARC, STAC,
PCA-kmeans) are thresholded by a one-sided, time-varying conformal band that
is calibrated on successful rollouts only.
"""

from .conformal import CPBand, build_band, load_band, save_band
from .core import (
    DatasetHeader,
    FailureMode,
    Label,
    Rollout,
    ScoreMethodId,
    ScoreSeries,
    Step,
    load_dataset,
    load_rollouts,
    save_rollouts,
)
from .detector import DetectionResult, Detector, detect_rollout, run_stream
from .evaluation import MetricsReport, alpha_sweep, confusion, emit_report, evaluate, metrics

__version__ = "0.1.0"
