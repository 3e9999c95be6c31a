"""
End-to-end failure detection on the synthetic pick-and-place world
===================================================================

Train logpZO and RND on successes, calibrate a band, detect on a test set
with sensor-shift and slip failures, and report accuracy.
"""

import numpy as np

from failband.core import Label
from failband.detector import detect_rollout
from failband.evaluation import calibrate, evaluate
from failband.scores import SparcScorer, train_scorer
from failband.synth import FailureSpec, SynthConfig, generate_dataset

specs = (FailureSpec("SensorShift", 0.2), FailureSpec("Slip", 0.2))
_, train = generate_dataset(SynthConfig(n_rollouts=120, seed=0))
_, cal = generate_dataset(SynthConfig(n_rollouts=100, seed=0, start_index=10_000))
_, test = generate_dataset(SynthConfig(n_rollouts=150, seed=0, start_index=20_000, failure_spec=specs))
labels = {r.id: r.label for r in test}
print("test labels:", {lab.value: sum(r.label is lab for r in test) for lab in Label})

for method in ("logpzo", "rnd"):
    sc = train_scorer(method, train, {"epochs": 40, "seed": 0})
    band = calibrate([sc.score_rollout(r) for r in cal], alpha=0.05, variant="V2")
    rep = evaluate([detect_rollout(band, sc.score_rollout(r)) for r in test], labels, 0.05, method)
    print(f"{method:7s} TPR {rep.tpr:.2f}  TNR {rep.tnr:.2f}  balanced {rep.balanced_acc:.2f}  "
          f"mean detection t {rep.mean_detection_time:.1f}")

###############################################################################
# SPARC needs no training; it reacts to rough motion rather than novel inputs.
_, jit = generate_dataset(SynthConfig(n_rollouts=60, seed=1, failure_spec=(FailureSpec("Jitter", 0.5),)))
sp = SparcScorer()
score = {r.id: sp.score_rollout(r).values.max() for r in jit}
for lab in (Label.SUCCESS, Label.FAILURE):
    print(f"SPARC median, {lab.value}: {np.median([score[r.id] for r in jit if r.label is lab]):.3f}")
