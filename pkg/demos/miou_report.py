"""
Scoring a segmentation
======================

IoU is read off one confusion matrix pooled over every evaluated pixel.
All seven classes count in the mean, including ones that never appear.
"""

import numpy as np

from lulc_adapt import ConfusionMatrix, EvalReport, render_report

rng = np.random.default_rng(0)
gt = rng.integers(1, 6, size=(8, 64, 64))

# a predictor that is right 70% of the time
pred = np.where(rng.random(gt.shape) < 0.7, gt, rng.integers(0, 7, size=gt.shape))

cm = ConfusionMatrix()
for p, g in zip(pred, gt):
    cm = cm.accumulate(p, g)

good = EvalReport.from_confusion(cm, name="70% right")
perfect = EvalReport.from_confusion(ConfusionMatrix().accumulate(gt, gt), name="perfect")

# Unknown (0) and Barren (6) never occur in gt, so even the perfect
# predictor tops out at 5/7.
print(render_report([good, perfect]))
print()
print(render_report([good], "csv"))
