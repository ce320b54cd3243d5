"""
Reading a classification report
===============================

Per-class precision, recall and F1 with macro and support-weighted averages.
The weighted recall always equals the accuracy.
"""

import numpy as np

from reschest import metrics as MT

names = ["COVID19", "Fibrosis", "Normal", "Pneumonia", "Tuberculosis"]

# a hard-to-see minority class: Fibrosis is mostly called Normal
rng = np.random.default_rng(0)
support = [128, 52, 397, 256, 104]
true = np.repeat(np.arange(5), support)
pred = true.copy()
fib = np.flatnonzero(true == 1)
pred[rng.choice(fib, 40, replace=False)] = 2
pred[rng.choice(np.flatnonzero(true == 2), 12, replace=False)] = 1

cm = MT.confusion_matrix(true, pred, 5, names)
report = MT.classification_report(cm)
print(MT.render_report(report))
print(MT.render_confusion_matrix(cm))
print("weighted recall", report.weighted_avg.recall, "accuracy", report.accuracy)

# aggregating reference per-class rows directly
macro, weighted = MT.aggregate(
    [0.94, 0.71, 0.90, 0.99, 0.97],
    [0.96, 0.22, 0.97, 0.99, 0.98],
    [0.95, 0.34, 0.93, 0.99, 0.97],
    [1276, 521, 3974, 2565, 1043],
)
print("macro", macro)
print("weighted", weighted)
