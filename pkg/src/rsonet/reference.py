"""Published full-scale numbers, kept for side-by-side comparison only.

These come from training the full-size network (pretrained Swin backbone,
384 px inputs) on VT5000 and are not reachable with the desk-scale toy
configuration.  Metric order is (MAE, F_beta, S_alpha, E_xi).
"""

from __future__ import annotations

from .metrics import MetricReport

# (MAE, F_beta, S_alpha, E_xi) per test set
FULL_SCALE = {
    "VT5000": MetricReport(0.020, 0.910, 0.926, 0.963),
    "VT1000": MetricReport(0.014, 0.923, 0.946, 0.972),
    "VT821": MetricReport(0.021, 0.883, 0.921, 0.946),
}

# component ablations on VT5000, keyed by ablation tag
FULL_SCALE_ABLATION = {
    "wo-so-add": MetricReport(0.0217, 0.8883, 0.9213, 0.9523),
    "wo-so-mul": MetricReport(0.0208, 0.8948, 0.9231, 0.9587),
    "wo-so-cat": MetricReport(0.0215, 0.8896, 0.9224, 0.9558),
    "wo-so-gate": MetricReport(0.0203, 0.8951, 0.9239, 0.9605),
    "force-r2t": MetricReport(0.0215, 0.8898, 0.9230, 0.9561),
    "force-t2r": MetricReport(0.0216, 0.8896, 0.9233, 0.9554),
    "wo-dde": MetricReport(0.0203, 0.9082, 0.9213, 0.9631),
    "wo-mis": MetricReport(0.0203, 0.8997, 0.9241, 0.9593),
    "wo-dde-mis": MetricReport(0.0217, 0.9053, 0.8995, 0.9556),
    "full": MetricReport(0.0197, 0.9071, 0.9261, 0.9632),
}
