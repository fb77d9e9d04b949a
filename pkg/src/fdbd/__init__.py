"""Out-of-distribution scoring by distances to a linear head's decision boundaries."""

from __future__ import annotations

__version__ = "0.1.0"

from .geometry import LinearHead, boundary_distances, exact_distance, nearest_boundary
from .metrics import auroc, evaluate, fpr95
from .scoring import ShapingConfig, TrainingStats, fdbd_score, fit_stats, score_batch

__all__ = [
    "LinearHead",
    "ShapingConfig",
    "TrainingStats",
    "auroc",
    "boundary_distances",
    "evaluate",
    "exact_distance",
    "fdbd_score",
    "fit_stats",
    "fpr95",
    "nearest_boundary",
    "score_batch",
]
