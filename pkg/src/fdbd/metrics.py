"""Detection metrics, per-rank distance data, and scoring-latency benchmarks.

Scores follow the *higher means in-distribution* convention, so ID samples are
the positive class throughout.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import EmptyInput, UsageError
from .geometry import LinearHead, boundary_distance_matrix

logger = logging.getLogger(__name__)

TPR_LEVEL_PCT = 95


def _scores(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise EmptyInput(f"{name} scores are empty")
    return arr


def auroc(id_scores, ood_scores) -> float:
    """``P(id > ood) + 0.5 * P(id == ood)`` via the Mann-Whitney rank sum."""
    a = _scores(id_scores, "ID")
    b = _scores(ood_scores, "OOD")
    ranks = rankdata(np.concatenate([a, b]), method="average")
    n, m = a.size, b.size
    u = ranks[:n].sum() - n * (n + 1) / 2.0
    return float(u / (n * m))


def fpr95_threshold(id_scores) -> float:
    """Largest threshold keeping at least 95% of ID scores at or above it."""
    a = np.sort(_scores(id_scores, "ID"))[::-1]
    need = -(-TPR_LEVEL_PCT * a.size // 100)  # ceil(0.95 n) in integers
    return float(a[need - 1])


def fpr95(id_scores, ood_scores) -> float:
    """Fraction of OOD scores ``>= tau`` at the FPR95 threshold (ties count as FP)."""
    tau = fpr95_threshold(id_scores)
    b = _scores(ood_scores, "OOD")
    return float(np.count_nonzero(b >= tau) / b.size)


@dataclass(frozen=True)
class EvalResult:
    method: str
    auroc: float
    fpr95: float
    n_id: int
    n_ood: int

    def __post_init__(self) -> None:
        if not (0.0 <= self.auroc <= 1.0 and 0.0 <= self.fpr95 <= 1.0):
            raise ValueError(f"metrics out of range: {self}")


def evaluate(method: str, id_scores, ood_scores) -> EvalResult:
    a = _scores(id_scores, "ID")
    b = _scores(ood_scores, "OOD")
    return EvalResult(method, auroc(a, b), fpr95(a, b), a.size, b.size)


EVAL_FIELDS = ("method", "auroc", "fpr95", "n_id", "n_ood")


def eval_rows_to_csv(rows: Sequence[EvalResult], ood_sets: Sequence[str] | None = None) -> str:
    """CSV ``method,auroc,fpr95,n_id,n_ood``; an ``ood_set`` column is prepended if given."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((["ood_set"] if ood_sets is not None else []) + list(EVAL_FIELDS))
    for i, r in enumerate(rows):
        prefix = [ood_sets[i]] if ood_sets is not None else []
        w.writerow(prefix + [r.method, "%.9g" % r.auroc, "%.9g" % r.fpr95, r.n_id, r.n_ood])
    return buf.getvalue()


def rank_histograms(head: LinearHead, features: np.ndarray) -> np.ndarray:
    """``(N, |C|-1)`` matrix; column ``r`` is each sample's r-th nearest boundary distance."""
    _, D = boundary_distance_matrix(head, features)
    return np.sort(D, axis=1)


# --- latency ---------------------------------------------------------------


@dataclass
class LatencyReport:
    """Per-sample scoring latency along one sweep axis (times in microseconds)."""

    method: str
    axis: str
    values: list[int]
    median_us: list[float]
    p95_us: list[float]
    fixed: dict[str, int] = field(default_factory=dict)
    n_samples: int = 0
    r2: float = float("nan")
    slope_us: float = float("nan")
    intercept_us: float = float("nan")
    growth: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def linear_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line; returns ``(slope, intercept, r2)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def time_per_sample(fn: Callable[[np.ndarray], float], Z: np.ndarray, warmup: int = 50) -> np.ndarray:
    """Wall time of ``fn(z)`` per row in microseconds, first ``warmup`` calls discarded."""
    for z in Z[:warmup]:
        fn(z)
    out = np.empty(len(Z) - warmup)
    clock = time.perf_counter_ns
    for i, z in enumerate(Z[warmup:]):
        t0 = clock()
        fn(z)
        out[i] = (clock() - t0) / 1e3
    return out


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        return nullcontext()
    return threadpool_limits(limits=1)


BENCH_METHODS = ("fdbd", "msp", "energy", "knn", "mds", "avg_dist")


def make_scorer(method: str, n_classes: int, dim: int, n_train: int, rng: np.random.Generator, knn_k: int = 50):
    """Random head (and stats where needed) with a per-sample scoring closure."""
    from . import scoring

    W = rng.normal(size=(n_classes, dim)) / np.sqrt(dim)
    head = LinearHead(W, rng.normal(size=n_classes) * 0.1)
    if method == "fdbd":
        mu = rng.normal(size=dim) * 0.1
        return lambda z: scoring.fdbd_score(head, mu, z)
    if method == "avg_dist":
        return lambda z: scoring.avg_dist_score(head, z)
    if method == "msp":
        return lambda z: scoring.msp_score(head, z)
    if method == "energy":
        return lambda z: scoring.energy_score(head, z)
    if method in ("knn", "mds"):
        X = rng.normal(size=(n_train, dim))
        y = np.arange(n_train) % n_classes
        stats = scoring.fit_stats(X, y, n_classes=n_classes)
        if method == "knn":
            k = min(knn_k, n_train)
            return lambda z: scoring.knn_score(stats, z, k)
        return lambda z: scoring.mds_score(stats, z)
    raise UsageError(f"unknown bench method {method!r}; choose from {BENCH_METHODS}")


def bench_scaling(
    method: str,
    axis: str,
    values: Sequence[int],
    *,
    n_classes: int = 100,
    dim: int = 512,
    n_train: int = 1000,
    n_samples: int = 1000,
    warmup: int = 50,
    seed: int = 0,
    repeats: int = 3,
) -> LatencyReport:
    """Median per-sample scoring time along ``axis`` in {"C", "P", "N"}.

    At every point a fresh random head is drawn and ``n_samples`` random
    features are scored one at a time; the median over samples is taken for
    each of ``repeats`` passes (run round-robin over the points) and the
    smallest pass median is kept.
    """
    from ._rng import substream

    if axis not in ("C", "P", "N"):
        raise UsageError(f"sweep axis must be C, P or N, got {axis!r}")
    values = [int(v) for v in values]
    if len(values) < 2:
        raise UsageError(f"sweep over {axis} needs at least 2 points, got {values}")
    setups = []
    for v in values:
        dims = {"C": n_classes, "P": dim, "N": n_train}
        dims[axis] = v
        rng = substream(seed, "bench", method, axis, v)
        fn = make_scorer(method, dims["C"], dims["P"], dims["N"], rng)
        setups.append((fn, rng.normal(size=(n_samples + warmup, dims["P"]))))
    # Passes are interleaved across sweep points so that slow drift in the
    # environment affects every point alike instead of distorting one.
    passes: list[list[np.ndarray]] = [[] for _ in values]
    with _single_thread():
        for _ in range(repeats):
            for i, (fn, Z) in enumerate(setups):
                passes[i].append(time_per_sample(fn, Z, warmup))
    medians, p95s = [], []
    for runs in passes:
        best = min(runs, key=np.median)
        medians.append(float(np.median(best)))
        p95s.append(float(np.percentile(best, 95)))
    slope, intercept, r2 = linear_fit(values, medians)
    fixed = {"C": n_classes, "P": dim, "N": n_train}
    fixed.pop(axis)
    return LatencyReport(
        method=method,
        axis=axis,
        values=values,
        median_us=medians,
        p95_us=p95s,
        fixed=fixed,
        n_samples=n_samples,
        r2=r2,
        slope_us=slope,
        intercept_us=intercept,
        growth=medians[-1] / medians[0],
    )


def latency_ratio(
    method_a: str,
    method_b: str,
    *,
    n_classes: int = 10,
    dim: int = 512,
    n_samples: int = 1000,
    warmup: int = 50,
    seed: int = 0,
    repeats: int = 3,
) -> dict:
    """Ratio of median per-sample times ``a / b`` on identical inputs."""
    from ._rng import substream

    out = {}
    with _single_thread():
        Z = substream(seed, "bench", "ratio", "features").normal(size=(n_samples + warmup, dim))
        for m in (method_a, method_b):
            fn = make_scorer(m, n_classes, dim, 1000, substream(seed, "bench", "ratio", m))
            out[m] = min(float(np.median(time_per_sample(fn, Z, warmup))) for _ in range(repeats))
    return {
        "methods": [method_a, method_b],
        "n_classes": n_classes,
        "dim": dim,
        "median_us": out,
        "ratio": out[method_a] / out[method_b],
    }


def reports_to_json(reports: Sequence[LatencyReport], extra: dict | None = None) -> str:
    payload = {"reports": [r.to_dict() for r in reports]}
    if extra:
        payload.update(extra)
    return json.dumps(payload, indent=2, sort_keys=True)
