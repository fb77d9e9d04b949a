"""OOD scores on penultimate features: fDBD, its ablations, and baselines.

Every score follows the convention *lower means more OOD*. Per-sample
functions take a single feature vector; the ``*_scores`` variants operate on
an ``(N, P)`` matrix and are what :func:`score_batch` uses.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadK,
    DegenerateCovariance,
    DimensionMismatch,
    MissingClass,
    MissingStats,
    NonPositiveS2,
    ValidationError,
    ZeroDeviation,
)
from .geometry import (
    LinearHead,
    boundary_distance_matrix,
    check_feature,
    check_features,
    distances_from_logits,
)
from .tensorio import read_array, write_array

logger = logging.getLogger(__name__)

METHODS = ("fdbd", "avg_dist", "topk", "msp", "energy", "mds", "knn")
NEEDS_STATS = frozenset({"fdbd", "topk", "mds", "knn"})
SHAPING_MODES = ("none", "react", "ash_s", "scale")
# Default percentiles per shaping mode.
DEFAULT_PERCENTILE = {"react": 80.0, "ash_s": 90.0, "scale": 90.0, "none": 90.0}
COV_INV_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class TrainingStats:
    """Statistics of the training features needed by the feature-space scores."""

    mu_train: np.ndarray
    class_means: np.ndarray
    shared_cov: np.ndarray
    shared_cov_inv: np.ndarray
    normalized_bank: np.ndarray
    react_threshold: float
    react_percentile: float
    counts: np.ndarray
    ridge: float = 0.0

    @property
    def dim(self) -> int:
        return self.mu_train.shape[0]


def fit_stats(
    train: np.ndarray,
    labels: np.ndarray,
    react_percentile: float = DEFAULT_PERCENTILE["react"],
    n_classes: int | None = None,
) -> TrainingStats:
    """Fit training statistics.

    The shared covariance is pooled over classes and ridge-regularized with
    ``lambda = 1e-6 * trace / P`` (absolute ``1e-6`` if the trace is zero).
    The ReAct threshold is the ``react_percentile``-th percentile, with linear
    interpolation, of all training activation values.

    Raises:
        MissingClass: some class in ``range(n_classes)`` has no samples.
        DegenerateCovariance: ``||S @ S^-1 - I||_inf`` exceeds 1e-6.
    """
    X = np.asarray(train, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if X.ndim != 2:
        raise DimensionMismatch(f"train features must be 2-D, got shape {X.shape}")
    if y.shape[0] != X.shape[0]:
        raise DimensionMismatch(f"{y.shape[0]} labels for {X.shape[0]} training features")
    if not np.isfinite(X).all():
        raise ValidationError("training features contain non-finite values")
    if not 0 < react_percentile < 100:
        raise ValueError(f"react_percentile must lie in (0, 100), got {react_percentile}")
    if y.size and y.min() < 0:
        raise ValidationError("labels must be non-negative")
    n_cls = int(n_classes if n_classes is not None else (y.max() + 1 if y.size else 0))
    counts = np.bincount(y, minlength=n_cls)[:n_cls] if y.size else np.zeros(n_cls, dtype=np.int64)
    if n_cls == 0 or (counts == 0).any():
        absent = np.flatnonzero(counts == 0).tolist() or "all"
        raise MissingClass(f"no training samples for class(es) {absent}")
    if y.max() >= n_cls:
        raise ValidationError(f"label {int(y.max())} out of range for {n_cls} classes")

    n, p = X.shape
    class_means = np.zeros((n_cls, p))
    np.add.at(class_means, y, X)
    class_means /= counts[:, None]
    mu_train = X.mean(axis=0)

    centered = X - class_means[y]
    cov = centered.T @ centered / n
    cov = 0.5 * (cov + cov.T)
    trace = float(np.trace(cov))
    ridge = 1e-6 * trace / p if trace > 0 else 1e-6
    cov += ridge * np.eye(p)
    cov_inv = np.linalg.inv(cov)
    cov_inv = 0.5 * (cov_inv + cov_inv.T)
    resid = float(np.max(np.abs(cov @ cov_inv - np.eye(p))))
    if not np.isfinite(resid) or resid > COV_INV_TOL:
        raise DegenerateCovariance(f"covariance inversion residual {resid:.3e} exceeds {COV_INV_TOL}")

    norms = np.linalg.norm(X, axis=1)
    keep = norms > 0
    if not keep.all():
        logger.warning("dropping %d zero-norm training rows from the KNN bank", int((~keep).sum()))
    bank = X[keep] / norms[keep, None]

    thr = float(np.percentile(X, react_percentile)) if X.size else 0.0

    arrays = (mu_train, class_means, cov, cov_inv, bank, counts)
    for arr in arrays:
        arr.setflags(write=False)
    return TrainingStats(
        mu_train=mu_train,
        class_means=class_means,
        shared_cov=cov,
        shared_cov_inv=cov_inv,
        normalized_bank=bank,
        react_threshold=thr,
        react_percentile=float(react_percentile),
        counts=counts,
        ridge=ridge,
    )


# --- activation shaping ----------------------------------------------------


@dataclass(frozen=True)
class ShapingConfig:
    mode: str = "none"
    percentile: float = 90.0

    def __post_init__(self) -> None:
        if self.mode not in SHAPING_MODES:
            raise ValueError(f"shaping mode must be one of {SHAPING_MODES}, got {self.mode!r}")
        if not 0 < self.percentile < 100:
            raise ValueError(f"shaping percentile must lie in (0, 100), got {self.percentile}")

    @classmethod
    def parse(cls, spec: str | None) -> ShapingConfig:
        """Parse ``"mode"`` or ``"mode:percentile"`` (e.g. ``"ash_s:90"``)."""
        if not spec:
            return cls()
        mode, _, pct = spec.partition(":")
        mode = mode.strip()
        if mode not in SHAPING_MODES:
            raise ValueError(f"shaping mode must be one of {SHAPING_MODES}, got {mode!r}")
        return cls(mode, float(pct) if pct else DEFAULT_PERCENTILE[mode])

    def __str__(self) -> str:
        return "none" if self.mode == "none" else f"{self.mode}:{self.percentile:g}"


def _topk_count(percentile: float, dim: int) -> int:
    # guard against (100 - p) * P / 100 landing a hair above an integer
    return max(1, min(dim, math.ceil((100.0 - percentile) * dim / 100.0 - 1e-9)))


def _check_react(cfg: ShapingConfig, stats: TrainingStats | None) -> float:
    if stats is None:
        raise MissingStats("react shaping needs fitted training statistics")
    if not math.isclose(stats.react_percentile, cfg.percentile):
        raise MissingStats(
            f"stats were fitted with react percentile {stats.react_percentile:g}, "
            f"shaping requests {cfg.percentile:g}; refit with the matching percentile"
        )
    return stats.react_threshold


def shape(z: np.ndarray, cfg: ShapingConfig, stats: TrainingStats | None = None) -> np.ndarray:
    """Apply ReAct / ASH-S / Scale to one feature vector.

    Raises:
        NonPositiveS2: for ``ash_s``/``scale`` when the kept top-k sum is <= 0.
            Batch callers keep such samples unchanged and flag them.
    """
    z = np.asarray(z, dtype=np.float64)
    if cfg.mode == "none":
        return z.copy()
    if cfg.mode == "react":
        return np.minimum(z, _check_react(cfg, stats))
    k = _topk_count(cfg.percentile, z.shape[0])
    keep = np.argsort(-z, kind="stable")[:k]
    s1 = z.sum()
    s2 = z[keep].sum()
    if not s2 > 0:
        raise NonPositiveS2(f"top-{k} activation sum {s2!r} is not positive")
    factor = np.exp(s1 / s2)
    if cfg.mode == "scale":
        return z * factor
    out = np.zeros_like(z)
    out[keep] = z[keep] * factor
    return out


def shape_batch(
    Z: np.ndarray, cfg: ShapingConfig, stats: TrainingStats | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`shape`. Returns ``(shaped, flagged)``; flagged rows are unchanged."""
    Z = np.asarray(Z, dtype=np.float64)
    flagged = np.zeros(len(Z), dtype=bool)
    if cfg.mode == "none":
        return Z.copy(), flagged
    if cfg.mode == "react":
        return np.minimum(Z, _check_react(cfg, stats)), flagged
    if Z.size == 0:
        return Z.copy(), flagged
    k = _topk_count(cfg.percentile, Z.shape[1])
    keep = np.argsort(-Z, axis=1, kind="stable")[:, :k]
    kept = np.take_along_axis(Z, keep, axis=1)
    s1 = Z.sum(axis=1)
    s2 = kept.sum(axis=1)
    flagged = ~(s2 > 0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        factor = np.where(flagged, 1.0, np.exp(s1 / np.where(flagged, 1.0, s2)))
    if cfg.mode == "scale":
        out = Z * factor[:, None]
    else:
        out = np.zeros_like(Z)
        np.put_along_axis(out, keep, kept * factor[:, None], axis=1)
        out[flagged] = Z[flagged]
    return out, flagged


# --- per-sample scores -------------------------------------------------------


def _mu(stats: TrainingStats | np.ndarray) -> np.ndarray:
    return stats.mu_train if isinstance(stats, TrainingStats) else np.asarray(stats, dtype=np.float64)


def _deviation(z: np.ndarray, mu: np.ndarray) -> float:
    diff = z - mu
    dev = math.sqrt(float(diff @ diff))
    if dev == 0.0:
        raise ZeroDeviation("feature equals the training mean; regularized score undefined")
    return dev


def fdbd_score(head: LinearHead, stats: TrainingStats | np.ndarray, z: np.ndarray) -> float:
    """Mean closed-form boundary distance divided by ``||z - mu_train||``.

    ``stats`` may be fitted :class:`TrainingStats` or just the mean vector.
    """
    z = check_feature(head, z)
    _, d = distances_from_logits(head, head.W @ z + head.b)
    return float(d.sum() / d.shape[0] / _deviation(z, _mu(stats)))


def avg_dist_score(head: LinearHead, z: np.ndarray) -> float:
    """Un-regularized mean boundary distance."""
    z = check_feature(head, z)
    _, d = distances_from_logits(head, head.W @ z + head.b)
    return float(d.sum() / d.shape[0])


def _check_topk(k: int, n_classes: int) -> None:
    if not 1 <= k <= n_classes - 1:
        raise BadK(f"top-k needs 1 <= k <= {n_classes - 1}, got {k}")


def _smallest_k_sum(D: np.ndarray, k: int) -> np.ndarray:
    # Sum of the k smallest entries per row, added in class order so that
    # k == D.shape[1] matches D.sum(axis=1) bit for bit.
    if k == D.shape[-1]:
        return D.sum(axis=-1)
    idx = np.argpartition(D, k - 1, axis=-1)[..., :k]
    mask = np.zeros(D.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=-1)
    return np.where(mask, D, 0.0).sum(axis=-1)


def topk_score(head: LinearHead, stats: TrainingStats | np.ndarray, z: np.ndarray, k: int) -> float:
    """Mean of the ``k`` smallest boundary distances over ``||z - mu_train||``."""
    _check_topk(k, head.n_classes)
    z = check_feature(head, z)
    _, d = distances_from_logits(head, head.W @ z + head.b)
    return float(_smallest_k_sum(d, k) / k / _deviation(z, _mu(stats)))


def msp_score(head: LinearHead, z: np.ndarray) -> float:
    """Maximum softmax probability."""
    z = check_feature(head, z)
    l = head.W @ z + head.b
    return float(1.0 / np.exp(l - l.max()).sum())


def energy_score(head: LinearHead, z: np.ndarray) -> float:
    """``logsumexp`` of the logits (higher means in-distribution)."""
    z = check_feature(head, z)
    l = head.W @ z + head.b
    m = l.max()
    return float(m + math.log(np.exp(l - m).sum()))


def mds_score(stats: TrainingStats, z: np.ndarray) -> float:
    """Negative minimum Mahalanobis distance to the class means (shared covariance)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (stats.dim,):
        raise DimensionMismatch(f"feature shape {z.shape} does not match stats dim {stats.dim}")
    diff = z - stats.class_means
    q = np.einsum("cp,pq,cq->c", diff, stats.shared_cov_inv, diff)
    return float(-q.min())


def _check_knn_k(k: int, n_bank: int) -> None:
    if not 1 <= k <= n_bank:
        raise BadK(f"knn needs 1 <= k <= {n_bank} (bank size), got {k}")


def knn_score(stats: TrainingStats, z: np.ndarray, k: int = 50) -> float:
    """Negative k-th smallest distance between ``z/||z||`` and the normalized bank."""
    bank = stats.normalized_bank
    _check_knn_k(k, len(bank))
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (stats.dim,):
        raise DimensionMismatch(f"feature shape {z.shape} does not match stats dim {stats.dim}")
    nz = math.sqrt(float(z @ z))
    if nz == 0.0:
        raise ZeroDeviation("zero feature vector cannot be normalized")
    sq = np.maximum(2.0 - 2.0 * (bank @ (z / nz)), 0.0)
    return float(-math.sqrt(np.partition(sq, k - 1)[k - 1]))


# --- batched scores ----------------------------------------------------------
# Each returns (scores, flagged); flagged entries hold NaN.


def _deviations(Z: np.ndarray, mu: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", Z - mu, Z - mu))


def _regularized(sums: np.ndarray, count: int, dev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flagged = dev == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = sums / count / dev
    out[flagged] = np.nan
    return out, flagged


def fdbd_scores(head: LinearHead, Z: np.ndarray, mu_train: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _, D = boundary_distance_matrix(head, Z)
    return _regularized(D.sum(axis=1), D.shape[1], _deviations(np.asarray(Z, float), mu_train))


def avg_dist_scores(head: LinearHead, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _, D = boundary_distance_matrix(head, Z)
    return D.sum(axis=1) / D.shape[1], np.zeros(len(D), dtype=bool)


def topk_scores(
    head: LinearHead, Z: np.ndarray, mu_train: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    _check_topk(k, head.n_classes)
    _, D = boundary_distance_matrix(head, Z)
    return _regularized(_smallest_k_sum(D, k), k, _deviations(np.asarray(Z, float), mu_train))


def msp_scores(head: LinearHead, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Z = check_features(head, Z)
    L = Z @ head.W.T + head.b
    if not len(L):
        return np.zeros(0), np.zeros(0, dtype=bool)
    return 1.0 / np.exp(L - L.max(axis=1, keepdims=True)).sum(axis=1), np.zeros(len(L), dtype=bool)


def energy_scores(head: LinearHead, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Z = check_features(head, Z)
    L = Z @ head.W.T + head.b
    if not len(L):
        return np.zeros(0), np.zeros(0, dtype=bool)
    m = L.max(axis=1)
    return m + np.log(np.exp(L - m[:, None]).sum(axis=1)), np.zeros(len(L), dtype=bool)


def mds_scores(stats: TrainingStats, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Z = np.asarray(Z, dtype=np.float64)
    best = np.full(len(Z), -np.inf)
    for mu_c in stats.class_means:
        diff = Z - mu_c
        q = np.einsum("ip,pq,iq->i", diff, stats.shared_cov_inv, diff, optimize=True)
        np.maximum(best, -q, out=best)
    return best, np.zeros(len(Z), dtype=bool)


def knn_scores(
    stats: TrainingStats, Z: np.ndarray, k: int = 50, chunk: int = 1024
) -> tuple[np.ndarray, np.ndarray]:
    bank = stats.normalized_bank
    _check_knn_k(k, len(bank))
    Z = np.asarray(Z, dtype=np.float64)
    norms = np.linalg.norm(Z, axis=1)
    flagged = norms == 0
    out = np.full(len(Z), np.nan)
    for start in range(0, len(Z), chunk):
        sl = slice(start, start + chunk)
        ok = ~flagged[sl]
        U = Z[sl][ok] / norms[sl][ok, None]
        sq = np.maximum(2.0 - 2.0 * (U @ bank.T), 0.0)
        kth = np.partition(sq, k - 1, axis=1)[:, k - 1]
        block = out[sl]
        block[ok] = -np.sqrt(kth)
        out[sl] = block
    return out, flagged


# --- score tables ------------------------------------------------------------


@dataclass
class ScoreTable:
    """Named score columns of equal length (lower means more OOD).

    ``flagged`` maps a reason string to the sample indices that were forced to
    their column minimum; ``meta`` is free-form provenance written as CSV
    comment lines.
    """

    columns: dict[str, np.ndarray]
    flagged: dict[str, list[int]] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    @property
    def methods(self) -> list[str]:
        return list(self.columns)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key, val in self.meta.items():
            buf.write(f"# {key}={val}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_index", *self.columns])
        cols = list(self.columns.values())
        for i in range(len(self)):
            w.writerow([i, *("%.9g" % c[i] for c in cols)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> ScoreTable:
        meta: dict[str, str] = {}
        rows: list[list[str]] = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("#"):
                    key, _, val = line[1:].strip().partition("=")
                    meta[key.strip()] = val.strip()
                elif line.strip():
                    rows.append(next(csv.reader([line])))
        if not rows or rows[0][0] != "sample_index":
            raise ValidationError(f"{path}: missing 'sample_index' header")
        names = rows[0][1:]
        data = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(-1, len(names))
        return cls({n: data[:, j].copy() for j, n in enumerate(names)}, meta=meta)


def _force_flagged(col: np.ndarray, flagged: np.ndarray) -> np.ndarray:
    col = col.copy()
    if flagged.any():
        good = col[~flagged]
        col[flagged] = good.min() if good.size else 0.0
    return col


def score_batch(
    features: np.ndarray,
    head: LinearHead,
    stats: TrainingStats | None,
    methods: Sequence[str],
    shaping: ShapingConfig | None = None,
    *,
    knn_k: int = 50,
    topk: int | None = None,
) -> ScoreTable:
    """Score every row of ``features`` with each requested method.

    Shaping is applied to the features and, for the mean-regularized scores,
    to ``mu_train`` as well; head geometry is left unshaped. Samples whose
    score is undefined (zero deviation, zero norm, non-positive top-k sum) are
    set to the column minimum and listed in ``ScoreTable.flagged``.
    """
    shaping = shaping or ShapingConfig()
    methods = list(methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown method(s) {unknown}; choose from {METHODS}")
    if not methods:
        raise ValueError("no methods requested")
    needs = sorted(NEEDS_STATS.intersection(methods))
    if stats is None and needs:
        raise MissingStats(f"method(s) {', '.join(needs)} need fitted training statistics")
    if stats is None and shaping.mode == "react":
        raise MissingStats("react shaping needs fitted training statistics")

    Z = check_features(head, features)
    Zs, shape_flag = shape_batch(Z, shaping, stats)
    mu = None
    if stats is not None:
        mu = stats.mu_train
        if shaping.mode != "none":
            mu_s, mu_flag = shape_batch(mu[None, :], shaping, stats)
            if mu_flag[0]:
                logger.warning("shaping left mu_train unchanged (non-positive top-k sum)")
            mu = mu_s[0]
    k_top = topk if topk is not None else head.n_classes - 1

    columns: dict[str, np.ndarray] = {}
    flagged: dict[str, list[int]] = {}
    if shape_flag.any():
        flagged["non_positive_s2"] = np.flatnonzero(shape_flag).tolist()
    for m in methods:
        if m == "fdbd":
            col, bad = fdbd_scores(head, Zs, mu)
            reason = "zero_deviation"
        elif m == "avg_dist":
            col, bad = avg_dist_scores(head, Zs)
            reason = ""
        elif m == "topk":
            col, bad = topk_scores(head, Zs, mu, k_top)
            reason = "zero_deviation"
        elif m == "msp":
            col, bad = msp_scores(head, Zs)
            reason = ""
        elif m == "energy":
            col, bad = energy_scores(head, Zs)
            reason = ""
        elif m == "mds":
            col, bad = mds_scores(stats, Zs)
            reason = ""
        else:
            col, bad = knn_scores(stats, Zs, knn_k)
            reason = "zero_norm"
        if bad.any():
            flagged[f"{m}:{reason}"] = np.flatnonzero(bad).tolist()
        columns[m] = _force_flagged(col, bad | shape_flag)

    meta = {"methods": ",".join(methods), "shaping": str(shaping)}
    if "knn" in methods:
        meta["knn_k"] = str(knn_k)
    if "topk" in methods:
        meta["topk"] = str(k_top)
    return ScoreTable(columns, flagged, meta)


def required_stats(methods: Iterable[str], shaping: ShapingConfig) -> list[str]:
    """Which of ``methods`` (plus react shaping) need fitted statistics."""
    need = sorted(NEEDS_STATS.intersection(methods))
    if shaping.mode == "react":
        need.append("react")
    return need


# --- stats bundle ------------------------------------------------------------

_BUNDLE_ARRAYS = ("mu_train", "class_means", "shared_cov", "shared_cov_inv", "normalized_bank", "counts")


def save_stats(stats: TrainingStats, out_dir) -> Path:
    """Write ``stats`` as NPY arrays plus ``index.json``; deterministic bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in _BUNDLE_ARRAYS:
        fname = f"{name}.npy"
        write_array(out / fname, np.asarray(getattr(stats, name), dtype=np.float64))
        files[name] = fname
    index = {
        "format": "fdbd-stats",
        "version": 1,
        "arrays": files,
        "react_threshold": stats.react_threshold,
        "react_percentile": stats.react_percentile,
        "ridge": stats.ridge,
    }
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_stats(bundle_dir) -> TrainingStats:
    base = Path(bundle_dir)
    index = json.loads((base / "index.json").read_text(encoding="utf-8"))
    if index.get("format") != "fdbd-stats":
        raise ValidationError(f"{base}: not an fdbd stats bundle")
    arrs = {}
    for name in _BUNDLE_ARRAYS:
        a = read_array(base / index["arrays"][name]).as_float64()
        a.setflags(write=False)
        arrs[name] = a
    counts = arrs.pop("counts").astype(np.int64)
    counts.setflags(write=False)
    return TrainingStats(
        counts=counts,
        react_threshold=float(index["react_threshold"]),
        react_percentile=float(index["react_percentile"]),
        ridge=float(index["ridge"]),
        **arrs,
    )
