"""Linear-head geometry: predictions, closed-form boundary distances, exact oracle.

For a head ``logits = W z + b`` the distance from ``z`` to the decision
region of a non-predicted class ``c`` is lower bounded by the distance to the
single hyperplane where the logits of the predicted class and ``c`` tie::

    |(w_p - w_c)^T z + (b_p - b_c)| / ||w_p - w_c||

and the bound is attained for the nearest such hyperplane. The exact
distance is the Euclidean projection onto the polyhedron
``{z': (w_c - w_j)^T z' + (b_c - b_j) >= 0 for all j != c}``, computed here with
Dykstra's alternating projections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateHead, DimensionMismatch, NoConvergence, RegionEmpty, ValidationError

DYKSTRA_TOL = 1e-10
DYKSTRA_MAX_SWEEPS = 100_000
PHASE1_MAX_SWEEPS = 10_000


class LinearHead:
    """Immutable linear classification head with precomputed pair geometry.

    Attributes:
        W: ``(|C|, P)`` weight matrix.
        b: ``(|C|,)`` bias vector.
        pair_diff_norms: ``(|C|, |C|)`` matrix of ``||w_i - w_j||``, zero diagonal.
    """

    __slots__ = ("W", "b", "pair_diff_norms", "_others", "_norms_off")

    def __init__(self, W: np.ndarray, b: np.ndarray | None = None) -> None:
        W = np.array(W, dtype=np.float64, ndmin=2)
        if W.ndim != 2:
            raise DimensionMismatch(f"W must be 2-D, got shape {W.shape}")
        n_cls = W.shape[0]
        b = np.zeros(n_cls) if b is None else np.array(b, dtype=np.float64).reshape(-1)
        if b.shape != (n_cls,):
            raise DimensionMismatch(f"bias shape {b.shape} does not match W shape {W.shape}")
        if not (np.isfinite(W).all() and np.isfinite(b).all()):
            raise ValidationError("head parameters must be finite")

        # Row-by-row differences: exact up to rounding, O(|C|*P) memory.
        norms = np.empty((n_cls, n_cls))
        for i in range(n_cls):
            norms[i] = np.sqrt(np.einsum("ij,ij->i", W - W[i], W - W[i]))
        norms = 0.5 * (norms + norms.T)
        np.fill_diagonal(norms, 0.0)
        off = ~np.eye(n_cls, dtype=bool)
        if n_cls > 1 and not (norms[off] > 0).all():
            i, j = np.argwhere((norms == 0) & off)[0]
            raise DegenerateHead(f"classes {i} and {j} have identical weight rows")

        others = np.array([[c for c in range(n_cls) if c != p] for p in range(n_cls)], dtype=np.intp)
        others = others.reshape(n_cls, max(n_cls - 1, 0))
        norms_off = np.take_along_axis(norms, others, axis=1)

        for arr in (W, b, norms, others, norms_off):
            arr.setflags(write=False)
        self.W = W
        self.b = b
        self.pair_diff_norms = norms
        self._others = others
        self._norms_off = norms_off

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def others(self, p: int) -> np.ndarray:
        """Class indices other than ``p``, ascending."""
        return self._others[p]

    def __repr__(self) -> str:
        return f"LinearHead(n_classes={self.n_classes}, dim={self.dim})"


@dataclass(frozen=True)
class DistanceProfile:
    """Closed-form distances to every non-predicted class boundary.

    ``dists`` has one slot per class; the predicted class's slot is NaN.
    """

    predicted: int
    dists: np.ndarray

    def present(self) -> np.ndarray:
        """The ``|C| - 1`` defined distances in class order."""
        return np.delete(self.dists, self.predicted)


def check_feature(head: LinearHead, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (head.dim,):
        raise DimensionMismatch(f"feature shape {z.shape} does not match head dim {head.dim}")
    if not np.isfinite(z).all():
        raise ValidationError("feature vector contains non-finite values")
    return z


def check_features(head: LinearHead, Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != head.dim:
        raise DimensionMismatch(f"feature matrix shape {Z.shape} does not match head dim {head.dim}")
    if Z.size and not np.isfinite(Z).all():
        raise ValidationError("feature matrix contains non-finite values")
    return Z


def logits(head: LinearHead, z: np.ndarray) -> np.ndarray:
    return head.W @ z + head.b


def predict(head: LinearHead, z: np.ndarray) -> int:
    """Index of the largest logit; ties go to the lowest index."""
    z = check_feature(head, z)
    return int(np.argmax(head.W @ z + head.b))


def distances_from_logits(head: LinearHead, l: np.ndarray) -> tuple[int, np.ndarray]:
    # l: logits of one sample -> (predicted class, distances in class order)
    p = int(np.argmax(l))
    d = np.abs(l[p] - l[head._others[p]]) / head._norms_off[p]
    return p, d


def _require_two_classes(head: LinearHead) -> None:
    if head.n_classes < 2:
        raise DimensionMismatch("boundary distances need at least two classes")


def boundary_distances(head: LinearHead, z: np.ndarray) -> DistanceProfile:
    """Closed-form lower bound on the distance to each other class's region."""
    _require_two_classes(head)
    z = check_feature(head, z)
    p, d = distances_from_logits(head, head.W @ z + head.b)
    full = np.full(head.n_classes, np.nan)
    full[head._others[p]] = d
    return DistanceProfile(p, full)


def nearest_boundary(head: LinearHead, z: np.ndarray) -> tuple[int, float]:
    """``(c2, distance)`` for the nearest non-predicted boundary, ties to lowest index."""
    prof = boundary_distances(head, z)
    d = np.where(np.isnan(prof.dists), np.inf, prof.dists)
    c2 = int(np.argmin(d))
    return c2, float(d[c2])


def boundary_distance_matrix(head: LinearHead, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched profiles.

    Returns:
        ``(pred, D)`` where ``pred`` is ``(N,)`` and ``D`` is ``(N, |C|-1)``
        holding, per row, the distances to the other classes in ascending
        class order (the predicted class skipped).
    """
    _require_two_classes(head)
    Z = check_features(head, Z)
    L = Z @ head.W.T + head.b
    pred = np.argmax(L, axis=1) if len(L) else np.zeros(0, dtype=np.intp)
    idx = head._others[pred]
    lp = L[np.arange(len(L)), pred]
    D = np.abs(lp[:, None] - np.take_along_axis(L, idx, axis=1)) / head._norms_off[pred]
    return pred, D


# --- exact oracle ----------------------------------------------------------


def region_halfspaces(head: LinearHead, c: int) -> tuple[np.ndarray, np.ndarray]:
    """``(A, beta)`` with region closure ``{x : A x >= beta}`` for class ``c``."""
    others = head._others[c]
    A = head.W[c] - head.W[others]
    beta = head.b[others] - head.b[c]
    return A, beta


def dykstra_project(
    z: np.ndarray,
    A: np.ndarray,
    beta: np.ndarray,
    *,
    tol: float = DYKSTRA_TOL,
    max_sweeps: int = DYKSTRA_MAX_SWEEPS,
    stop=None,
) -> tuple[np.ndarray, int, float]:
    """Euclidean projection of ``z`` onto ``{x : A x >= beta}``.

    Cycles through the halfspaces applying Dykstra's correction terms. Stops
    once one full sweep moves the iterate by less than ``tol`` (inf-norm), or
    early when ``stop(x)`` returns True.

    Returns:
        ``(x, sweeps, last_step)``.
    """
    x = np.array(z, dtype=np.float64)
    m = A.shape[0]
    rows = [A[j] for j in range(m)]
    inv_sq = [1.0 / float(a @ a) for a in rows]
    betas = [float(v) for v in beta]
    incr = [np.zeros_like(x) for _ in range(m)]
    active = [False] * m
    step = np.inf
    for sweep in range(1, max_sweeps + 1):
        x_prev = x
        for j in range(m):
            a = rows[j]
            y = x + incr[j] if active[j] else x
            v = float(a @ y) - betas[j]
            if v < 0.0:
                x = y - (v * inv_sq[j]) * a
                incr[j] = y - x
                active[j] = True
            else:
                x = y
                if active[j]:
                    incr[j] = np.zeros_like(x)
                    active[j] = False
        step = float(np.max(np.abs(x - x_prev)))
        if stop is not None and stop(x):
            return x, sweep, step
        if step < tol:
            return x, sweep, step
    return x, max_sweeps, step


def region_has_interior(head: LinearHead, c: int, *, max_sweeps: int = PHASE1_MAX_SWEEPS) -> bool:
    """Phase-1 check that class ``c`` wins strictly somewhere.

    Works on the homogenized system ``{(x, s): A x - beta s >= 1, s >= 1}``,
    which is nonempty exactly when the region has an interior point (any
    feasible ``(x, s)`` certifies ``x / s``). Alternating projections are run
    from the origin and stop at the first certificate.
    """
    A, beta = region_halfspaces(head, c)
    if A.shape[0] == 0:
        return True
    H = np.hstack([A, -beta[:, None]])
    e_s = np.zeros(head.dim + 1)
    e_s[-1] = 1.0
    H = np.vstack([H, e_s])
    rhs = np.ones(H.shape[0])

    def certified(xs: np.ndarray) -> bool:
        s = xs[-1]
        return s > 0 and bool(np.all(A @ (xs[:-1] / s) - beta > 0))

    x0 = np.zeros(head.dim + 1)
    xs, _, _ = dykstra_project(x0, H, rhs, tol=0.0, max_sweeps=max_sweeps, stop=certified)
    return certified(xs)


def exact_distance(
    head: LinearHead,
    z: np.ndarray,
    c: int,
    *,
    tol: float = DYKSTRA_TOL,
    max_sweeps: int = DYKSTRA_MAX_SWEEPS,
) -> float:
    """Exact distance from ``z`` to the closure of class ``c``'s decision region.

    Raises:
        RegionEmpty: the region of ``c`` has no interior point.
        NoConvergence: ``max_sweeps`` reached with the last step above ``tol``.
        ValueError: ``c`` is the predicted class.
    """
    _require_two_classes(head)
    z = check_feature(head, z)
    if not 0 <= c < head.n_classes:
        raise ValueError(f"class index {c} out of range")
    if c == predict(head, z):
        raise ValueError(f"class {c} is the predicted class")
    if not region_has_interior(head, c):
        raise RegionEmpty(f"class {c} never attains the maximum logit")
    A, beta = region_halfspaces(head, c)
    if np.all(A @ z - beta >= 0):
        return 0.0
    if A.shape[0] == 1:
        v = float(A[0] @ z - beta[0])
        return abs(v) / float(np.linalg.norm(A[0]))
    x, sweeps, step = dykstra_project(z, A, beta, tol=tol, max_sweeps=max_sweeps)
    if step >= tol:
        raise NoConvergence(f"Dykstra did not converge in {sweeps} sweeps (last step {step:.3e})")
    return float(np.linalg.norm(z - x))


@dataclass
class BoundCheckReport:
    """Outcome of comparing closed-form and exact distances on random heads."""

    trials: int
    n_classes: int
    dim: int
    features_per_head: int
    n_pairs: int
    region_empty: int
    max_lower_bound_violation: float
    max_nearest_relative_gap: float
    lower_bound_tol: float
    tightness_tol: float

    @property
    def lower_bound_ok(self) -> bool:
        return self.max_lower_bound_violation <= self.lower_bound_tol

    @property
    def tightness_ok(self) -> bool:
        return self.max_nearest_relative_gap <= self.tightness_tol

    @property
    def passed(self) -> bool:
        return self.lower_bound_ok and self.tightness_ok

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out.update(lower_bound_ok=self.lower_bound_ok, tightness_ok=self.tightness_ok, passed=self.passed)
        return out


def verify_distance_bound(
    trials: int,
    n_classes: int,
    dim: int,
    seed: int = 0,
    *,
    features_per_head: int = 10,
    lower_bound_tol: float = 1e-8,
    tightness_tol: float = 1e-6,
) -> BoundCheckReport:
    """Check the lower bound and its tightness at the nearest class on random heads.

    Heads have standard normal weights and biases; features are ``N(0, 4 I)``.
    For each feature and each non-predicted class, the closed-form distance
    must not exceed the exact distance by more than ``lower_bound_tol``; at the
    nearest class the relative gap must stay within ``tightness_tol``.
    """
    from ._rng import substream

    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    worst_viol = -np.inf
    worst_gap = 0.0
    n_pairs = empty = 0
    for t in range(trials):
        rng = substream(seed, "oracle", t)
        head = LinearHead(rng.normal(size=(n_classes, dim)), rng.normal(size=n_classes))
        for z in 2.0 * rng.normal(size=(features_per_head, dim)):
            prof = boundary_distances(head, z)
            c2, _ = nearest_boundary(head, z)
            for c in head.others(prof.predicted):
                try:
                    exact = exact_distance(head, z, int(c))
                except RegionEmpty:
                    empty += 1
                    continue
                n_pairs += 1
                approx = float(prof.dists[c])
                worst_viol = max(worst_viol, approx - exact)
                if c == c2:
                    gap = abs(approx - exact) / exact if exact > 0 else abs(approx - exact)
                    worst_gap = max(worst_gap, gap)
    return BoundCheckReport(
        trials=trials,
        n_classes=n_classes,
        dim=dim,
        features_per_head=features_per_head,
        n_pairs=n_pairs,
        region_empty=empty,
        max_lower_bound_violation=float(worst_viol),
        max_nearest_relative_gap=float(worst_gap),
        lower_bound_tol=lower_bound_tol,
        tightness_tol=tightness_tol,
    )
