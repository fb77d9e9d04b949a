"""Synthetic Gaussian-mixture laboratory with simplex-ETF class means.

ID features are drawn from ``N(mu_i, sigma^2 I)`` with unit-norm class means
forming a simplex ETF, so the mixture is zero-centred. The Bayes head for
this mixture is ``W = mu``, ``b = 0``; its boundary distances are what the
sphere statistics below are computed with.

Sphere statistics are Monte-Carlo estimates over the radius-``r`` sphere.
The dense region is the union of balls of radius ``2 sigma`` around the class
means; on the sphere it is a union of spherical caps, which can be sampled
exactly (see :func:`sample_dense_region`) when uniform sampling puts too few
points there.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import betainc, betaincinv

from ._rng import substream
from .errors import BadDims, InsufficientRegionMass, PreconditionError
from .geometry import LinearHead, boundary_distance_matrix, nearest_boundary
from .metrics import EvalResult, evaluate
from .scoring import avg_dist_scores, fdbd_scores, topk_scores

MIN_REGION_POINTS = 100
MAX_RESAMPLE_ROUNDS = 10
PROP1_Z_THRESHOLD = 5.0
PROP2_Z_THRESHOLD = 3.0
SCALING_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class EtfMixture:
    n_classes: int
    dim: int
    mu: np.ndarray
    sigma: float
    seed: int

    @cached_property
    def head(self) -> LinearHead:
        return LinearHead(self.mu, np.zeros(self.n_classes))

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """``n`` ID features with uniformly drawn class labels."""
        labels = rng.integers(0, self.n_classes, size=n)
        Z = self.mu[labels] + self.sigma * rng.normal(size=(n, self.dim))
        return Z, labels


def build_etf(n_classes: int, dim: int, sigma: float = 0.3, seed: int = 0) -> EtfMixture:
    """Simplex ETF of ``n_classes`` unit vectors, randomly rotated into ``dim`` dims.

    The ``C x C`` centred frame ``sqrt(C/(C-1)) (I - 11^T/C)`` has rank
    ``C - 1``; its rows are expressed in an orthonormal basis of that
    subspace and then embedded with a random orthonormal ``dim x (C-1)``
    matrix (QR of a seeded Gaussian), so ``C = dim + 1`` is allowed.
    """
    C, P = int(n_classes), int(dim)
    if not 2 <= C <= P + 1:
        raise BadDims(f"a simplex ETF of {C} classes needs 2 <= C <= P + 1 (P={P})")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    M = math.sqrt(C / (C - 1)) * (np.eye(C) - np.ones((C, C)) / C)
    basis, _ = np.linalg.qr(M[:, : C - 1])  # spans the complement of the ones vector
    coords = M @ basis  # C x (C-1), same Gram matrix as M
    rng = substream(seed, "synthetic", "etf_rotation")
    Q, R = np.linalg.qr(rng.normal(size=(P, C - 1)))
    Q = Q * np.sign(np.diag(R))
    mu = coords @ Q.T
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    mu.setflags(write=False)
    return EtfMixture(C, P, mu, float(sigma), int(seed))


def nearest_boundary_dist(mix: EtfMixture, z: np.ndarray) -> float:
    """Distance from ``z`` to the closest decision boundary of the Bayes head."""
    return nearest_boundary(mix.head, z)[1]


def nearest_boundary_dists(mix: EtfMixture, Z: np.ndarray) -> np.ndarray:
    _, D = boundary_distance_matrix(mix.head, Z)
    return D.min(axis=1)


def dense_mask(mix: EtfMixture, Z: np.ndarray) -> np.ndarray:
    """Rows within ``2 sigma`` of some class mean."""
    sq = (Z * Z).sum(axis=1)[:, None] + 1.0 - 2.0 * Z @ mix.mu.T
    return sq.min(axis=1) <= (2.0 * mix.sigma) ** 2


def _uniform_sphere(rng: np.random.Generator, n: int, dim: int, r: float) -> np.ndarray:
    G = rng.normal(size=(n, dim))
    return r * G / np.linalg.norm(G, axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class SphereSample:
    r: float
    points: np.ndarray
    nearest_dists: np.ndarray
    in_dense_region: np.ndarray


def sample_sphere(mix: EtfMixture, r: float, M: int, seed: int) -> SphereSample:
    """``M`` uniform points on the radius-``r`` sphere with their statistics."""
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    if M < 1:
        raise ValueError(f"need at least one sample, got M={M}")
    pts = _uniform_sphere(substream(seed, "synthetic", "sphere", r, M), M, mix.dim, r)
    return SphereSample(r, pts, nearest_boundary_dists(mix, pts), dense_mask(mix, pts))


def _cap_min_cos(mix: EtfMixture, r: float) -> float:
    # ||z - mu_i|| <= 2 sigma with ||z|| = r, ||mu_i|| = 1  <=>  <z/r, mu_i> >= this
    return (r * r + 1.0 - 4.0 * mix.sigma**2) / (2.0 * r)


def region_volumes(mix: EtfMixture, r: float) -> dict[str, float]:
    """Surface fractions of the dense region and its complement on the sphere.

    Exact when the caps are disjoint (flagged by ``caps_disjoint``); otherwise
    ``dense_fraction`` is the sum of cap fractions, an upper bound.
    """
    cmin = _cap_min_cos(mix, r)
    if cmin >= 1.0:
        cap = 0.0
    elif cmin <= -1.0:
        cap = 1.0
    elif mix.dim == 1:
        cap = 0.5
    else:
        a = (mix.dim - 1) / 2.0
        cap = float(betainc(a, a, (1.0 - cmin) / 2.0))
    half_angle = 0.5 * math.acos(-1.0 / (mix.n_classes - 1))
    disjoint = cmin > math.cos(half_angle)
    dense = min(1.0, mix.n_classes * cap)
    return {
        "cap_fraction": cap,
        "dense_fraction": dense,
        "complement_fraction": 1.0 - dense if disjoint else float("nan"),
        "caps_disjoint": float(disjoint),
    }


def sample_dense_region(mix: EtfMixture, r: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Exact uniform samples from the dense region restricted to the radius-``r`` sphere.

    A class is chosen uniformly, the cosine to its mean is drawn from the
    sphere's polar-angle law truncated to the cap, and the orthogonal
    direction is uniform. Points covered by several caps are thinned by
    their cover count, which makes the result uniform on the union.
    """
    cmin = _cap_min_cos(mix, r)
    if cmin >= 1.0 or mix.dim < 2:
        return np.zeros((0, mix.dim))
    a = (mix.dim - 1) / 2.0
    ymax = min(1.0, (1.0 - cmin) / 2.0)
    qmax = betainc(a, a, ymax)
    if not qmax > 0:
        return np.zeros((0, mix.dim))
    out = []
    have = 0
    while have < n:
        m = n - have
        cls = rng.integers(0, mix.n_classes, size=m)
        y = betaincinv(a, a, rng.uniform(0.0, qmax, size=m))
        u = 1.0 - 2.0 * y
        centre = mix.mu[cls]
        G = rng.normal(size=(m, mix.dim))
        G -= (G * centre).sum(axis=1, keepdims=True) * centre
        G /= np.linalg.norm(G, axis=1, keepdims=True)
        pts = r * (u[:, None] * centre + np.sqrt(np.clip(1.0 - u * u, 0.0, None))[:, None] * G)
        cover = ((pts @ mix.mu.T) >= r * cmin).sum(axis=1)
        keep = rng.uniform(size=m) * np.maximum(cover, 1) < 1.0
        out.append(pts[keep])
        have += int(keep.sum())
    return np.concatenate(out)[:n]


def _zstat(a: np.ndarray, b: np.ndarray) -> float:
    """Normal-approximation statistic for ``mean(a) - mean(b)``."""
    se = math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    diff = float(a.mean() - b.mean())
    if se == 0.0:
        return math.copysign(math.inf, diff) if diff else 0.0
    return diff / se


@dataclass
class Prop1Report:
    r0: float
    r1: float
    M: int
    mean_r0: float
    mean_r1: float
    ratio: float
    max_scaling_error: float
    scaling_holds: bool
    unpaired_mean_r0: float
    unpaired_mean_r1: float
    z_stat: float
    passed: bool

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def verify_prop1(mix: EtfMixture, r0: float, r1: float, M: int, seed: int) -> Prop1Report:
    """Mean nearest-boundary distance grows with the radius of the sphere.

    Paired check: every sample ``z`` on the ``r0`` sphere and ``(r1/r0) z``
    must have distances in exact ratio ``r1/r0``. Unpaired check: independent
    samples on both spheres, passing when the mean at ``r1`` exceeds the mean
    at ``r0`` with z-statistic >= 5. ``r0 == r1`` is accepted and never passes.
    """
    if not 0 < r0 <= r1:
        raise PreconditionError(f"need 0 < r0 <= r1, got r0={r0}, r1={r1}")
    s = r1 / r0
    base = sample_sphere(mix, r0, M, seed)
    scaled = nearest_boundary_dists(mix, s * base.points)
    err = np.abs(scaled - s * base.nearest_dists)
    max_err = float((err / np.maximum(1.0, scaled)).max())
    scaling_ok = max_err <= SCALING_TOL

    u0 = nearest_boundary_dists(mix, _uniform_sphere(substream(seed, "synthetic", "prop1", "r0"), M, mix.dim, r0))
    u1 = nearest_boundary_dists(mix, _uniform_sphere(substream(seed, "synthetic", "prop1", "r1"), M, mix.dim, r1))
    z = _zstat(u1, u0)
    mean0, mean1 = float(base.nearest_dists.mean()), float(scaled.mean())
    passed = bool(r0 < r1 and scaling_ok and mean0 < mean1 and z >= PROP1_Z_THRESHOLD)
    return Prop1Report(
        r0=r0,
        r1=r1,
        M=M,
        mean_r0=mean0,
        mean_r1=mean1,
        ratio=mean1 / mean0,
        max_scaling_error=max_err,
        scaling_holds=scaling_ok,
        unpaired_mean_r0=float(u0.mean()),
        unpaired_mean_r1=float(u1.mean()),
        z_stat=z,
        passed=passed,
    )


@dataclass
class Prop2Report:
    r: float
    M: int
    mean_id_region: float
    mean_ood_region: float
    n_id_region: int
    n_ood_region: int
    z_stat: float
    stratified_rounds: int
    volumes: dict[str, float] = field(default_factory=dict)
    passed: bool = False

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def verify_prop2(mix: EtfMixture, r: float, M: int, seed: int) -> Prop2Report:
    """At equal radius, dense-region points sit further from the boundaries.

    A first batch of ``M`` uniform sphere points is split by region. A region
    left with fewer than 100 points is topped up by stratified rounds: exact
    cap sampling for the dense region, uniform rejection for its complement.

    Raises:
        PreconditionError: unless ``sigma < r < 5 sigma``.
        InsufficientRegionMass: a region still has < 100 points after 10 rounds.
    """
    lo, hi = mix.sigma, 5.0 * mix.sigma
    if not lo < r < hi:
        raise PreconditionError(
            f"radius r={r} violates sigma < r < 5*sigma, i.e. {lo:g} < r < {hi:g}"
        )
    base = sample_sphere(mix, r, M, seed)
    inside = [base.points[base.in_dense_region]]
    outside = [base.points[~base.in_dense_region]]
    rounds = 0
    rng = substream(seed, "synthetic", "prop2", "stratified", r)
    while rounds < MAX_RESAMPLE_ROUNDS:
        n_in = sum(len(x) for x in inside)
        n_out = sum(len(x) for x in outside)
        if n_in >= MIN_REGION_POINTS and n_out >= MIN_REGION_POINTS:
            break
        rounds += 1
        if n_in < MIN_REGION_POINTS:
            inside.append(sample_dense_region(mix, r, M, rng))
        if n_out < MIN_REGION_POINTS:
            extra = _uniform_sphere(rng, M, mix.dim, r)
            outside.append(extra[~dense_mask(mix, extra)])
    pin, pout = np.concatenate(inside), np.concatenate(outside)
    volumes = region_volumes(mix, r)
    if len(pin) < MIN_REGION_POINTS or len(pout) < MIN_REGION_POINTS:
        raise InsufficientRegionMass(
            f"after {rounds} resampling rounds: {len(pin)} dense / {len(pout)} outside points "
            f"(need {MIN_REGION_POINTS} each); region volumes {volumes}",
            volumes,
        )
    d_in = nearest_boundary_dists(mix, pin)
    d_out = nearest_boundary_dists(mix, pout)
    z = _zstat(d_in, d_out)
    return Prop2Report(
        r=r,
        M=M,
        mean_id_region=float(d_in.mean()),
        mean_ood_region=float(d_out.mean()),
        n_id_region=len(pin),
        n_ood_region=len(pout),
        z_stat=z,
        stratified_rounds=rounds,
        volumes=volumes,
        passed=bool(d_in.mean() > d_out.mean() and z >= PROP2_Z_THRESHOLD),
    )


# --- synthetic OOD experiment ------------------------------------------------

OOD_KINDS = ("radial_shift", "isotropic")


@dataclass(frozen=True)
class Bucket:
    lo: float
    hi: float
    population: int
    mean_dist: float
    var_dist: float
    is_id: bool


@dataclass(eq=False)
class SynthExperiment:
    ood_kind: str
    results: dict[str, EvalResult]
    buckets: list[Bucket]
    scores: dict[str, dict[str, np.ndarray]]
    mu_train: np.ndarray

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "ood_kind": self.ood_kind,
                "results": {k: asdict(v) for k, v in self.results.items()},
                "buckets": [asdict(b) for b in self.buckets],
            }
        )

    def buckets_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket_lo", "bucket_hi", "population", "mean_dist", "var_dist", "is_id"])
        for b in self.buckets:
            w.writerow(["%.9g" % b.lo, "%.9g" % b.hi, b.population, "%.9g" % b.mean_dist, "%.9g" % b.var_dist, int(b.is_id)])
        return buf.getvalue()

    def scores_csv(self) -> str:
        """Per-sample avg/regularized distances for histogramming."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["is_id", "deviation", "avg_dist", "fdbd"])
        for is_id, key in ((1, "id"), (0, "ood")):
            s = self.scores[key]
            for dev, avg, reg in zip(s["deviation"], s["avg_dist"], s["fdbd"]):
                w.writerow([is_id, "%.9g" % dev, "%.9g" % avg, "%.9g" % reg])
        return buf.getvalue()


def deviation_buckets(dev: np.ndarray, dist: np.ndarray, edges: np.ndarray, is_id: bool) -> list[Bucket]:
    idx = np.clip(np.searchsorted(edges, dev, side="right") - 1, 0, len(edges) - 2)
    out = []
    for j in range(len(edges) - 1):
        sel = dist[idx == j]
        if sel.size:
            var = float(sel.var(ddof=1)) if sel.size > 1 else 0.0
            out.append(Bucket(float(edges[j]), float(edges[j + 1]), int(sel.size), float(sel.mean()), var, is_id))
    return out


def synth_ood_experiment(
    mix: EtfMixture,
    M: int,
    ood_kind: str,
    seed: int,
    *,
    topk_ks: tuple[int, ...] = (),
    n_buckets: int = 10,
) -> SynthExperiment:
    """Score synthetic ID vs OOD features with fDBD, avgDist and optional top-k.

    ``radial_shift`` OOD features are fresh ID features scaled by 2;
    ``isotropic`` ones are ``N(0, (3 sigma)^2 I)``. ``mu_train`` is the mean of
    a separate draw of ``M`` ID training features.
    """
    if ood_kind not in OOD_KINDS:
        raise ValueError(f"ood_kind must be one of {OOD_KINDS}, got {ood_kind!r}")
    train, _ = mix.sample(M, substream(seed, "synthetic", "exp", "train"))
    mu_train = train.mean(axis=0)
    Z_id, _ = mix.sample(M, substream(seed, "synthetic", "exp", "id"))
    rng_ood = substream(seed, "synthetic", "exp", "ood", ood_kind)
    if ood_kind == "radial_shift":
        Z_ood = 2.0 * mix.sample(M, rng_ood)[0]
    else:
        Z_ood = 3.0 * mix.sigma * rng_ood.normal(size=(M, mix.dim))

    head = mix.head
    scores: dict[str, dict[str, np.ndarray]] = {}
    results: dict[str, EvalResult] = {}
    for key, Z in (("id", Z_id), ("ood", Z_ood)):
        scores[key] = {
            "fdbd": fdbd_scores(head, Z, mu_train)[0],
            "avg_dist": avg_dist_scores(head, Z)[0],
            "deviation": np.linalg.norm(Z - mu_train, axis=1),
        }
        for k in topk_ks:
            scores[key][f"topk@{k}"] = topk_scores(head, Z, mu_train, k)[0]
    for name in scores["id"]:
        if name != "deviation":
            results[name] = evaluate(name, scores["id"][name], scores["ood"][name])

    dev_all = np.concatenate([scores["id"]["deviation"], scores["ood"]["deviation"]])
    edges = np.linspace(dev_all.min(), dev_all.max(), n_buckets + 1)
    buckets = deviation_buckets(scores["id"]["deviation"], scores["id"]["avg_dist"], edges, True)
    buckets += deviation_buckets(scores["ood"]["deviation"], scores["ood"]["avg_dist"], edges, False)
    return SynthExperiment(ood_kind, results, buckets, scores, mu_train)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj
