from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.spatial.distance import mahalanobis
from scipy.special import logsumexp, softmax

from fdbd.errors import BadK, MissingClass, MissingStats, NonPositiveS2, ZeroDeviation
from fdbd.geometry import LinearHead
from fdbd.scoring import (
    ScoreTable,
    ShapingConfig,
    avg_dist_score,
    energy_score,
    fdbd_score,
    fit_stats,
    knn_score,
    load_stats,
    mds_score,
    msp_score,
    save_stats,
    score_batch,
    shape,
    shape_batch,
    topk_score,
)


def fitted(rng, C=4, P=6, N=200):
    X = rng.normal(size=(N, P))
    y = np.arange(N) % C
    return X, y, fit_stats(X, y, n_classes=C)


def test_fit_stats_means():
    s = fit_stats(np.array([[0.0, 0.0], [2.0, 2.0]]), np.array([0, 0]))
    np.testing.assert_array_equal(s.mu_train, [1.0, 1.0])
    np.testing.assert_array_equal(s.class_means, [[1.0, 1.0]])


def test_fit_stats_degenerate_covariance():
    X = np.ones((5, 3))
    s = fit_stats(X, np.zeros(5, dtype=int))
    assert np.isfinite(s.shared_cov_inv).all()
    assert s.ridge == 1e-6


def test_react_threshold_interpolates():
    s = fit_stats(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0, 0]), react_percentile=50)
    assert s.react_threshold == 2.5


def test_missing_class():
    with pytest.raises(MissingClass):
        fit_stats(np.zeros((3, 2)), np.array([0, 0, 2]), n_classes=3)


def test_shape_examples():
    s = fit_stats(np.array([[1.0, 0.0]]), np.array([0]), react_percentile=50)
    s_thr1 = type(s)(**{**s.__dict__, "react_threshold": 1.0})
    np.testing.assert_array_equal(
        shape(np.array([0.5, 2.0]), ShapingConfig("react", 50), s_thr1), [0.5, 1.0]
    )
    z = np.array([3.0, 1.0, 2.0, 0.0])
    e = math.exp(1.2)
    np.testing.assert_allclose(shape(z, ShapingConfig("ash_s", 50)), [3 * e, 0, 2 * e, 0], rtol=1e-15)
    np.testing.assert_allclose(shape(z, ShapingConfig("scale", 50)), z * e, rtol=1e-15)


def test_shape_batch_matches_pointwise(rng):
    Z = np.abs(rng.normal(size=(30, 17)))
    for mode in ("ash_s", "scale"):
        cfg = ShapingConfig(mode, 70)
        out, flagged = shape_batch(Z, cfg)
        assert not flagged.any()
        for i, z in enumerate(Z):
            np.testing.assert_allclose(out[i], shape(z, cfg), rtol=1e-14)


def test_ash_sparsity(rng):
    cfg = ShapingConfig("ash_s", 90)
    Z = np.abs(rng.normal(size=(1000, 64)))
    out, _ = shape_batch(Z, cfg)
    k = math.ceil(0.1 * 64)
    assert (np.count_nonzero(out, axis=1) <= k).all()


def test_non_positive_s2_flagged():
    z = np.array([-1.0, -2.0, -3.0, -4.0])
    with pytest.raises(NonPositiveS2):
        shape(z, ShapingConfig("ash_s", 50))
    out, flagged = shape_batch(np.vstack([z, -z]), ShapingConfig("ash_s", 50))
    assert flagged.tolist() == [True, False]
    np.testing.assert_array_equal(out[0], z)


def test_react_percentile_mismatch(rng):
    _, _, s = fitted(rng)
    with pytest.raises(MissingStats):
        shape(np.zeros(6), ShapingConfig("react", 90), s)


def test_shaping_parse():
    assert ShapingConfig.parse("ash_s:90") == ShapingConfig("ash_s", 90.0)
    assert str(ShapingConfig.parse("ash_s:90")) == "ash_s:90"
    assert ShapingConfig.parse("react").percentile == 80
    assert ShapingConfig.parse(None).mode == "none"
    with pytest.raises(ValueError):
        ShapingConfig.parse("relu")


def test_fdbd_examples(head2, head3):
    z3 = np.array([2.0, 1.0])
    # (1/sqrt(2) + 2) / 2 / sqrt(5), evaluated exactly
    expected = (1 / math.sqrt(2) + 2) / (2 * math.sqrt(5))
    assert fdbd_score(head3, np.zeros(2), z3) == pytest.approx(expected, rel=1e-15)
    assert expected == pytest.approx(0.6053275, abs=1e-7)
    assert fdbd_score(head2, np.zeros(2), np.array([3.0, 4.0])) == pytest.approx(0.6, abs=1e-15)
    assert avg_dist_score(head3, z3) == pytest.approx(1.35355339, abs=1e-8)
    assert avg_dist_score(head2, np.array([3.0, 4.0])) == 3.0
    with pytest.raises(ZeroDeviation):
        fdbd_score(head3, z3, z3)


def test_topk_examples(head3):
    z = np.array([2.0, 1.0])
    assert topk_score(head3, np.zeros(2), z, 1) == pytest.approx(0.31622777, abs=1e-8)
    assert topk_score(head3, np.zeros(2), z, 2) == fdbd_score(head3, np.zeros(2), z)
    for k in (0, 3):
        with pytest.raises(BadK):
            topk_score(head3, np.zeros(2), z, k)


def test_msp_energy_examples():
    eye = lambda l: LinearHead(np.eye(len(l)), np.array(l, dtype=float) - 0.0)  # noqa: E731
    z0 = lambda n: np.zeros(n)  # noqa: E731
    assert msp_score(LinearHead(np.eye(10)), z0(10)) == pytest.approx(0.1)
    assert msp_score(eye([1000.0, 0.0]), z0(2)) == 1.0
    assert msp_score(eye([math.log(2), 0.0]), z0(2)) == pytest.approx(2 / 3, rel=1e-15)
    assert energy_score(eye([0.0, 0.0]), z0(2)) == pytest.approx(0.69314718, abs=1e-8)
    assert energy_score(LinearHead([[1.0]], [5.0]), z0(1)) == 5.0
    assert math.isfinite(energy_score(eye([1000.0, 0.0]), z0(2)))


def test_msp_energy_vs_scipy(rng):
    h = LinearHead(rng.normal(size=(7, 5)) * 3, rng.normal(size=7))
    for z in rng.normal(size=(20, 5)):
        l = h.W @ z + h.b
        assert msp_score(h, z) == pytest.approx(softmax(l).max(), rel=1e-13)
        assert energy_score(h, z) == pytest.approx(logsumexp(l), rel=1e-13)


def test_mds_examples():
    s = fit_stats(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]), np.zeros(4, int))
    # pooled covariance is I/2 (plus ridge)
    assert mds_score(s, np.array([3.0, 4.0])) == pytest.approx(-50.0, rel=1e-5)
    assert mds_score(s, np.zeros(2)) == 0.0


def test_mds_vs_scipy(rng):
    _, _, s = fitted(rng)
    for z in rng.normal(size=(10, 6)):
        ref = min(mahalanobis(z, m, s.shared_cov_inv) ** 2 for m in s.class_means)
        assert mds_score(s, z) == pytest.approx(-ref, rel=1e-12)


def test_knn_examples():
    s = fit_stats(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]))
    assert knn_score(s, np.array([2.0, 0.0]), 1) == 0.0
    assert knn_score(s, np.array([2.0, 0.0]), 2) == pytest.approx(-math.sqrt(2), rel=1e-15)
    with pytest.raises(BadK):
        knn_score(s, np.array([2.0, 0.0]), 3)


def test_knn_vs_direct(rng):
    X, _, s = fitted(rng)
    bank = X / np.linalg.norm(X, axis=1, keepdims=True)
    for z in rng.normal(size=(10, 6)):
        d = np.sort(np.linalg.norm(bank - z / np.linalg.norm(z), axis=1))
        assert knn_score(s, z, 7) == pytest.approx(-d[6], abs=1e-7)


ALL = ["fdbd", "avg_dist", "topk", "msp", "energy", "mds", "knn"]


def test_score_batch_matches_pointwise(rng):
    X, _, s = fitted(rng)
    h = LinearHead(rng.normal(size=(4, 6)), rng.normal(size=4))
    Z = rng.normal(size=(25, 6))
    t = score_batch(Z, h, s, ALL, knn_k=5)
    mu = s.mu_train
    pointwise = {
        "fdbd": lambda z: fdbd_score(h, s, z),
        "avg_dist": lambda z: avg_dist_score(h, z),
        "topk": lambda z: topk_score(h, mu, z, 3),
        "msp": lambda z: msp_score(h, z),
        "energy": lambda z: energy_score(h, z),
        "mds": lambda z: mds_score(s, z),
        "knn": lambda z: knn_score(s, z, 5),
    }
    for m, fn in pointwise.items():
        np.testing.assert_allclose(t.columns[m], [fn(z) for z in Z], rtol=1e-10, atol=1e-12)
    np.testing.assert_array_equal(t.columns["topk"], t.columns["fdbd"])
    assert t.flagged == {}


def test_score_batch_shaped_mu(rng):
    X, _, s = fitted(rng)
    h = LinearHead(rng.normal(size=(4, 6)))
    Z = np.abs(rng.normal(size=(5, 6)))
    cfg = ShapingConfig("scale", 50)
    t = score_batch(Z, h, s, ["fdbd"], cfg)
    mu_s = shape(s.mu_train, cfg)
    np.testing.assert_allclose(t.columns["fdbd"], [fdbd_score(h, mu_s, shape(z, cfg)) for z in Z])
    assert t.meta["shaping"] == "scale:50"


def test_score_batch_flags_zero_deviation(rng):
    _, _, s = fitted(rng)
    h = LinearHead(rng.normal(size=(4, 6)))
    Z = np.vstack([rng.normal(size=(3, 6)), s.mu_train])
    t = score_batch(Z, h, s, ["fdbd"])
    assert t.flagged == {"fdbd:zero_deviation": [3]}
    assert t.columns["fdbd"][3] == t.columns["fdbd"][:3].min()


def test_score_batch_empty(rng):
    _, _, s = fitted(rng)
    h = LinearHead(rng.normal(size=(4, 6)))
    t = score_batch(np.zeros((0, 6)), h, s, ALL, knn_k=5)
    assert len(t) == 0


def test_score_batch_needs_stats(rng):
    h = LinearHead(rng.normal(size=(4, 6)))
    with pytest.raises(MissingStats, match="knn"):
        score_batch(np.zeros((2, 6)), h, None, ["knn"])
    t = score_batch(np.ones((2, 6)), h, None, ["msp", "energy", "avg_dist"])
    assert t.methods == ["msp", "energy", "avg_dist"]


def test_score_table_csv_roundtrip(tmp_path, rng):
    t = ScoreTable({"a": rng.normal(size=5), "b": rng.normal(size=5)}, meta={"shaping": "ash_s:90"})
    t.write_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().startswith("# shaping=ash_s:90\nsample_index,a,b\n")
    back = ScoreTable.read_csv(tmp_path / "s.csv")
    assert back.meta == t.meta
    for m in "ab":
        np.testing.assert_allclose(back.columns[m], t.columns[m], rtol=1e-8)


def test_stats_bundle_roundtrip(tmp_path, rng):
    _, _, s = fitted(rng)
    save_stats(s, tmp_path / "b1")
    back = load_stats(tmp_path / "b1")
    for name in ("mu_train", "class_means", "shared_cov", "shared_cov_inv", "normalized_bank", "counts"):
        np.testing.assert_array_equal(getattr(back, name), getattr(s, name))
    assert back.react_threshold == s.react_threshold
    save_stats(back, tmp_path / "b2")
    for f in (tmp_path / "b1").iterdir():
        assert f.read_bytes() == (tmp_path / "b2" / f.name).read_bytes()
