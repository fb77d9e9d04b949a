from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import ks_2samp

from fdbd.errors import BadDims, PreconditionError
from fdbd.synthetic import (
    _uniform_sphere,
    build_etf,
    dense_mask,
    nearest_boundary_dist,
    region_volumes,
    sample_dense_region,
    synth_ood_experiment,
    verify_prop1,
    verify_prop2,
)


@pytest.mark.parametrize("C,P", [(2, 2), (3, 3), (4, 3), (10, 16), (5, 40)])
def test_etf_gram(C, P):
    mu = build_etf(C, P).mu
    G = mu @ mu.T
    expected = np.full((C, C), -1.0 / (C - 1))
    np.fill_diagonal(expected, 1.0)
    np.testing.assert_allclose(G, expected, atol=1e-12)
    np.testing.assert_allclose(mu.sum(axis=0), 0.0, atol=1e-12)


def test_etf_bad_dims():
    with pytest.raises(BadDims):
        build_etf(6, 4)
    with pytest.raises(BadDims):
        build_etf(1, 4)


def test_etf_antipodal_pair():
    mu = build_etf(2, 5).mu
    np.testing.assert_allclose(mu[0], -mu[1], atol=1e-15)


def test_nearest_boundary_examples():
    mix = build_etf(2, 3)
    assert nearest_boundary_dist(mix, 0.7 * mix.mu[0]) == pytest.approx(0.7, rel=1e-12)
    mix3 = build_etf(3, 3)
    on_boundary = mix3.mu[0] + mix3.mu[1]  # equal logits for classes 0 and 1
    assert nearest_boundary_dist(mix3, on_boundary) == pytest.approx(0.0, abs=1e-12)


def test_region_volume_cap_fraction_matches_monte_carlo():
    mix = build_etf(3, 3, sigma=0.3)
    vol = region_volumes(mix, 1.0)
    pts = _uniform_sphere(np.random.default_rng(0), 200_000, 3, 1.0)
    frac = dense_mask(mix, pts).mean()
    assert vol["caps_disjoint"] == 1.0
    assert frac == pytest.approx(vol["dense_fraction"], abs=4e-3)
    # P=3 caps are exact spherical zones: fraction (1 - cos)/2
    assert vol["cap_fraction"] == pytest.approx((1 - 0.82) / 2, rel=1e-12)


@pytest.mark.parametrize("C,P,sigma", [(3, 3, 0.3), (3, 2, 0.6)])
def test_dense_sampler_matches_rejection(C, P, sigma):
    # (3, 2, 0.6) has overlapping caps and exercises the cover-count thinning.
    mix = build_etf(C, P, sigma=sigma)
    rng = np.random.default_rng(1)
    exact = sample_dense_region(mix, 1.0, 4000, rng)
    assert dense_mask(mix, exact).all()
    pool = _uniform_sphere(rng, 200_000, P, 1.0)
    ref = pool[dense_mask(mix, pool)][:4000]
    stat = lambda X: (X @ mix.mu.T).max(axis=1)  # noqa: E731
    assert ks_2samp(stat(exact), stat(ref)).pvalue > 1e-3
    first = lambda X: X[:, 0]  # noqa: E731
    assert ks_2samp(first(exact), first(ref)).pvalue > 1e-3


def test_radius_ordering_examples():
    mix = build_etf(10, 16)
    rep = verify_prop1(mix, 1.0, 2.0, 20000, seed=0)
    assert rep.ratio == pytest.approx(2.0, abs=1e-6)
    assert rep.scaling_holds and rep.z_stat >= 5 and rep.passed
    same = verify_prop1(mix, 1.0, 1.0, 5000, seed=0)
    assert not same.passed
    assert abs(same.z_stat) < 5


def test_dense_region_precondition_names_bound():
    mix = build_etf(10, 16, sigma=0.3)
    with pytest.raises(PreconditionError, match=r"1\.5"):
        verify_prop2(mix, 2.0, 1000, seed=0)


def test_dense_region_two_class():
    rep = verify_prop2(build_etf(2, 2, sigma=0.3), 1.0, 20000, seed=0)
    assert rep.passed


def test_dense_region_deterministic():
    mix = build_etf(4, 6, sigma=0.3)
    assert verify_prop2(mix, 0.8, 5000, 3).to_dict() == verify_prop2(mix, 0.8, 5000, 3).to_dict()


def test_experiment_buckets_and_csv():
    exp = synth_ood_experiment(build_etf(5, 8), 2000, "isotropic", seed=0, topk_ks=(1, 4))
    assert set(exp.results) == {"fdbd", "avg_dist", "topk@1", "topk@4"}
    # k = |C| - 1 reproduces the full fdbd score
    assert exp.results["topk@4"].auroc == exp.results["fdbd"].auroc
    assert exp.results["topk@4"].fpr95 == exp.results["fdbd"].fpr95
    assert sum(b.population for b in exp.buckets) == 4000
    lines = exp.buckets_csv().splitlines()
    assert lines[0] == "bucket_lo,bucket_hi,population,mean_dist,var_dist,is_id"
    assert len(exp.scores_csv().splitlines()) == 4001


def test_experiment_avg_dist_grows_with_deviation():
    # Inside each population, buckets further from mu_train have larger mean avg distance.
    exp = synth_ood_experiment(build_etf(10, 16), 5000, "radial_shift", seed=0)
    for is_id in (True, False):
        means = [b.mean_dist for b in exp.buckets if b.is_id == is_id and b.population >= 20]
        assert len(means) >= 3
        assert np.all(np.diff(means) > 0)


def test_experiment_bad_kind():
    with pytest.raises(ValueError):
        synth_ood_experiment(build_etf(3, 3), 10, "uniform", seed=0)
