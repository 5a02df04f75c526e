import math

import numpy as np
import pytest
from scipy import special, stats

from effcode.infotheory import (
    CdfTransformer, DegenerateSampleError, cdf_apply, cdf_fit, digamma, jitter, knn_entropy,
    log_ball_volume, multi_information, pairwise_mi, rank_transform, spatial_mi_profile,
    subsample_features,
)

EULER_GAMMA = 0.57721566490153286


# digamma


def test_digamma_known_values():
    assert digamma(1.0) == pytest.approx(-EULER_GAMMA, abs=1e-9)
    assert digamma(2.0) - digamma(1.0) == pytest.approx(1.0, abs=1e-12)
    harmonic = sum(1.0 / j for j in range(1, 10))
    assert digamma(10.0) == pytest.approx(-EULER_GAMMA + harmonic, abs=1e-9)
    assert digamma(10.0) == pytest.approx(2.2517525891, abs=1e-9)


def test_digamma_against_reference_grid():
    x = np.geomspace(1e-3, 1e6, 2000)
    assert np.abs(digamma(x) - special.digamma(x)).max() <= 1e-10


def test_digamma_recurrence():
    x = np.linspace(0.5, 100, 1000)
    np.testing.assert_allclose(digamma(x + 1) - digamma(x) - 1 / x, 0.0, atol=1e-12)


def test_digamma_domain():
    with pytest.raises(ValueError):
        digamma(0.0)
    with pytest.raises(ValueError):
        digamma(np.array([1.0, -2.0]))


def test_log_ball_volume():
    assert log_ball_volume(1) == pytest.approx(0.0, abs=1e-15)
    assert log_ball_volume(2) == pytest.approx(math.log(math.pi / 4), abs=1e-12)
    assert log_ball_volume(3) == pytest.approx(math.log(math.pi / 6), abs=1e-12)


# k-NN entropy


def test_entropy_uniform_square():
    x = np.random.default_rng(0).random((10000, 2))
    assert abs(knn_entropy(x, 5).value) <= 0.05


def test_entropy_standard_normal():
    x = np.random.default_rng(1).standard_normal(10000)
    assert abs(knn_entropy(x, 5).value - 0.5 * math.log(2 * math.pi * math.e)) <= 0.05


def test_entropy_matches_direct_formula():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((300, 3))
    k = 4
    dist = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    eps = 2 * np.sort(dist, axis=1)[:, k - 1]
    n, d = x.shape
    vol = math.pi ** (d / 2) / math.gamma(1 + d / 2) / 2 ** d
    expected = -special.digamma(k) + special.digamma(n) + math.log(vol) + d / n * np.log(eps).sum()
    est = knn_entropy(x, k)
    assert est.value == pytest.approx(expected, abs=1e-10)
    assert (est.k, est.n, est.d, est.jittered) == (k, n, d, False)


def test_entropy_scaling_and_translation_laws():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((500, 3))
    h = knn_entropy(x).value
    assert knn_entropy(2.5 * x).value == pytest.approx(h + 3 * math.log(2.5), abs=1e-9)
    assert knn_entropy(x + [10.0, -3.0, 0.5]).value == pytest.approx(h, abs=1e-9)


def test_entropy_errors():
    with pytest.raises(ValueError):
        knn_entropy(np.zeros((5, 2)) + np.arange(5)[:, None], k=5)
    with pytest.raises(DegenerateSampleError):
        knn_entropy(np.ones((20, 2)))
    with pytest.raises(ValueError):
        knn_entropy(np.array([[0.0, np.inf], [1, 2], [3, 4]]), k=1)


def test_duplicates_trigger_jitter_only_when_needed():
    rng = np.random.default_rng(0)
    x = rng.random((200, 2))
    assert not knn_entropy(x).jittered
    est = knn_entropy(np.vstack([x] * 6))  # k-th neighbour of every point is a copy
    assert est.jittered and np.isfinite(est.value)


def test_jitter_is_tiny_and_row_order_free():
    x = np.random.default_rng(0).random((50, 3))
    j = jitter(x, seed=1)
    assert np.abs(j - x).max() <= 1e-10
    perm = np.random.default_rng(2).permutation(50)
    np.testing.assert_array_equal(jitter(x[perm], seed=1), j[perm])


# CDF transform


def test_cdf_rank_example():
    u = np.array([[3.0], [1.0], [2.0]])
    np.testing.assert_allclose(cdf_apply(cdf_fit(u), u).ravel(), [5 / 6, 1 / 6, 0.5])


def test_cdf_constant_feature():
    u = np.full((7, 1), 4.2)
    np.testing.assert_array_equal(cdf_apply(cdf_fit(u), u), 0.5)


def test_cdf_ties_share_mean_rank():
    u = np.array([[1.0], [2.0], [2.0], [5.0]])
    np.testing.assert_allclose(cdf_apply(cdf_fit(u), u).ravel(), [0.125, 0.5, 0.5, 0.875])


def test_cdf_gaussian_ks():
    g = np.random.default_rng(0).standard_normal((10000, 1))
    z = cdf_apply(cdf_fit(g), g).ravel()
    assert stats.kstest(z, "uniform").statistic <= 0.02


def test_cdf_out_of_sample_clamped_and_monotone():
    u = np.random.default_rng(0).standard_normal((100, 2))
    t = cdf_fit(u)
    probe = np.linspace(-10, 10, 400)[:, None].repeat(2, axis=1)
    z = cdf_apply(t, probe)
    assert z.min() >= 0.5 / 100 and z.max() <= 1 - 0.5 / 100
    assert np.all(np.diff(z, axis=0) >= 0)
    with pytest.raises(ValueError):
        cdf_apply(t, probe[:, :1])


def test_cdf_transformer():
    u = np.random.default_rng(0).random((20, 3))
    z = CdfTransformer().fit(u).transform(u)
    assert np.all((z > 0) & (z < 1))


def test_rank_transform_average_matches_cdf():
    u = np.random.default_rng(0).integers(0, 4, (60, 3)).astype(float)
    np.testing.assert_allclose(rank_transform(u, "average"), cdf_apply(cdf_fit(u), u))


def test_rank_transform_random_is_uniform_grid():
    u = np.random.default_rng(0).integers(0, 3, (40, 2)).astype(float)
    z = rank_transform(u, "random", seed=1)
    grid = (np.arange(1, 41) - 0.5) / 40
    for j in range(2):
        np.testing.assert_allclose(np.sort(z[:, j]), grid)
        # order between distinct values is preserved
        assert np.all(np.diff(z[np.argsort(u[:, j], kind="stable"), j][np.diff(np.sort(u[:, j]), prepend=-1) > 0]) > 0)


# multi-information


def test_multi_information_independent():
    u = np.random.default_rng(0).random((10000, 2))
    assert abs(multi_information(u).value) <= 0.08


def test_multi_information_duplicated_feature():
    a = np.random.default_rng(0).standard_normal((10000, 1))
    assert multi_information(np.hstack([a, a])).value <= -1.0


@pytest.mark.parametrize("ties", ["random", "average"])
def test_multi_information_permutation_invariant(ties):
    rng = np.random.default_rng(1)
    u = rng.standard_normal((500, 4))
    u[u < 0] = 0.0  # sparse-code-like ties
    perm = rng.permutation(500)
    a = multi_information(u, ties=ties).value
    b = multi_information(u[perm], ties=ties).value
    assert a == b


def test_multi_information_upper_bound():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5000, 4)) @ rng.standard_normal((4, 4))
    assert multi_information(x).value <= 0.1


def test_subsample_features():
    u = np.arange(20.0).reshape(2, 10)
    s = subsample_features(u, 4, seed=0)
    assert s.shape == (2, 4)
    np.testing.assert_array_equal(subsample_features(u, 4, seed=0), s)
    assert subsample_features(u, None).shape == (2, 10)
    assert subsample_features(u, 50).shape == (2, 10)


# pairwise MI


def test_pairwise_mi_independent():
    rng = np.random.default_rng(0)
    assert pairwise_mi(rng.random(10000), rng.random(10000)) <= 0.05


def test_pairwise_mi_identical():
    a = np.random.default_rng(0).random(10000)
    assert pairwise_mi(a, a) >= 2.0


def test_pairwise_mi_gaussian():
    rng = np.random.default_rng(4)
    cov = [[1, 0.5], [0.5, 1]]
    ab = rng.multivariate_normal([0, 0], cov, size=10000)
    assert pairwise_mi(ab[:, 0], ab[:, 1]) == pytest.approx(-0.5 * math.log(1 - 0.25), abs=0.05)


def test_pairwise_mi_symmetric():
    rng = np.random.default_rng(5)
    a = rng.standard_normal(2000)
    b = a + rng.standard_normal(2000)
    assert pairwise_mi(a, b) == pairwise_mi(b, a)


# spatial profile


def test_spatial_profile_iid_noise():
    ims = np.random.default_rng(0).random((500, 64))
    prof = spatial_mi_profile(ims, 8, [1], n_pairs=5000, seed=0)
    assert prof.mi[0] <= 0.05
    assert prof.rows() == [(1.0, float(prof.mi[0]), 5000)]


def test_spatial_profile_constant_images_flat_and_large():
    rng = np.random.default_rng(1)
    ims = np.repeat(rng.random((3000, 1)), 64, axis=1)
    prof = spatial_mi_profile(ims, 8, [1, 3, 5], n_pairs=3000, seed=0)
    assert prof.mi.min() >= 2.0
    assert np.ptp(prof.mi) <= 0.1 * prof.mi.max()


def test_spatial_profile_deterministic_and_validated():
    ims = np.random.default_rng(0).random((100, 100))
    a = spatial_mi_profile(ims, 10, [1, 2], n_pairs=500, seed=3)
    b = spatial_mi_profile(ims, 10, [1, 2], n_pairs=500, seed=3)
    np.testing.assert_array_equal(a.mi, b.mi)
    with pytest.raises(ValueError):
        spatial_mi_profile(ims, 10, [10], n_pairs=10)
    with pytest.raises(ValueError):
        spatial_mi_profile(ims, 10, [0.5], n_pairs=10)
    with pytest.raises(ValueError):
        spatial_mi_profile(ims, 10, [2, 1], n_pairs=10)
    with pytest.raises(ValueError):
        spatial_mi_profile(ims, 9, [1], n_pairs=10)
