import numpy as np
import pytest
import scipy.linalg

from fpgan.metrics import (
    GaussianStats,
    MetricError,
    fid,
    frechet_distance,
    gaussian_stats,
    rel_fd,
)


def random_stats(rng, d=4):
    a = rng.standard_normal((d, d))
    cov = a @ a.T + 0.1 * np.eye(d)
    return GaussianStats(mean=rng.standard_normal(d), cov=cov, count=100)


def scipy_frechet(a, b):
    """Independent oracle using scipy's matrix square root."""
    covmean = scipy.linalg.sqrtm(a.cov @ b.cov)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov + b.cov - 2 * covmean))


def test_gaussian_stats_hand_case():
    stats = gaussian_stats(np.array([[0.0, 0.0], [2.0, 2.0]]))
    assert np.allclose(stats.mean, [1.0, 1.0])
    assert np.allclose(stats.cov, [[2.0, 2.0], [2.0, 2.0]])
    assert stats.count == 2


def test_gaussian_stats_constant_rows():
    stats = gaussian_stats(np.ones((5, 3)))
    assert np.allclose(stats.cov, 0.0)


def test_gaussian_stats_standard_normal_sample(np_rng):
    sample = np_rng.standard_normal((200_000, 3))
    stats = gaussian_stats(sample)
    assert np.abs(stats.mean).max() < 0.02
    assert np.abs(stats.cov - np.eye(3)).max() < 0.02


def test_gaussian_stats_requires_two_rows():
    with pytest.raises(MetricError):
        gaussian_stats(np.ones((1, 3)))


def test_identical_stats_distance_zero(np_rng):
    s = random_stats(np_rng)
    assert frechet_distance(s, s) <= 1e-6


def test_mean_shift_closed_form():
    a = GaussianStats(mean=np.zeros(2), cov=np.eye(2), count=10)
    b = GaussianStats(mean=np.array([3.0, 4.0]), cov=np.eye(2), count=10)
    assert frechet_distance(a, b) == pytest.approx(25.0, abs=1e-6)


def test_mean_shift_monte_carlo_oracle(np_rng):
    xa = np_rng.standard_normal((400_000, 2))
    xb = np_rng.standard_normal((400_000, 2)) + np.array([3.0, 4.0])
    value = frechet_distance(gaussian_stats(xa), gaussian_stats(xb))
    assert value == pytest.approx(25.0, abs=0.15)


def test_diagonal_sigma_closed_form():
    a = GaussianStats(mean=np.zeros(2), cov=np.diag([1.0, 1.0]), count=10)
    b = GaussianStats(mean=np.zeros(2), cov=np.diag([4.0, 4.0]), count=10)
    # per-dimension closed form sum of (sigma1 - sigma2)^2
    assert frechet_distance(a, b) == pytest.approx(2.0, abs=1e-6)


def test_symmetry_and_nonnegativity_over_100_pairs():
    rng = np.random.default_rng(42)
    for _ in range(100):
        a, b = random_stats(rng), random_stats(rng)
        ab = frechet_distance(a, b)
        ba = frechet_distance(b, a)
        assert abs(ab - ba) <= 1e-8 * max(1.0, abs(ab))
        assert ab >= 0.0


def test_matches_scipy_sqrtm_oracle():
    rng = np.random.default_rng(7)
    for _ in range(25):
        a, b = random_stats(rng), random_stats(rng)
        assert frechet_distance(a, b) == pytest.approx(scipy_frechet(a, b),
                                                       rel=1e-6, abs=1e-8)


def test_rank_deficient_covariances_stay_finite():
    cov = np.zeros((3, 3))
    cov[0, 0] = 1.0
    a = GaussianStats(mean=np.zeros(3), cov=cov, count=10)
    b = GaussianStats(mean=np.ones(3), cov=np.eye(3), count=10)
    v = frechet_distance(a, b)
    assert np.isfinite(v) and v >= 0


def test_dimension_mismatch_and_nonfinite_errors():
    a = GaussianStats(mean=np.zeros(2), cov=np.eye(2), count=10)
    b = GaussianStats(mean=np.zeros(3), cov=np.eye(3), count=10)
    with pytest.raises(MetricError, match="dimension"):
        frechet_distance(a, b)
    c = GaussianStats(mean=np.array([np.nan, 0.0]), cov=np.eye(2), count=10)
    with pytest.raises(MetricError, match="non-finite"):
        frechet_distance(a, c)


def test_fid_identical_features_is_zero(np_rng):
    feats = np_rng.standard_normal((500, 8))
    stats = gaussian_stats(feats)
    assert fid(feats, stats) <= 1e-3


def test_fid_disjoint_halves_small_positive(np_rng):
    feats = np_rng.standard_normal((2000, 8))
    value = fid(feats[:1000], gaussian_stats(feats[1000:]))
    assert 0.0 < value < 0.5


def test_fid_warns_below_floor(np_rng):
    feats = np_rng.standard_normal((50, 4))
    stats = gaussian_stats(np_rng.standard_normal((50, 4)))
    with pytest.warns(UserWarning, match="noisy"):
        fid(feats, stats, min_count=1000)


def test_rel_fd():
    assert rel_fd({"a": 2.0}, {"a": 2.0}) == {"a": 1.0}
    assert rel_fd({"a": 1.0}, {"a": 2.0}) == {"a": 0.5}
    with pytest.raises(MetricError, match="> 0"):
        rel_fd({"a": 1.0}, {"a": 0.0})
    with pytest.raises(MetricError, match="layer sets"):
        rel_fd({"a": 1.0}, {"b": 1.0})


def test_rel_fd_scale_free(np_rng):
    for _ in range(20):
        fds = {i: float(np_rng.uniform(0.1, 5)) for i in range(4)}
        base = {i: float(np_rng.uniform(0.1, 5)) for i in range(4)}
        c = float(np_rng.uniform(0.5, 10))
        scaled = rel_fd({k: c * v for k, v in fds.items()},
                        {k: c * v for k, v in base.items()})
        for k, v in rel_fd(fds, base).items():
            assert scaled[k] == pytest.approx(v, rel=1e-12)
