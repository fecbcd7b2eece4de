import numpy as np
import pytest

from polyforge import genmetrics as gm
from polyforge.dedup import FeatureSet
from polyforge.errors import DataError, NumericError, ParameterError


def _fs(matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    return FeatureSet(matrix, [f"r{i}" for i in range(matrix.shape[0])])


def _analytic_frechet(mu1, s1, mu2, s2):
    from scipy import linalg

    diff = mu1 - mu2
    covmean = linalg.sqrtm(s1 @ s2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    return float(diff @ diff + np.trace(s1 + s2 - 2 * covmean))


def test_fit_gaussian_constant_features():
    fit = gm.fit_gaussian(_fs(np.full((5, 3), 2.0)))
    assert np.allclose(fit.mu, 2.0)
    assert np.allclose(fit.sigma, 1e-8 * np.eye(3))


def test_fit_gaussian_two_points():
    fit = gm.fit_gaussian(_fs([[0.0, 0.0], [2.0, 0.0]]))
    assert np.allclose(fit.mu, [1.0, 0.0])
    assert fit.sigma[0, 0] == pytest.approx(2.0, abs=1e-7)  # unbiased
    with pytest.raises(ParameterError):
        gm.fit_gaussian(_fs([[1.0, 2.0]]))


def test_fit_gaussian_monte_carlo(rng):
    mu = np.array([1.0, -2.0, 0.5])
    a = np.array([[1.0, 0.2, 0.0], [0.0, 0.8, 0.3], [0.0, 0.0, 1.2]])
    cov = a @ a.T
    x = rng.multivariate_normal(mu, cov, size=10_000)
    fit = gm.fit_gaussian(_fs(x))
    assert np.allclose(fit.mu, mu, atol=0.05 * np.abs(mu).max())
    assert np.linalg.norm(fit.sigma - cov) / np.linalg.norm(cov) <= 0.05


def test_frechet_self_distance_zero(rng):
    fit = gm.fit_gaussian(_fs(rng.normal(size=(50, 6))))
    assert gm.frechet_distance(fit, fit) <= 1e-8


def test_frechet_identity_covariances_mean_shift():
    d = np.array([1.0, -2.0, 0.5])
    a = gm.GaussianFit(np.zeros(3), np.eye(3))
    b = gm.GaussianFit(d, np.eye(3))
    assert gm.frechet_distance(a, b) == pytest.approx(float(d @ d), abs=1e-10)


def test_frechet_scalar_formula():
    # 1-D: (mu1-mu2)^2 + (sigma1-sigma2)^2 with sigma^2 = (1, 4)
    a = gm.GaussianFit(np.array([0.0]), np.array([[1.0]]))
    b = gm.GaussianFit(np.array([1.0]), np.array([[4.0]]))
    assert gm.frechet_distance(a, b) == pytest.approx(2.0, abs=1e-10)


def test_frechet_matches_scipy_sqrtm(rng):
    x = rng.normal(size=(200, 5))
    y = rng.normal(size=(180, 5)) @ np.diag([1.0, 2.0, 0.5, 1.5, 1.0]) + 0.3
    fa, fb = gm.fit_gaussian(_fs(x)), gm.fit_gaussian(_fs(y))
    want = _analytic_frechet(fa.mu, fa.sigma, fb.mu, fb.sigma)
    assert gm.frechet_distance(fa, fb) == pytest.approx(want, rel=1e-8)


def test_frechet_symmetry(rng):
    fa = gm.fit_gaussian(_fs(rng.normal(size=(60, 4))))
    fb = gm.fit_gaussian(_fs(rng.normal(size=(60, 4)) * 2 + 1))
    assert gm.frechet_distance(fa, fb) == pytest.approx(
        gm.frechet_distance(fb, fa), abs=1e-8
    )


def test_frechet_dimension_mismatch():
    a = gm.GaussianFit(np.zeros(2), np.eye(2))
    b = gm.GaussianFit(np.zeros(3), np.eye(3))
    with pytest.raises(ParameterError):
        gm.frechet_distance(a, b)


def test_frechet_rejects_invalid_covariance():
    a = gm.GaussianFit(np.zeros(2), np.array([[1.0, 0.0], [0.0, -0.5]]))
    b = gm.GaussianFit(np.zeros(2), np.eye(2))
    with pytest.raises(NumericError):
        gm.frechet_distance(a, b)


def test_inception_score_uniform_rows():
    probs = np.full((40, 10), 0.1)
    mean, std = gm.inception_score(probs)
    assert mean == pytest.approx(1.0, abs=1e-9)
    assert std == 0.0


def test_inception_score_balanced_one_hot():
    probs = np.tile(np.eye(10), (5, 1))  # 50 rows, balanced
    mean, _ = gm.inception_score(probs)
    assert mean == pytest.approx(10.0, abs=1e-6)


def test_inception_score_identical_one_hot():
    probs = np.zeros((30, 10))
    probs[:, 3] = 1.0
    mean, _ = gm.inception_score(probs)
    assert mean == pytest.approx(1.0, abs=1e-12)


def test_inception_score_validation():
    with pytest.raises(DataError):
        gm.inception_score(np.full((4, 3), 0.5))
    with pytest.raises(ParameterError):
        gm.inception_score(np.full((4, 4), 0.25), splits=0)


def test_inception_score_permutation_invariant_single_split(rng):
    probs = rng.dirichlet(np.ones(6), size=30)
    m1, _ = gm.inception_score(probs)
    m2, _ = gm.inception_score(probs[rng.permutation(30)])
    assert m1 == pytest.approx(m2, rel=1e-12)


def _brute_pr(xr, xg, k):
    def dist(a, b):
        return np.sqrt(((a - b) ** 2).sum())

    def radii(x):
        out = []
        for i in range(len(x)):
            ds = sorted(dist(x[i], x[j]) for j in range(len(x)) if j != i)
            out.append(ds[k - 1])
        return out

    rr, rg = radii(xr), radii(xg)
    prec = np.mean([
        any(dist(g, xr[i]) <= rr[i] for i in range(len(xr))) for g in xg
    ])
    rec = np.mean([
        any(dist(r, xg[j]) <= rg[j] for j in range(len(xg))) for r in xr
    ])
    return float(prec), float(rec)


def test_pr_identical_sets(rng):
    x = rng.normal(size=(20, 4))
    res = gm.precision_recall(_fs(x), _fs(x.copy()), k=3)
    assert res.precision == 1.0 and res.recall == 1.0


def test_pr_separated_clusters(rng):
    a = rng.normal(size=(25, 3)) * 0.01
    b = rng.normal(size=(25, 3)) * 0.01 + 100.0
    res = gm.precision_recall(_fs(a), _fs(b), k=3)
    assert res.precision == 0.0 and res.recall == 0.0


def test_pr_matches_brute_force(rng):
    for k in (1, 3, 5):
        xr = rng.normal(size=(50, 4))
        xg = rng.normal(size=(50, 4)) * 1.3 + 0.2
        res = gm.precision_recall(_fs(xr), _fs(xg), k=k)
        prec, rec = _brute_pr(xr, xg, k)
        assert res.precision == prec
        assert res.recall == rec


def test_pr_exchange_symmetry(rng):
    xr = rng.normal(size=(30, 5))
    xg = rng.normal(size=(40, 5)) + 0.5
    ab = gm.precision_recall(_fs(xr), _fs(xg), k=3)
    ba = gm.precision_recall(_fs(xg), _fs(xr), k=3)
    assert ab.precision == ba.recall and ab.recall == ba.precision


def test_pr_k_validation(rng):
    x = _fs(rng.normal(size=(5, 2)))
    with pytest.raises(ParameterError):
        gm.precision_recall(x, x, k=5)
    with pytest.raises(ParameterError):
        gm.precision_recall(x, x, k=0)
