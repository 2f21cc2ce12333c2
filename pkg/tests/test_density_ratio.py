import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kedrl.density_ratio import RatioModel, UlsifRatioEstimator, eval_ratio, fit_ulsif
from kedrl.exceptions import InvalidInputError
from kedrl.kernel import MaternParams

P25 = MaternParams(2.5, 1.0, 1.0)
# Max MSE over seeds 0-2 in a pre-build run was 0.032; threshold set above it.
GAUSS_SHIFT_MSE = 0.05


def test_single_point_algebra():
    var, lam = 0.7, 1e-3
    p = MaternParams(1.5, 1.0, var)
    m = fit_ulsif([[0.2, 0.4]], [[0.2, 0.4]], p, lam)
    assert m.alpha[0] == pytest.approx(var / (var**2 + lam), rel=1e-12)
    assert eval_ratio(m, [0.2, 0.4]) == pytest.approx(var**2 / (var**2 + lam), rel=1e-12)


def test_zero_alpha():
    m = RatioModel(np.zeros(3), np.zeros((3, 2)), P25, 1e-3)
    assert eval_ratio(m, [1.0, 1.0]) == 0.0


def test_single_center_unit():
    m = RatioModel([1.0 / P25.variance], [[0.5]], P25, 1e-3)
    assert eval_ratio(m, [0.5]) == 1.0


def test_negative_clipped():
    m = RatioModel([-0.3], [[0.0]], P25, 1e-3)
    assert eval_ratio(m, [0.0]) == 0.0


def test_dimension_mismatch():
    m = RatioModel([1.0], [[0.0, 0.0]], P25, 1e-3)
    with pytest.raises(InvalidInputError):
        eval_ratio(m, np.zeros((2, 3)))
    with pytest.raises(InvalidInputError):
        fit_ulsif(np.zeros((3, 2)), np.zeros((3, 1)), P25)


def test_self_ratio_mean():
    r = np.random.default_rng(21)
    x = r.normal(size=(300, 2))
    m = fit_ulsif(x, x, P25, 1e-3)
    assert abs(eval_ratio(m, x).mean() - 1.0) <= 0.15
    held = r.normal(size=(500, 2))
    assert 0.7 <= eval_ratio(m, held).mean() <= 1.3


@pytest.mark.parametrize("seed", [10, 11, 12])
def test_gaussian_shift_mse(seed):
    r = np.random.default_rng(seed)
    xb = r.normal(0.0, 1.0, size=(500, 1))
    xp = r.normal(0.5, 1.0, size=(500, 1))
    m = fit_ulsif(xb, xp, P25, 1e-3)
    grid = np.linspace(-1, 1, 201)
    mse = np.mean((eval_ratio(m, grid.reshape(-1, 1)) - np.exp(0.5 * grid - 0.125)) ** 2)
    assert mse < GAUSS_SHIFT_MSE


@given(st.integers(0, 2**32 - 1))
def test_nonnegative(seed):
    r = np.random.default_rng(seed)
    m = fit_ulsif(r.normal(size=(20, 2)), r.normal(1.0, 1.0, size=(20, 2)), P25, 1e-3)
    assert np.all(eval_ratio(m, r.normal(scale=3, size=(50, 2))) >= 0)


def test_json_roundtrip(tmp_path):
    r = np.random.default_rng(0)
    m = fit_ulsif(r.normal(size=(10, 2)), r.normal(size=(12, 2)), P25, 1e-3)
    m.save(tmp_path / "ratio.json")
    back = RatioModel.load(tmp_path / "ratio.json")
    np.testing.assert_array_equal(back.alpha, m.alpha)
    np.testing.assert_array_equal(back.centers, m.centers)
    assert back.params == m.params


def test_estimator_wrapper():
    r = np.random.default_rng(1)
    xb, xp = r.normal(size=(50, 1)), r.normal(0.3, 1, size=(50, 1))
    est = UlsifRatioEstimator(nu=2.5).fit(xb, xp)
    direct = fit_ulsif(xb, xp, P25, 1e-3)
    np.testing.assert_allclose(est.predict(xb), eval_ratio(direct, xb))
    assert est.get_params()["lambda_ulsif"] == 1e-3
