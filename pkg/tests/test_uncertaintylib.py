import math

import numpy as np
import pytest

from ccopf.uncertaintylib import (
    GaussianSet,
    RectangularSet,
    ScenarioPool,
    UncertaintySetError,
    build_gaussian,
    build_rectangular,
    inverse_normal_cdf,
    required_scenario_count,
    sample,
    synthetic_pool,
)


@pytest.mark.parametrize(
    ("epsilon", "beta", "n_w", "printed", "expected"),
    (
        (0.05, 1e-3, 2, False, 314),
        (0.05, 1e-3, 3, False, 377),
        (0.05, 1e-3, 2, True, 17),
    ),
)
def test_required_scenario_count(
    epsilon: float, beta: float, n_w: int, printed: bool, expected: int
) -> None:
    assert required_scenario_count(epsilon, beta, n_w, printed_coefficient=printed) == expected


@pytest.mark.parametrize(
    ("epsilon", "beta", "n_w"), ((0.0, 1e-3, 2), (0.05, 1.0, 2), (0.05, 1e-3, 0))
)
def test_required_scenario_count_rejects(epsilon: float, beta: float, n_w: int) -> None:
    with pytest.raises(UncertaintySetError):
        required_scenario_count(epsilon, beta, n_w)


def _bisect_quantile(p: float) -> float:
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if 0.5 * math.erfc(-mid / math.sqrt(2)) < p:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


@pytest.mark.parametrize("p", (1e-6, 0.01, 0.05, 0.3, 0.5, 0.9, 0.95, 0.999))
def test_inverse_normal_cdf_matches_bisection(p: float) -> None:
    assert inverse_normal_cdf(p) == pytest.approx(_bisect_quantile(p), abs=1e-8)


def test_inverse_normal_cdf_known_value() -> None:
    assert inverse_normal_cdf(0.95) == pytest.approx(1.6449, abs=1e-4)


@pytest.mark.parametrize("p", (0.0, 1.0, -0.2))
def test_inverse_normal_cdf_domain(p: float) -> None:
    with pytest.raises(UncertaintySetError):
        inverse_normal_cdf(p)


def test_rectangular_vertices_binary_order() -> None:
    rect = RectangularSet(np.array([-1.0, -2.0]), np.array([3.0, 4.0]))
    np.testing.assert_array_equal(
        np.array(rect.vertices), [[-1, -2], [3, -2], [-1, 4], [3, 4]]
    )


def test_rectangular_orthant_corners() -> None:
    rect = RectangularSet(np.array([-1.0, -2.0]), np.array([3.0, 4.0]))
    corners = rect.orthant_corners()
    assert len(corners) == 9
    np.testing.assert_array_equal(corners[0], [-1, -2])
    np.testing.assert_array_equal(corners[1], [0, -2])
    np.testing.assert_array_equal(corners[4], [0, 0])


def test_orthant_corners_drop_zero_width_duplicates() -> None:
    rect = RectangularSet(np.array([0.0]), np.array([1.0]))
    assert len(rect.orthant_corners()) == 2


def test_rectangular_rejects_crossed_bounds() -> None:
    with pytest.raises(UncertaintySetError):
        RectangularSet(np.array([1.0]), np.array([0.0]))


def test_build_rectangular_is_minimum_box() -> None:
    pool = ScenarioPool(np.array([[0.1, 0.5], [0.3, 0.2], [0.2, 0.8]]), (5, 64))
    rect = build_rectangular(pool)
    forecast = pool.mean()
    np.testing.assert_allclose(rect.lower, [0.1, 0.2] - forecast)
    np.testing.assert_allclose(rect.upper, [0.3, 0.8] - forecast)


def test_build_rectangular_warns_on_small_pool(caplog) -> None:
    pool = ScenarioPool(np.array([[0.1], [0.3]]), (5,))
    build_rectangular(pool)
    assert "fewer than the" in caplog.text


def test_box_coverage(rng) -> None:
    # Box from 314 uniform scenarios should contain at least 95% of fresh draws in most trials
    hits = 0
    for _ in range(20):
        pool = ScenarioPool(rng.uniform(0, 1, (314, 2)), (1, 2))
        rect = build_rectangular(pool)
        fresh = rng.uniform(0, 1, (10_000, 2)) - pool.mean()
        inside = np.all((fresh >= rect.lower) & (fresh <= rect.upper), axis=1).mean()
        hits += inside >= 0.95
    assert hits >= 18


def test_gaussian_diagonal_kappa() -> None:
    gauss = GaussianSet.from_covariance(np.diag([0.04, 0.01]), epsilon=0.05)
    np.testing.assert_allclose(gauss.eigvals, [0.04, 0.01])
    np.testing.assert_allclose(gauss.kappa, [0.3290, 0.1645], atol=1e-4)
    np.testing.assert_allclose(np.abs(gauss.eigvecs), np.eye(2))


def test_gaussian_eigvec_sign_normalized() -> None:
    gauss = GaussianSet.from_covariance(np.array([[2.0, -1.0], [-1.0, 2.0]]))
    for i in range(2):
        col = gauss.eigvecs[:, i]
        assert col[np.argmax(np.abs(col))] > 0


def test_gaussian_zero_covariance() -> None:
    gauss = GaussianSet.from_covariance(np.zeros((2, 2)))
    np.testing.assert_array_equal(gauss.kappa, [0.0, 0.0])


def test_gaussian_rejects_indefinite() -> None:
    with pytest.raises(UncertaintySetError, match="not PSD"):
        GaussianSet.from_covariance(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_gaussian_rejects_asymmetric() -> None:
    with pytest.raises(UncertaintySetError, match="not symmetric"):
        GaussianSet.from_covariance(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_build_gaussian_unbiased_covariance() -> None:
    scenarios = np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]])
    gauss = build_gaussian(ScenarioPool(scenarios, (1, 2)))
    np.testing.assert_allclose(gauss.covariance, np.cov(scenarios, rowvar=False, ddof=1))


def test_build_gaussian_needs_two_scenarios() -> None:
    with pytest.raises(UncertaintySetError):
        build_gaussian(ScenarioPool(np.array([[0.5]]), (1,)))


def test_gaussian_rotate_and_contains() -> None:
    gauss = GaussianSet.from_covariance(np.diag([0.04, 0.01]))
    assert gauss.contains(np.array([0.3, 0.1]))
    assert not gauss.contains(np.array([0.34, 0.0]))


def test_sample_is_seeded() -> None:
    rect = RectangularSet(np.array([-1.0, -1.0]), np.array([1.0, 2.0]))
    a = sample(rect, 100, seed=7)
    b = sample(rect, 100, seed=7)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (100, 2)
    assert rect.contains(a.min(axis=0)) and rect.contains(a.max(axis=0))


def test_sample_gaussian_covariance() -> None:
    cov = np.array([[0.04, 0.01], [0.01, 0.02]])
    draws = sample(GaussianSet.from_covariance(cov), 200_000, seed=3)
    np.testing.assert_allclose(np.cov(draws, rowvar=False), cov, atol=1e-3)


def test_sample_pool_relative_to_forecast() -> None:
    pool = ScenarioPool(np.array([[0.2], [0.4]]), (5,))
    draws = sample(pool, 50, seed=1, forecast=np.array([0.3]))
    assert set(np.round(draws.ravel(), 12)) <= {-0.1, 0.1}


def test_sample_rejects_empty() -> None:
    with pytest.raises(UncertaintySetError):
        sample(RectangularSet(np.zeros(1), np.ones(1)), 0)


def test_pool_csv(tmp_path) -> None:
    path = tmp_path / "pool.csv"
    path.write_text("5,64\n10,20\n\n30,40\n")
    pool = ScenarioPool.from_csv(path)
    assert pool.farms == (5, 64)
    assert pool.n_scenarios == 2
    np.testing.assert_allclose(pool.mean(), [20, 30])

    out = tmp_path / "again.csv"
    pool.to_csv(out)
    assert out.read_text().splitlines()[0] == "5,64"


@pytest.mark.parametrize(
    ("text", "match"),
    (
        ("", "empty"),
        ("a,b\n1,2\n", "header"),
        ("5,64\n1\n", "expected 2"),
        ("5,64\n", "no scenarios"),
    ),
)
def test_pool_csv_errors(tmp_path, text: str, match: str) -> None:
    path = tmp_path / "pool.csv"
    path.write_text(text)
    with pytest.raises(UncertaintySetError, match=match):
        ScenarioPool.from_csv(path)


def test_pool_ratings_checked() -> None:
    pool = ScenarioPool(np.array([[0.5, 1.2]]), (5, 64))
    with pytest.raises(UncertaintySetError, match="farm 64"):
        pool.check_ratings([1.0, 1.0])


def test_synthetic_pool() -> None:
    corr = np.array([[1.0, 0.6], [0.6, 1.0]])
    pool = synthetic_pool([5, 64], [300, 600], [2, 3], [5, 4], 314, correlation=corr, seed=4)
    assert pool.n_scenarios == 314
    pool.check_ratings([300, 600])
    assert np.corrcoef(pool.scenarios, rowvar=False)[0, 1] > 0.3

    again = synthetic_pool([5, 64], [300, 600], [2, 3], [5, 4], 314, correlation=corr, seed=4)
    np.testing.assert_array_equal(pool.scenarios, again.scenarios)
