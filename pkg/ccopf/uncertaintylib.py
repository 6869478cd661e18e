from __future__ import annotations

import itertools
import logging
import math
import typing as t
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import ndtr, ndtri

from ccopf import ccopf_config

logger = logging.getLogger(__name__)

SeedLike: t.TypeAlias = int | np.random.SeedSequence | np.random.Generator | None


class UncertaintySetError(ValueError):  # noqa: D101
    pass


@dataclass(frozen=True, eq=False)
class ScenarioPool:
    """Wind power realizations, one row per scenario & one column per farm, in p.u."""

    scenarios: np.ndarray
    farms: tuple[int, ...]

    def __post_init__(self) -> None:
        arr = np.atleast_2d(np.asarray(self.scenarios, dtype=float))
        object.__setattr__(self, "scenarios", arr)

        if arr.shape[0] < 1 or arr.size == 0:
            raise UncertaintySetError("Scenario pool is empty")
        if arr.shape[1] != len(self.farms):
            raise UncertaintySetError(
                f"Scenario pool has {arr.shape[1]} columns but {len(self.farms)} farm ids"
            )
        if not np.all(np.isfinite(arr)):
            raise UncertaintySetError("Scenario pool contains non-finite values")

    @property
    def n_scenarios(self) -> int:  # noqa: D102
        return int(self.scenarios.shape[0])

    @property
    def n_farms(self) -> int:  # noqa: D102
        return len(self.farms)

    def mean(self) -> np.ndarray:
        """Per-farm scenario mean, the default forecast."""
        return self.scenarios.mean(axis=0)

    def check_ratings(self, rated: t.Sequence[float]) -> None:
        """Raise if any realization lies outside `[0, rated]` for its farm."""
        rated_arr = np.asarray(rated, dtype=float)
        bad = (self.scenarios < 0) | (self.scenarios > rated_arr)
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise UncertaintySetError(
                f"Scenario {row} for farm {self.farms[col]} is outside [0, {rated_arr[col]}]: "
                f"{self.scenarios[row, col]}"
            )

    @classmethod
    def from_csv(cls, path: Path) -> ScenarioPool:
        """
        Read a pool from CSV: a header row of farm (bus) ids, then one row per scenario.

        Blank lines are ignored.
        """
        lines = [line for line in path.read_text().splitlines() if line.strip()]
        if not lines:
            raise UncertaintySetError(f"Scenario pool file '{path}' is empty")

        try:
            farms = tuple(int(tok) for tok in lines[0].split(","))
        except ValueError as e:
            raise UncertaintySetError(f"Invalid farm id header in '{path}': {lines[0]!r}") from e

        rows = []
        for lineno, line in enumerate(lines[1:], start=2):
            try:
                rows.append([float(tok) for tok in line.split(",")])
            except ValueError as e:
                raise UncertaintySetError(f"'{path}' row {lineno}: {line!r}") from e
            if len(rows[-1]) != len(farms):
                raise UncertaintySetError(
                    f"'{path}' row {lineno} has {len(rows[-1])} values, expected {len(farms)}"
                )

        if not rows:
            raise UncertaintySetError(f"Scenario pool file '{path}' has no scenarios")

        logger.info(f"Read {len(rows)} scenarios for {len(farms)} farm(s) from '{path}'")
        return cls(np.array(rows), farms)

    def to_csv(self, path: Path) -> None:  # noqa: D102
        header = ",".join(str(farm) for farm in self.farms)
        np.savetxt(path, self.scenarios, delimiter=",", header=header, comments="", fmt="%.12g")


def required_scenario_count(
    epsilon: float, beta: float, n_w: int, printed_coefficient: bool = False
) -> int:
    """
    Minimum number of scenarios for the box bounds to hold with confidence `1 - beta`.

    `N_s = ceil(c * e/(e - 1) * (ln(1/beta) + 2n_w - 1))` with `c = 1/epsilon`. Setting
    `printed_coefficient` uses `c = 1/(1 - epsilon)` instead, which yields a far smaller count.
    """
    if not (0 < epsilon < 1):
        raise UncertaintySetError(f"epsilon must be in (0, 1), got {epsilon}")
    if not (0 < beta < 1):
        raise UncertaintySetError(f"beta must be in (0, 1), got {beta}")
    if n_w < 1:
        raise UncertaintySetError(f"Need at least one uncertain injection, got {n_w}")

    coef = 1 / (1 - epsilon) if printed_coefficient else 1 / epsilon
    val = coef * (math.e / (math.e - 1)) * (math.log(1 / beta) + 2 * n_w - 1)
    return math.ceil(val)


@dataclass(frozen=True, eq=False)
class RectangularSet:
    """Per-farm forecast error bounds; the box `[lower, upper]`."""

    lower: np.ndarray
    upper: np.ndarray
    epsilon: float = ccopf_config.EPSILON
    beta: float = ccopf_config.BETA

    def __post_init__(self) -> None:
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

        if lower.shape != upper.shape:
            raise UncertaintySetError("Lower and upper bounds differ in shape")
        if np.any(lower > upper):
            raise UncertaintySetError(f"Lower bounds exceed upper bounds: {lower} > {upper}")

    @property
    def n_w(self) -> int:  # noqa: D102
        return int(self.lower.size)

    @property
    def vertices(self) -> list[np.ndarray]:
        """
        The `2^n_w` box corners in binary-counter order.

        Farm 0 is the least significant digit and the lower bound comes before the upper bound.
        """
        out = []
        for v in range(2**self.n_w):
            bits = [(v >> i) & 1 for i in range(self.n_w)]
            out.append(np.where(bits, self.upper, self.lower).astype(float))

        return out

    def orthant_corners(self) -> list[np.ndarray]:
        """
        Corners of every orthant box, `{lower_i, 0, upper_i}^n_w`, in ternary-counter order.

        Farm 0 is the least significant digit; duplicates from zero-width sides are dropped.
        """
        out: list[np.ndarray] = []
        seen: set[tuple[float, ...]] = set()
        for digits in itertools.product((0, 1, 2), repeat=self.n_w):
            # itertools varies the last position fastest
            digits = digits[::-1]
            picks = zip(digits, self.lower, self.upper)
            choice = np.array([(lo, 0.0, hi)[d] for d, lo, hi in picks])
            key = tuple(choice.tolist())
            if key not in seen:
                seen.add(key)
                out.append(choice)

        return out

    def contains(self, zeta: np.ndarray, tol: float = 1e-9) -> bool:  # noqa: D102
        zeta = np.asarray(zeta, dtype=float)
        return bool(np.all(zeta >= self.lower - tol) and np.all(zeta <= self.upper + tol))


def build_rectangular(
    pool: ScenarioPool,
    forecast: np.ndarray | None = None,
    epsilon: float = ccopf_config.EPSILON,
    beta: float = ccopf_config.BETA,
    printed_coefficient: bool = False,
) -> RectangularSet:
    """
    Build the minimum-volume box containing every scenario's forecast error.

    The forecast defaults to the scenario mean. A pool smaller than the required scenario count is
    accepted with a warning.
    """
    forecast = pool.mean() if forecast is None else np.asarray(forecast, dtype=float)
    if forecast.shape != (pool.n_farms,):
        raise UncertaintySetError(
            f"Forecast has shape {forecast.shape}, expected ({pool.n_farms},)"
        )

    needed = required_scenario_count(epsilon, beta, pool.n_farms, printed_coefficient)
    if pool.n_scenarios < needed:
        logger.warning(
            f"Scenario pool has {pool.n_scenarios} scenarios, fewer than the {needed} required for "
            f"epsilon={epsilon}, beta={beta}"
        )

    errors = pool.scenarios - forecast
    rect = RectangularSet(errors.min(axis=0), errors.max(axis=0), epsilon=epsilon, beta=beta)
    logger.info(f"Built rectangular set: lower={rect.lower}, upper={rect.upper}")
    return rect


@dataclass(frozen=True, eq=False)
class GaussianSet:
    """
    Zero-mean Gaussian forecast errors with covariance `covariance`.

    `eigvals` are sorted descending and `eigvecs` holds the matching orthonormal columns, each
    signed so that its largest-magnitude component is positive. `kappa` is the per-axis half
    width of the `1 - epsilon` confidence region along each eigenvector.
    """

    covariance: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    epsilon: float
    kappa: np.ndarray

    @property
    def n_w(self) -> int:  # noqa: D102
        return int(self.eigvals.size)

    @classmethod
    def from_covariance(
        cls, covariance: np.ndarray, epsilon: float = ccopf_config.EPSILON
    ) -> GaussianSet:
        """Decompose the covariance & derive the per-axis half widths."""
        if not (0 < epsilon < 1):
            raise UncertaintySetError(f"epsilon must be in (0, 1), got {epsilon}")

        cov = np.atleast_2d(np.asarray(covariance, dtype=float))
        if cov.shape[0] != cov.shape[1]:
            raise UncertaintySetError(f"Covariance must be square, got {cov.shape}")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise UncertaintySetError("Covariance is not symmetric")

        lam, vecs = np.linalg.eigh((cov + cov.T) / 2)
        lam, vecs = lam[::-1], vecs[:, ::-1]
        if lam.size and lam[-1] < -ccopf_config.EIGVAL_FLOOR * max(1.0, abs(lam[0])):
            raise UncertaintySetError(f"Covariance is not PSD, min eigenvalue {lam[-1]:.3e}")

        lam = np.where(lam < ccopf_config.EIGVAL_FLOOR, 0.0, lam)
        for i in range(vecs.shape[1]):
            pivot = np.argmax(np.abs(vecs[:, i]))
            if vecs[pivot, i] < 0:
                vecs[:, i] = -vecs[:, i]

        kappa = inverse_normal_cdf(1 - epsilon) * np.sqrt(lam)
        return cls(covariance=cov, eigvals=lam, eigvecs=vecs, epsilon=epsilon, kappa=kappa)

    def rotate(self, zeta: np.ndarray) -> np.ndarray:
        """Express forecast errors in the eigenbasis, `c = eta^T zeta`."""
        return self.eigvecs.T @ np.asarray(zeta, dtype=float)

    def contains(self, zeta: np.ndarray, tol: float = 1e-9) -> bool:
        """Check whether `zeta` lies in the rectangle `|c_i| <= kappa_i` enclosing the ellipsoid."""
        return bool(np.all(np.abs(self.rotate(zeta)) <= self.kappa + tol))


def build_gaussian(
    pool: ScenarioPool,
    forecast: np.ndarray | None = None,
    epsilon: float = ccopf_config.EPSILON,
) -> GaussianSet:
    """Fit the Gaussian set to the pool's forecast errors using the unbiased sample covariance."""
    if pool.n_scenarios < 2:
        raise UncertaintySetError("Need at least 2 scenarios to estimate a covariance")

    forecast = pool.mean() if forecast is None else np.asarray(forecast, dtype=float)
    errors = pool.scenarios - forecast
    cov = np.atleast_2d(np.cov(errors, rowvar=False, ddof=1))

    gauss = GaussianSet.from_covariance(cov, epsilon)
    logger.info(f"Built Gaussian set: eigenvalues={gauss.eigvals}, kappa={gauss.kappa}")
    return gauss


def inverse_normal_cdf(p: float) -> float:
    """Standard normal quantile function."""
    if not (0 < p < 1):
        raise UncertaintySetError(f"Probability must be in (0, 1), got {p}")

    return float(ndtri(p))


def sample(
    source: RectangularSet | GaussianSet | ScenarioPool,
    n: int,
    seed: SeedLike = None,
    forecast: np.ndarray | None = None,
) -> np.ndarray:
    """
    Draw `n` forecast error vectors from the provided source.

    Gaussian sets are sampled through their eigen factor, scenario pools are resampled with
    replacement (errors relative to `forecast`, defaulting to the pool mean), and rectangular sets
    are sampled uniformly over the box.
    """
    if n < 1:
        raise UncertaintySetError(f"Sample count must be at least 1, got {n}")

    rng = np.random.default_rng(seed)
    match source:
        case GaussianSet():
            factor = source.eigvecs * np.sqrt(source.eigvals)
            z = rng.standard_normal((n, source.n_w))
            return z @ factor.T
        case ScenarioPool():
            base = source.mean() if forecast is None else np.asarray(forecast, dtype=float)
            idx = rng.integers(0, source.n_scenarios, size=n)
            return source.scenarios[idx] - base
        case RectangularSet():
            return rng.uniform(source.lower, source.upper, size=(n, source.n_w))
        case _:
            raise UncertaintySetError(f"Cannot sample from {type(source).__name__}")


def synthetic_pool(
    farms: t.Sequence[int],
    rated: t.Sequence[float],
    shape_a: t.Sequence[float],
    shape_b: t.Sequence[float],
    n: int,
    correlation: np.ndarray | None = None,
    seed: SeedLike = None,
) -> ScenarioPool:
    """
    Generate a synthetic wind scenario pool.

    Each farm's output is beta-distributed with shapes `(a, b)`, scaled to its rated power; farms
    are coupled through a Gaussian copula with the provided correlation matrix (identity if
    omitted).
    """
    n_w = len(farms)
    if not (len(rated) == len(shape_a) == len(shape_b) == n_w):
        raise UncertaintySetError("Synthetic pool parameters must have one entry per farm")
    if n < 1:
        raise UncertaintySetError(f"Scenario count must be at least 1, got {n}")

    corr = np.eye(n_w) if correlation is None else np.asarray(correlation, dtype=float)
    if corr.shape != (n_w, n_w):
        raise UncertaintySetError(f"Correlation must be {n_w}x{n_w}, got {corr.shape}")
    try:
        chol = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError as e:
        raise UncertaintySetError("Correlation matrix is not positive definite") from e

    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, n_w)) @ chol.T
    u = ndtr(z)
    power = stats.beta.ppf(u, np.asarray(shape_a), np.asarray(shape_b)) * np.asarray(rated)

    logger.info(f"Generated {n} synthetic scenarios for {n_w} farm(s)")
    return ScenarioPool(power, tuple(int(farm) for farm in farms))
