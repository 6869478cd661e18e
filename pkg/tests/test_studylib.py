from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from ccopf.evallib import Mode
from ccopf.gridlib import NetworkCase
from ccopf.studylib import ConfigError, StudyConfig, load_study, parse_mu_grid
from ccopf.uncertaintylib import GaussianSet, RectangularSet
from tests.conftest import BASE_STUDY, write_study


@pytest.fixture
def study(tmp_path: Path) -> StudyConfig:
    return load_study(write_study(tmp_path))


@pytest.mark.parametrize(
    ("spec", "expected"),
    (
        ("sweep:0:100:25", (0, 25, 50, 75, 100)),
        ("sweep:0:0.3:0.1", (0, 0.1, 0.2, 0.3)),
        ("sweep:5", (5,)),
    ),
)
def test_parse_mu_grid(spec: str, expected: tuple[float, ...]) -> None:
    assert parse_mu_grid(spec) == pytest.approx(expected)


@pytest.mark.parametrize(
    "spec", ("0:100:25", "sweep:", "sweep:a:b:c", "sweep:10:0:5", "sweep:0:10:0", "sweep:-1")
)
def test_parse_mu_grid_rejects(spec: str) -> None:
    with pytest.raises(ConfigError):
        parse_mu_grid(spec)


def test_load_study(study: StudyConfig, tmp_path: Path) -> None:
    assert study.case == str(tmp_path / "case3.m")
    assert study.mode is Mode.CC_RECT
    assert study.mu == 10
    assert study.mu_grid is None
    assert study.participation == {1: 1.0}
    assert study.out_dir == tmp_path / "results"
    assert [step.label for step in study.timesteps] == ["base"]
    assert study.farms[0].forecast == 30
    assert len(study.digest) == 64


def test_mu_grid_selects_last_weight(tmp_path: Path) -> None:
    study = load_study(write_study(tmp_path, BASE_STUDY.replace("mu = 10", 'mu = "sweep:0:50:25"')))
    assert study.mu_grid == (0, 25, 50)
    assert study.mu == 50


@pytest.mark.parametrize(
    ("old", "new", "match"),
    (
        ('path = "case3.m"', 'path = "nowhere.m"', "does not exist"),
        ('"1" = 1.0', '"1" = 0.9', "sum to 1"),
        ('"1" = 1.0', 'proportional_to = "q_max"', "p_max"),
        ('"1" = 1.0', '"1" = 1.0\nproportional_to = "p_max"', "not both"),
        ('"1" = 1.0', "", "at least one"),
        ("relative_bounds = 0.5", "relative_bounds = 0.5\nepsilon = 1.5", "epsilon"),
        ('kind = "rect"', 'kind = "box"', "kind"),
        ('mode = "cc-rect"', 'mode = "robust"', "Unknown mode"),
        ("mu = 10", "mu = -1", "nonnegative"),
        ("n = 20", 'n = 20\nsampler = "grid"', "sampler"),
        ("[case]", "[case\n", "Invalid TOML"),
    ),
)
def test_load_study_errors(tmp_path: Path, old: str, new: str, match: str) -> None:
    path = write_study(tmp_path, BASE_STUDY.replace(old, new))
    with pytest.raises(ConfigError, match=match):
        load_study(path)


def test_missing_case_names_path(tmp_path: Path) -> None:
    path = write_study(tmp_path, BASE_STUDY.replace("case3.m", "missing.m"))
    with pytest.raises(ConfigError) as exc:
        load_study(path)
    assert str(tmp_path / "missing.m") in str(exc.value)


def test_duplicate_timestep_labels(tmp_path: Path) -> None:
    steps = '\n[[timesteps]]\nlabel = "h1"\n\n[[timesteps]]\nlabel = "h1"\n'
    with pytest.raises(ConfigError, match="unique"):
        load_study(write_study(tmp_path, BASE_STUDY + steps))


def test_participation_by_p_max(tmp_path: Path, three_bus: NetworkCase) -> None:
    study = load_study(
        write_study(tmp_path, BASE_STUDY.replace('"1" = 1.0', 'proportional_to = "p_max"'))
    )
    assert study.participation_factors(three_bus) == pytest.approx((0.75, 0.25))


def test_participation_shared_among_bus_units(study: StudyConfig, rts24: NetworkCase) -> None:
    factors = replace(study, participation={1: 0.4, 13: 0.6}).participation_factors(rts24)
    assert sum(factors) == pytest.approx(1.0)
    assert factors[:4] == pytest.approx((0.1, 0.1, 0.1, 0.1))


def test_participation_at_bus_without_generator(study: StudyConfig, three_bus: NetworkCase) -> None:
    with pytest.raises(ConfigError, match="no generator"):
        replace(study, participation={3: 1.0}).participation_factors(three_bus)


def test_solver_tolerance_override(study: StudyConfig) -> None:
    assert study.solver_tolerances(None) == study.solver
    assert study.solver_tolerances("  ") == study.solver

    tol = study.solver_tolerances("1e-6")
    assert (tol.feasibility, tol.gap) == (1e-6, 1e-6)
    assert tol.solver == study.solver.solver


@pytest.mark.parametrize("value", ("abc", "-1", "0"))
def test_solver_tolerance_override_rejects(study: StudyConfig, value: str) -> None:
    with pytest.raises(ConfigError, match="CCOPF_SOLVER_TOL"):
        study.solver_tolerances(value)


def test_prepare_rectangular(study: StudyConfig) -> None:
    case = study.load_network()
    prepared = study.prepare(study.timesteps[0], case, Mode.CC_RECT)

    assert prepared.case.wind_farms[0].forecast == pytest.approx(0.3)
    assert prepared.case.wind_farms[0].rated == pytest.approx(0.6)
    assert isinstance(prepared.uncertainty, RectangularSet)
    np.testing.assert_allclose(prepared.uncertainty.upper, [0.15])
    assert prepared.pool is None


def test_prepare_follows_mode(study: StudyConfig) -> None:
    case = study.load_network()
    gauss = study.prepare(study.timesteps[0], case, Mode.PTDF_GAUSS).uncertainty
    assert isinstance(gauss, GaussianSet)
    np.testing.assert_allclose(gauss.covariance, [[0.075**2]])

    det = study.prepare(study.timesteps[0], case, Mode.DET).uncertainty
    assert isinstance(det, RectangularSet)


def test_prepare_mean_forecast_from_synthetic_pool(tmp_path: Path) -> None:
    text = BASE_STUDY.replace("forecast = 30", 'forecast = "mean"') + (
        "\n[scenarios]\nn = 400\nshape_a = [2.0]\nshape_b = [5.0]\nseed = 11\n"
    )
    study = load_study(write_study(tmp_path, text))
    prepared = study.prepare(study.timesteps[0], study.load_network(), Mode.CC_RECT)

    assert prepared.pool is not None
    assert prepared.pool.n_scenarios == 400
    assert prepared.case.wind_farms[0].forecast == pytest.approx(prepared.pool.mean()[0])


def test_prepare_mean_forecast_needs_pool(tmp_path: Path) -> None:
    text = BASE_STUDY.replace("forecast = 30", 'forecast = "mean"')
    study = load_study(write_study(tmp_path, text))
    with pytest.raises(ConfigError, match="needs a pool"):
        study.prepare(study.timesteps[0], study.load_network(), Mode.CC_RECT)


def test_timestep_load_scale(tmp_path: Path) -> None:
    text = BASE_STUDY + '\n[[timesteps]]\nlabel = "peak"\nforecast = [20]\nload_scale = 1.2\n'
    study = load_study(write_study(tmp_path, text))
    prepared = study.prepare(study.timesteps[0], study.load_network(), Mode.CC_RECT)

    assert prepared.label == "peak"
    assert prepared.case.p_load[2] == pytest.approx(1.2)
    assert prepared.case.wind_farms[0].forecast == pytest.approx(0.2)
