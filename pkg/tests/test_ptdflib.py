from dataclasses import replace

import numpy as np
import pytest

from ccopf.conelib import solve
from ccopf.gridlib import LimitKind, NetworkCase, build_matrix_set, parse_case
from ccopf.policylib import CorrectiveControlConfig, PolicyAssemblyError
from ccopf.ptdflib import (
    assemble_ptdf_gauss,
    assemble_ptdf_rect,
    build_ptdf,
    gaussian_margins,
    write_ptdf_csv,
)
from ccopf.sdplib import WindReactive, assemble_deterministic, generation_cost
from ccopf.uncertaintylib import GaussianSet, RectangularSet, inverse_normal_cdf
from tests.conftest import THREE_BUS

CC = CorrectiveControlConfig(participation=(1.0, 0.0))


def _radial_text(n_bus: int, branches: list[tuple[int, int, float]]) -> str:
    bus_rows = "\n".join(
        f"\t{k}\t{3 if k == 1 else 1}\t10\t0\t0\t0\t1\t1\t0\t230\t1\t1.1\t0.9;"
        for k in range(1, n_bus + 1)
    )
    branch_rows = "\n".join(
        f"\t{f}\t{to}\t0\t{x}\t0\t0\t0\t0\t0\t0\t1\t-360\t360;" for f, to, x in branches
    )
    return (
        "mpc.baseMVA = 100;\n"
        f"mpc.bus = [\n{bus_rows}\n];\n"
        "mpc.gen = [\n\t1\t0\t0\t100\t-100\t1.0\t100\t1\t500\t0;\n];\n"
        f"mpc.branch = [\n{branch_rows}\n];\n"
        "mpc.gencost = [\n\t2\t0\t0\t3\t0\t1\t0;\n];\n"
    )


def test_ring_flows() -> None:
    # Branch 1-3 oriented 3 -> 1
    case = parse_case(THREE_BUS.replace("\t1\t3\t0.01", "\t3\t1\t0.01"))
    ptdf = build_ptdf(case)

    assert ptdf.branches == ((1, 2), (2, 3), (3, 1))
    np.testing.assert_allclose(ptdf.matrix[:, 1], [-2 / 3, 1 / 3, 1 / 3], atol=1e-12)


def test_slack_column_is_zero(rts24: NetworkCase) -> None:
    ptdf = build_ptdf(rts24)
    assert ptdf.slack == 13
    np.testing.assert_array_equal(ptdf.matrix[:, rts24.slack_position], 0)
    assert ptdf.matrix.shape == (38, 24)


@pytest.mark.parametrize("n_bus", range(3, 9))
def test_matches_dc_power_flow(n_bus: int, rng) -> None:
    # Spanning tree plus a few random chords
    branches = [
        (k, int(rng.integers(1, k)), float(rng.uniform(0.05, 0.5))) for k in range(2, n_bus + 1)
    ]
    for _ in range(n_bus // 2):
        f, to = rng.choice(np.arange(1, n_bus + 1), 2, replace=False)
        branches.append((int(f), int(to), float(rng.uniform(0.05, 0.5))))
    case = parse_case(_radial_text(n_bus, branches))
    ptdf = build_ptdf(case)

    injection = rng.standard_normal(n_bus)
    injection[0] = -injection[1:].sum()

    b = np.array([1 / x for _, _, x in branches])
    f = np.array([fb - 1 for fb, _, _ in branches])
    to = np.array([tb - 1 for _, tb, _ in branches])
    incidence = np.zeros((len(branches), n_bus))
    incidence[np.arange(len(branches)), f] = 1
    incidence[np.arange(len(branches)), to] = -1
    laplacian = incidence.T @ np.diag(b) @ incidence
    theta = np.linalg.pinv(laplacian) @ injection
    expected = b * (incidence @ theta)

    np.testing.assert_allclose(ptdf.flow_change(injection), expected, atol=1e-10)


def test_ptdf_ignores_resistance() -> None:
    lossless = parse_case(THREE_BUS.replace("\t0.01\t0.1", "\t0\t0.1"))
    np.testing.assert_allclose(
        build_ptdf(lossless).matrix, build_ptdf(parse_case(THREE_BUS)).matrix
    )


def test_write_ptdf_csv(three_bus: NetworkCase, tmp_path) -> None:
    path = tmp_path / "ptdf.csv"
    write_ptdf_csv(build_ptdf(three_bus), path)

    lines = path.read_text().splitlines()
    assert lines[0] == "from,to,1,2,3"
    assert len(lines) == 4
    assert lines[1].split(",")[:3] == ["1", "2", "0"]


def test_rect_structure(three_bus_wind: NetworkCase) -> None:
    rect = RectangularSet(np.array([-0.1]), np.array([0.1]))
    program = assemble_ptdf_rect(three_bus_wind, build_matrix_set(three_bus_wind), rect, CC)

    assert list(program.matrix_vars) == ["W0"]
    assert program.count(tag="ptdf_gen") == 2 * 2
    assert program.count(tag="ptdf_line", group="v1") == 3


def test_rect_rejects_farm_mismatch(three_bus_wind: NetworkCase) -> None:
    rect = RectangularSet(np.zeros(2), np.ones(2))
    with pytest.raises(PolicyAssemblyError):
        assemble_ptdf_rect(three_bus_wind, build_matrix_set(three_bus_wind), rect, CC)


def test_rect_solution_respects_vertex_flows(three_bus_wind: NetworkCase) -> None:
    rect = RectangularSet(np.array([-0.2]), np.array([0.2]))
    ms = build_matrix_set(three_bus_wind)
    solution = solve(assemble_ptdf_rect(three_bus_wind, ms, rect, CC))
    assert solution.is_optimal

    det = solve(assemble_deterministic(three_bus_wind, ms, WindReactive.FIXED, 1.0))
    assert generation_cost(solution) >= generation_cost(det) - 1e-6

    # Slack unit absorbs the full deviation at every vertex
    slack_p = solution.scalars["pg0"]
    gen = three_bus_wind.generators[0]
    assert gen.p_min - 1e-6 <= slack_p - 0.2 and slack_p + 0.2 <= gen.p_max + 1e-6


def test_gauss_zero_covariance_is_deterministic(three_bus_wind: NetworkCase) -> None:
    ms = build_matrix_set(three_bus_wind)
    gauss = GaussianSet.from_covariance(np.zeros((1, 1)))
    program = assemble_ptdf_gauss(three_bus_wind, ms, gauss, CC)
    det = assemble_deterministic(CC.apply(three_bus_wind), ms, WindReactive.FIXED, 1.0)
    assert program.signature() == det.signature()


def test_gaussian_margins(three_bus_wind: NetworkCase) -> None:
    gauss = GaussianSet.from_covariance(np.array([[0.01]]), epsilon=0.05)
    gen, line = gaussian_margins(three_bus_wind, gauss, CC)

    z = inverse_normal_cdf(0.95)
    np.testing.assert_allclose(gen, [z * 0.1, 0.0])
    # Farm bus 3 against the slack, whose column is zero
    psi = build_ptdf(three_bus_wind).matrix[:, 2]
    np.testing.assert_allclose(line, z * 0.1 * np.abs(psi))


def test_gauss_tightens_limits(three_bus_wind: NetworkCase) -> None:
    ms = build_matrix_set(three_bus_wind)
    gauss = GaussianSet.from_covariance(np.array([[0.01]]), epsilon=0.05)
    program = assemble_ptdf_gauss(three_bus_wind, ms, gauss, CC)

    rows = [c for c in program.constraints if c.tag == "ptdf_gen"]
    gen = three_bus_wind.generators[0]
    assert rows[0].upper == pytest.approx(gen.p_max - inverse_normal_cdf(0.95) * 0.1)
    assert program.count(tag="ptdf_line", group="gauss") == 3


@pytest.mark.parametrize(("kind", "limit"), [(LimitKind.APPARENT, 1.2), (LimitKind.ACTIVE, 0.5)])
def test_rect_line_rows_use_rating_of_kind(
    three_bus_wind: NetworkCase, kind: LimitKind, limit: float
) -> None:
    branches = tuple(
        replace(br, p_limit=0.5, s_limit=1.2, limit_kind=kind) for br in three_bus_wind.branches
    )
    case = replace(three_bus_wind, branches=branches)
    rect = RectangularSet(np.array([-0.1]), np.array([0.1]))
    program = assemble_ptdf_rect(case, build_matrix_set(case), rect, CC)

    rows = [c for c in program.constraints if c.tag == "ptdf_line"]
    assert len(rows) == 2 * len(branches)
    for row in rows:
        assert row.upper - row.lower == pytest.approx(2 * limit)
