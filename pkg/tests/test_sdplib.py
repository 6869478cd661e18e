import math

import numpy as np
import pytest

from ccopf.conelib import LinearConstraint, LmiConstraint, PsdConstraint, solve
from ccopf.gridlib import NetworkCase, build_admittance, build_matrix_set, voltage_to_x
from ccopf.powerflowlib import DispatchScenario, ViolationThresholds, check_violations, solve_pf
from ccopf.sdplib import (
    RelaxationError,
    WindReactive,
    assemble_deterministic,
    dispatch,
    eigen_ratio,
    generation_cost,
    near_global_optimality,
    nodal_bounds,
    recover_voltages,
    wind_injection,
)


def test_wind_injection(three_bus_wind: NetworkCase) -> None:
    np.testing.assert_allclose(wind_injection(three_bus_wind), [0, 0, 0.3])
    np.testing.assert_allclose(wind_injection(three_bus_wind, np.array([-0.1])), [0, 0, 0.2])


def test_nodal_bounds_capability(three_bus_wind: NetworkCase) -> None:
    bounds = nodal_bounds(three_bus_wind)
    tau = three_bus_wind.wind_farms[0].tau
    assert bounds.p_lo[2] == pytest.approx(-1.0 + 0.3)
    assert bounds.p_hi[2] == pytest.approx(-1.0 + 0.3)
    assert bounds.q_lo[2] == pytest.approx(-0.5 - tau * 0.3)
    assert bounds.q_hi[2] == pytest.approx(-0.5 + tau * 0.3)
    # Generator bus 2: p in [0, 1], q in [-0.5, 0]
    assert (bounds.p_lo[1], bounds.p_hi[1]) == pytest.approx((0.0, 1.0))
    assert (bounds.q_lo[1], bounds.q_hi[1]) == pytest.approx((-0.5, 0.0))


def test_nodal_bounds_fixed_power_factor(three_bus_wind: NetworkCase) -> None:
    bounds = nodal_bounds(three_bus_wind, wind_q=WindReactive.FIXED, fixed_cos_phi=1.0)
    assert bounds.q_lo[2] == pytest.approx(-0.5)
    assert bounds.q_hi[2] == pytest.approx(-0.5)


def test_deterministic_structure(three_bus: NetworkCase) -> None:
    program = assemble_deterministic(three_bus, build_matrix_set(three_bus))
    assert list(program.matrix_vars) == ["W0"]
    assert program.count(kind=PsdConstraint) == 1
    assert program.count(tag="p_balance") == 3
    assert program.count(tag="v_bounds") == 3
    assert program.count(kind=LmiConstraint, tag="line_s") == 3
    assert program.count(kind=LmiConstraint, tag="cost") == 2
    assert program.count(kind=LinearConstraint, tag="gen_p") == 2
    assert set(program.scalar_vars) == {"pg0", "alpha0", "pg1", "alpha1"}


def test_two_bus_relaxation_is_exact(two_bus: NetworkCase) -> None:
    ms = build_matrix_set(two_bus)
    solution = solve(assemble_deterministic(two_bus, ms))
    assert solution.is_optimal

    w0 = solution.matrices["W0"]
    volts = recover_voltages(w0, two_bus.slack_position)
    assert volts.exact

    s = volts.v * np.conj(build_admittance(two_bus) @ volts.v)
    assert s[1] == pytest.approx(-0.5 - 0.1j, abs=1e-5)

    p_gen = dispatch(solution, two_bus)
    assert p_gen[0] == pytest.approx(s[0].real, abs=1e-5)
    assert p_gen[0] > 0.5
    cost = two_bus.generators[0].cost(p_gen[0])
    assert generation_cost(solution) == pytest.approx(cost, rel=1e-6)
    assert solution.objective_value == pytest.approx(cost, rel=1e-6)


def test_relaxation_bounds_feasible_point(three_bus: NetworkCase) -> None:
    scenario = DispatchScenario(
        gen_p=np.array([0.0, 0.5]),
        gen_v=np.array([1.0, 1.05]),
        wind_p=np.zeros(0),
        wind_q=np.zeros(0),
    )
    state = solve_pf(three_bus, scenario)
    assert state.converged
    flags = check_violations(state, three_bus, ViolationThresholds(gen_pu=1e-6, relative=1e-6))
    assert not any(flags.values())

    feasible_cost = sum(g.cost(p) for g, p in zip(three_bus.generators, state.gen_p))
    solution = solve(assemble_deterministic(three_bus, build_matrix_set(three_bus)))
    assert solution.is_optimal
    assert solution.objective_value <= feasible_cost + 1e-5 * abs(feasible_cost)


def test_eigen_ratio() -> None:
    assert eigen_ratio(np.diag([5.0, 4.0, 2.0, 0.0])) == pytest.approx(2.0)

    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert math.isinf(eigen_ratio(np.outer(x, x)))


def test_eigen_ratio_needs_three_eigenvalues() -> None:
    with pytest.raises(RelaxationError):
        eigen_ratio(np.eye(2))


def test_recover_voltages_rank_one(rng) -> None:
    v = rng.uniform(0.95, 1.05, 5) * np.exp(1j * rng.uniform(-0.3, 0.3, 5))
    x = voltage_to_x(v)
    out = recover_voltages(np.outer(x, x), slack=2)

    expected = v * np.exp(-1j * np.angle(v[2]))
    np.testing.assert_allclose(out.v, expected, atol=1e-10)
    assert out.angle[2] == pytest.approx(0.0)
    assert out.exact


def test_recover_voltages_rotation_averaged(rng) -> None:
    v = rng.uniform(0.95, 1.05, 4) * np.exp(1j * rng.uniform(-0.3, 0.3, 4))
    x, x_rot = voltage_to_x(v), voltage_to_x(1j * v)
    w = (np.outer(x, x) + np.outer(x_rot, x_rot)) / 2
    out = recover_voltages(w, slack=0)

    np.testing.assert_allclose(out.magnitude, np.abs(v), atol=1e-10)
    np.testing.assert_allclose(out.v, v * np.exp(-1j * np.angle(v[0])), atol=1e-10)


def test_recover_voltages_flags_higher_rank(rng) -> None:
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    w = np.outer(a, a) + np.outer(b, b) + 0.5 * np.eye(6)
    assert not recover_voltages(w, slack=0).exact


def test_near_global_optimality() -> None:
    assert near_global_optimality(99.74, 100.0) == pytest.approx(99.74)
    with pytest.raises(RelaxationError):
        near_global_optimality(0.0, 100.0)
