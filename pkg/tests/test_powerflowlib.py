import math

import numpy as np
import pytest

from ccopf.conelib import solve
from ccopf.gridlib import NetworkCase, build_admittance, build_matrix_set
from ccopf.policylib import AffinePolicySolution, CorrectiveControlConfig
from ccopf.powerflowlib import (
    DispatchScenario,
    PowerFlowError,
    PowerFlowState,
    ViolationClass,
    apply_scenario_and_balance,
    build_scenario,
    check_violations,
    jacobian,
    losses,
    mismatch,
    operating_point_mismatch,
    solve_pf,
    write_state_csv,
)
from ccopf.sdplib import assemble_deterministic


def _scenario(gen_p: list[float], gen_v: list[float]) -> DispatchScenario:
    return DispatchScenario(
        gen_p=np.array(gen_p), gen_v=np.array(gen_v), wind_p=np.zeros(0), wind_q=np.zeros(0)
    )


def test_two_bus_closed_form(two_bus: NetworkCase) -> None:
    state = solve_pf(two_bus, _scenario([0.0], [1.0]))
    assert state.converged

    p, q, r, x = 0.5, 0.1, 0.01, 0.1
    b = 2 * (p * r + q * x) - 1.0
    c = (p**2 + q**2) * (r**2 + x**2)
    v2 = math.sqrt((-b + math.sqrt(b**2 - 4 * c)) / 2)
    assert state.v_mag[1] == pytest.approx(v2, abs=1e-8)
    assert state.v_ang[0] == 0

    expected_loss = r * (p**2 + q**2) / v2**2
    assert losses(two_bus, state, np.zeros(0)) == pytest.approx(expected_loss, abs=1e-8)
    assert state.gen_p[0] == pytest.approx(p + expected_loss, abs=1e-8)


def test_jacobian_matches_finite_differences(three_bus: NetworkCase, rng) -> None:
    y_bus = build_admittance(three_bus)
    pv, pq = np.array([1]), np.array([2])
    v_mag = rng.uniform(0.95, 1.05, 3)
    v_ang = rng.uniform(-0.2, 0.2, 3)
    s_bus = np.zeros(3, dtype=complex)

    def _f(ang: np.ndarray, mag: np.ndarray) -> np.ndarray:
        return mismatch(y_bus, mag * np.exp(1j * ang), s_bus, pv, pq)

    jac = jacobian(y_bus, v_mag * np.exp(1j * v_ang), pv, pq).toarray()
    h = 1e-6
    cols = []
    for k in (1, 2):
        step = np.zeros(3)
        step[k] = h
        cols.append((_f(v_ang + step, v_mag) - _f(v_ang - step, v_mag)) / (2 * h))
    step = np.zeros(3)
    step[2] = h
    cols.append((_f(v_ang, v_mag + step) - _f(v_ang, v_mag - step)) / (2 * h))

    np.testing.assert_allclose(jac, np.column_stack(cols), atol=1e-6)


def test_pv_bus_switched_at_reactive_limit(three_bus: NetworkCase) -> None:
    state = solve_pf(three_bus, _scenario([0.0, 0.5], [1.0, 1.05]))

    assert state.converged
    assert state.pq_switched == (2,)
    assert state.gen_q[1] == pytest.approx(0.0, abs=1e-7)
    assert state.v_mag[1] < 1.05


def test_reactive_limits_can_be_ignored(three_bus: NetworkCase) -> None:
    state = solve_pf(three_bus, _scenario([0.0, 0.5], [1.0, 1.05]), enforce_q_limits=False)

    assert state.converged
    assert state.pq_switched == ()
    assert state.v_mag[1] == pytest.approx(1.05)
    assert state.gen_q[1] > 0


def test_nonconvergence_reported(two_bus: NetworkCase) -> None:
    state = solve_pf(two_bus, _scenario([0.0], [1.0]), max_iter=1)
    assert not state.converged
    assert "no convergence" in state.message
    with pytest.raises(PowerFlowError):
        check_violations(state, two_bus)


def _state(v2: float, gen_p: float) -> PowerFlowState:
    return PowerFlowState(
        v_mag=np.array([1.0, v2]),
        v_ang=np.zeros(2),
        gen_p=np.array([gen_p]),
        gen_q=np.zeros(1),
        converged=True,
        iterations=1,
        max_mismatch=0.0,
    )


@pytest.mark.parametrize(("v2", "violated"), ((1.0606, False), (1.0612, True), (0.9385, True)))
def test_voltage_threshold(two_bus: NetworkCase, v2: float, violated: bool) -> None:
    flags = check_violations(_state(v2, 0.5), two_bus)
    assert flags[ViolationClass.BUS_VOLTAGE] is violated


@pytest.mark.parametrize(("excess", "violated"), ((5e-4, False), (2e-3, True)))
def test_generator_threshold(two_bus: NetworkCase, excess: float, violated: bool) -> None:
    flags = check_violations(_state(1.0, 2.0 + excess), two_bus)
    assert flags[ViolationClass.GEN_ACTIVE] is violated
    assert not flags[ViolationClass.APPARENT_LINE]


def test_loss_balancing_by_participation(three_bus: NetworkCase) -> None:
    cc = CorrectiveControlConfig(participation=(0.5, 0.5))
    scenario = _scenario([0.5, 0.5], [1.0, 1.05])
    first = solve_pf(cc.apply(three_bus), scenario)
    delta = first.gen_p[0] - 0.5
    assert delta > 0

    balanced = apply_scenario_and_balance(three_bus, scenario, cc)
    assert balanced.converged
    assert balanced.gen_p[1] == pytest.approx(0.5 + 0.5 * delta)
    # The slack now carries about half of the original mismatch
    assert balanced.gen_p[0] == pytest.approx(0.5 + 0.5 * delta, abs=0.1 * delta)


def test_operating_point_mismatch(two_bus: NetworkCase) -> None:
    state = solve_pf(two_bus, _scenario([0.0], [1.0]))
    scenario = _scenario(list(state.gen_p), [1.0])
    assert operating_point_mismatch(two_bus, state.v, scenario) < 1e-7
    assert operating_point_mismatch(two_bus, np.ones(2, dtype=complex), scenario) > 0.1


def test_build_scenario_without_uncertainty_set(three_bus_wind: NetworkCase) -> None:
    ms = build_matrix_set(three_bus_wind)
    solution = solve(assemble_deterministic(three_bus_wind, ms))
    policy = AffinePolicySolution.from_sdp(solution, three_bus_wind)

    scenario = build_scenario(three_bus_wind, ms, policy, np.array([0.1]))
    np.testing.assert_allclose(scenario.gen_p, policy.gen_p - np.array([0.1, 0.0]), atol=1e-9)
    np.testing.assert_allclose(scenario.wind_p, [0.4])
    np.testing.assert_allclose(scenario.wind_q, [three_bus_wind.wind_farms[0].tau * 0.4])

    with pytest.raises(PowerFlowError, match="outside"):
        build_scenario(three_bus_wind, ms, policy, np.array([0.5]))


def test_write_state_csv(three_bus: NetworkCase, tmp_path) -> None:
    state = solve_pf(three_bus, _scenario([0.0, 0.5], [1.0, 1.05]))
    path = tmp_path / "state.csv"
    write_state_csv(state, three_bus, path)

    lines = path.read_text().splitlines()
    assert lines[0] == "element,bus,vm,va_deg,p,q"
    assert len(lines) == 1 + 3 + 2
    assert lines[1].startswith("bus,1,1.0000000000,0.0000000000")
    assert lines[-1].startswith("gen,2,,,0.5000000000")
