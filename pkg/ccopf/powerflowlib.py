from __future__ import annotations

import logging
import math
import typing as t
from dataclasses import dataclass, field, replace
from enum import StrEnum
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from ccopf import ccopf_config
from ccopf.gridlib import BusType, MatrixSet, NetworkCase, build_admittance, build_branch_admittance
from ccopf.policylib import AffinePolicySolution, CorrectiveControlConfig, extract_setpoints

logger = logging.getLogger(__name__)


class PowerFlowError(RuntimeError):  # noqa: D101
    pass


class ViolationClass(StrEnum):  # noqa: D101
    BUS_VOLTAGE = "bus-voltage"
    ACTIVE_LINE = "active-line"
    APPARENT_LINE = "apparent-line"
    GEN_ACTIVE = "gen-active"
    GEN_REACTIVE = "gen-reactive"


@dataclass(frozen=True)
class ViolationThresholds:
    """Margins beyond a bound before it counts as violated."""

    gen_pu: float = ccopf_config.GEN_THRESHOLD_PU
    relative: float = ccopf_config.RELATIVE_THRESHOLD


@dataclass(frozen=True, eq=False)
class PowerFlowState:  # noqa: D101
    v_mag: np.ndarray
    v_ang: np.ndarray
    gen_p: np.ndarray
    gen_q: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    pq_switched: tuple[int, ...] = ()
    message: str = ""

    @property
    def v(self) -> np.ndarray:  # noqa: D102
        return self.v_mag * np.exp(1j * self.v_ang)


@dataclass(frozen=True, eq=False)
class DispatchScenario:
    """
    Device set-points for one wind realization.

    `gen_v` holds each generator's voltage set-point; buses with several generators use the first
    one's. `wind_q` is each farm's reactive injection, the farm buses being PQ unless a generator
    also sits there.
    """

    gen_p: np.ndarray
    gen_v: np.ndarray
    wind_p: np.ndarray
    wind_q: np.ndarray
    zeta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    policy: AffinePolicySolution | None = None

    def check(self, case: NetworkCase) -> None:
        """Raise if the wind realization falls outside the farm ratings."""
        for farm, p in zip(case.wind_farms, self.wind_p):
            if not (-1e-12 <= p <= farm.rated + 1e-12):
                raise PowerFlowError(f"Wind farm at bus {farm.bus} output {p} outside [0, rated]")


def flat_start(case: NetworkCase, gen_v: np.ndarray | None = None) -> np.ndarray:
    """Unit magnitude, zero angle voltages, with generator buses at their voltage set-points."""
    v = np.ones(case.n_bus, dtype=complex)
    set_points = np.array([g.v_set for g in case.generators]) if gen_v is None else gen_v
    # Reverse so the first generator at a bus wins
    for pos, vg in zip(case.gen_positions[::-1], np.asarray(set_points)[::-1]):
        v[pos] = vg

    return v


def dsbus_dv(y_bus: sp.csr_matrix, v: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Partial derivatives of the complex bus injections w.r.t. voltage magnitude & angle."""
    i_bus = y_bus @ v
    diag_v = sp.diags(v)
    diag_i = sp.diags(i_bus)
    diag_vnorm = sp.diags(v / np.abs(v))

    ds_dvm = diag_v @ (y_bus @ diag_vnorm).conj() + diag_i.conj() @ diag_vnorm
    ds_dva = 1j * diag_v @ (diag_i - y_bus @ diag_v).conj()
    return sp.csr_matrix(ds_dvm), sp.csr_matrix(ds_dva)


def mismatch(
    y_bus: sp.csr_matrix, v: np.ndarray, s_bus: np.ndarray, pv: np.ndarray, pq: np.ndarray
) -> np.ndarray:
    """Stacked active mismatches at PV & PQ buses then reactive mismatches at PQ buses."""
    mis = v * np.conj(y_bus @ v) - s_bus
    return np.r_[mis[pv].real, mis[pq].real, mis[pq].imag]


def jacobian(
    y_bus: sp.csr_matrix, v: np.ndarray, pv: np.ndarray, pq: np.ndarray
) -> sp.csr_matrix:
    """Polar Newton Jacobian of `mismatch` w.r.t. `(angles[pv, pq], magnitudes[pq])`."""
    ds_dvm, ds_dva = dsbus_dv(y_bus, v)
    pvpq = np.r_[pv, pq]
    j11 = ds_dva[pvpq][:, pvpq].real
    j12 = ds_dvm[pvpq][:, pq].real
    j21 = ds_dva[pq][:, pvpq].imag
    j22 = ds_dvm[pq][:, pq].imag
    return sp.csr_matrix(sp.vstack([sp.hstack([j11, j12]), sp.hstack([j21, j22])]))


def _newton(
    y_bus: sp.csr_matrix,
    s_bus: np.ndarray,
    v0: np.ndarray,
    pv: np.ndarray,
    pq: np.ndarray,
    tol: float,
    max_iter: int,
) -> tuple[np.ndarray, bool, int, float]:
    v = v0.copy()
    v_mag, v_ang = np.abs(v), np.angle(v)
    n_pv, n_pq = pv.size, pq.size
    pvpq = np.r_[pv, pq]

    f = mismatch(y_bus, v, s_bus, pv, pq)
    norm_f = float(np.linalg.norm(f, np.inf)) if f.size else 0.0
    iterations = 0
    while norm_f >= tol and iterations < max_iter:
        iterations += 1
        dx = -spsolve(jacobian(y_bus, v, pv, pq).tocsc(), f)
        if not np.all(np.isfinite(dx)):
            break

        v_ang[pvpq] += dx[: n_pv + n_pq]
        v_mag[pq] += dx[n_pv + n_pq :]
        v = v_mag * np.exp(1j * v_ang)
        # Re-derive in case a magnitude went negative
        v_mag, v_ang = np.abs(v), np.angle(v)

        f = mismatch(y_bus, v, s_bus, pv, pq)
        norm_f = float(np.linalg.norm(f, np.inf))

    return v, bool(norm_f < tol), iterations, norm_f


def _bus_sum(case: NetworkCase, values: np.ndarray) -> np.ndarray:
    return np.asarray(case.gen_incidence @ np.asarray(values, dtype=float)).ravel()


def _split_reactive(case: NetworkCase, q_bus: np.ndarray) -> np.ndarray:
    """Share each bus's generator reactive output among its units in proportion to their ranges."""
    q_min = np.array([g.q_min for g in case.generators])
    q_max = np.array([g.q_max for g in case.generators])
    gen_q = np.zeros(len(case.generators))
    for k in np.unique(case.gen_positions):
        members = np.flatnonzero(case.gen_positions == k)
        span = q_max[members] - q_min[members]
        if span.sum() > 0:
            gen_q[members] = q_min[members] + (q_bus[k] - q_min[members].sum()) * span / span.sum()
        else:
            gen_q[members] = q_bus[k] / members.size

    return gen_q


def solve_pf(
    case: NetworkCase,
    scenario: DispatchScenario,
    v0: np.ndarray | None = None,
    tol: float = ccopf_config.PF_TOL,
    max_iter: int = ccopf_config.PF_MAX_ITER,
    max_outer: int = ccopf_config.PF_MAX_OUTER,
    enforce_q_limits: bool = True,
) -> PowerFlowState:
    """
    Solve the AC power flow for the provided set-points with polar Newton-Raphson.

    After every converged Newton solve, generator buses whose reactive output exceeds the aggregate
    limits of their units are switched to PQ with the output held at the limit, and switched buses
    whose voltage has moved back past the set-point on the relaxed side are returned to PV. The
    outer loop stops once the bus types settle or after `max_outer` passes.
    """
    y_bus = build_admittance(case)
    slack = case.slack_position
    gen_buses = set(case.gen_positions.tolist())
    pv_set = {
        k
        for k, bus in enumerate(case.buses)
        if k != slack and k in gen_buses and bus.bus_type != BusType.PQ
    }

    p_wind = np.zeros(case.n_bus)
    q_wind = np.zeros(case.n_bus)
    np.add.at(p_wind, case.farm_positions, scenario.wind_p)
    np.add.at(q_wind, case.farm_positions, scenario.wind_q)
    p_gen_bus = _bus_sum(case, scenario.gen_p)
    q_min_bus = _bus_sum(case, [g.q_min for g in case.generators])
    q_max_bus = _bus_sum(case, [g.q_max for g in case.generators])

    v = flat_start(case, scenario.gen_v) if v0 is None else np.asarray(v0, dtype=complex).copy()
    v_set = np.abs(flat_start(case, scenario.gen_v))
    for k in (*pv_set, slack):
        v[k] = v_set[k] * np.exp(1j * np.angle(v[k]))

    held: dict[int, float] = {}  # PV bus -> generator reactive output held at a limit
    total_iter = 0
    converged, norm_f = False, math.inf
    for _ in range(max_outer):
        pv = np.array(sorted(pv_set - held.keys()), dtype=int)
        pq = np.array(sorted(set(range(case.n_bus)) - set(pv) - {slack}), dtype=int)

        q_gen_fixed = np.zeros(case.n_bus)
        for k, q in held.items():
            q_gen_fixed[k] = q
        s_bus = (p_gen_bus - case.p_load + p_wind) + 1j * (q_gen_fixed - case.q_load + q_wind)

        v, converged, iterations, norm_f = _newton(y_bus, s_bus, v, pv, pq, tol, max_iter)
        total_iter += iterations
        if not converged or not enforce_q_limits:
            break

        s_calc = v * np.conj(y_bus @ v)
        q_gen = s_calc.imag + case.q_load - q_wind
        changed = False
        for k in pv:
            if q_gen[k] > q_max_bus[k] + tol:
                held[k] = q_max_bus[k]
                changed = True
            elif q_gen[k] < q_min_bus[k] - tol:
                held[k] = q_min_bus[k]
                changed = True
        for k, q in list(held.items()):
            # Release when the voltage has moved past the set-point on the side the limit allows
            above = abs(v[k]) > v_set[k] + tol
            below = abs(v[k]) < v_set[k] - tol
            if (q == q_max_bus[k] and above) or (q != q_max_bus[k] and below):
                del held[k]
                v[k] = v_set[k] * np.exp(1j * np.angle(v[k]))
                changed = True

        if not changed:
            break
    else:
        converged = False
        logger.debug(f"PV/PQ switching did not settle within {max_outer} passes")

    s_calc = v * np.conj(y_bus @ v)
    p_gen = s_calc.real + case.p_load - p_wind
    q_gen = s_calc.imag + case.q_load - q_wind

    gen_p = np.array(scenario.gen_p, dtype=float)
    slack_members = np.flatnonzero(case.gen_positions == slack)
    if slack_members.size:
        residual = p_gen[slack] - gen_p[slack_members].sum()
        gen_p[slack_members] += residual / slack_members.size

    return PowerFlowState(
        v_mag=np.abs(v),
        v_ang=np.angle(v) - np.angle(v[slack]),
        gen_p=gen_p,
        gen_q=_split_reactive(case, q_gen),
        converged=converged,
        iterations=total_iter,
        max_mismatch=norm_f,
        pq_switched=tuple(sorted(case.buses[k].id for k in held)),
        message="" if converged else f"no convergence (mismatch {norm_f:.3e})",
    )


def build_scenario(
    case: NetworkCase,
    ms: MatrixSet,
    policy: AffinePolicySolution,
    zeta: np.ndarray,
    voltage_mode: t.Literal["policy", "hold"] = "policy",
) -> DispatchScenario:
    """
    Derive the dispatch for a forecast error realization.

    Policies with an uncertainty set provide every set-point at `zeta`; voltage set-points track
    the policy (`"policy"`) or hold the forecast values (`"hold"`). For policies without one, the
    generators follow the forecast dispatch shifted by `-d_G sum(zeta)`, the farms run at their
    fixed power factor and the voltage set-points hold.
    """
    zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
    base = extract_setpoints(policy, case, ms)
    if policy.set_kind != "none":
        at_zeta = extract_setpoints(policy, case, ms, zeta)
        gen_p, wind_p, wind_q = at_zeta.gen_p, at_zeta.wind_p, at_zeta.wind_q
        gen_v = at_zeta.gen_v if voltage_mode == "policy" else base.gen_v
    else:
        gen_p = base.gen_p - case.participation * zeta.sum()
        wind_p = base.wind_p + zeta
        tau = np.array([farm.tau for farm in case.wind_farms])
        wind_q = tau * wind_p
        gen_v = base.gen_v

    scenario = DispatchScenario(
        gen_p=gen_p, gen_v=gen_v, wind_p=wind_p, wind_q=wind_q, zeta=zeta, policy=policy
    )
    scenario.check(case)
    return scenario


def apply_scenario_and_balance(
    case: NetworkCase,
    scenario: DispatchScenario,
    cc: CorrectiveControlConfig | None = None,
    v0: np.ndarray | None = None,
) -> PowerFlowState:
    """
    Run the power flow for the scenario, then redistribute the slack's loss mismatch.

    The mismatch between the slack generators' actual & scheduled output is shared among all
    generators by participation factor (taken from `cc` when given) and the power flow is solved
    again starting from the first solution.
    """
    if cc is not None:
        case = cc.apply(case)
    scenario.check(case)
    first = solve_pf(case, scenario, v0=v0)
    if not first.converged:
        return first

    slack_members = np.flatnonzero(case.gen_positions == case.slack_position)
    scheduled = np.asarray(scenario.gen_p, dtype=float)
    delta = float(first.gen_p[slack_members].sum() - scheduled[slack_members].sum())
    logger.debug(f"Redistributing {delta:.3e} p.u. slack mismatch by participation")
    balanced = replace(scenario, gen_p=scheduled + case.participation * delta)
    return solve_pf(case, balanced, v0=first.v)


def branch_flows(case: NetworkCase, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Complex power entering each branch at its from & to ends."""
    y_from, y_to = build_branch_admittance(case)
    f = np.array([case.bus_index[br.from_bus] for br in case.branches], dtype=int)
    to = np.array([case.bus_index[br.to_bus] for br in case.branches], dtype=int)
    s_from = v[f] * np.conj(y_from @ v)
    s_to = v[to] * np.conj(y_to @ v)
    return s_from, s_to


def losses(case: NetworkCase, state: PowerFlowState, wind_p: np.ndarray) -> float:
    """Total active losses: generation plus wind less load."""
    return float(state.gen_p.sum() + np.sum(wind_p) - case.p_load.sum())


def check_violations(
    state: PowerFlowState,
    case: NetworkCase,
    thresholds: ViolationThresholds | None = None,
) -> dict[ViolationClass, bool]:
    """Flag every violation class with at least one member beyond its bound plus threshold."""
    if not state.converged:
        raise PowerFlowError("Violations are only defined for converged power flows")

    th = thresholds or ViolationThresholds()
    rel = th.relative

    v_min = np.array([bus.v_min for bus in case.buses])
    v_max = np.array([bus.v_max for bus in case.buses])
    voltage = bool(
        np.any(state.v_mag > v_max * (1 + rel)) or np.any(state.v_mag < v_min * (1 - rel))
    )

    s_from, s_to = branch_flows(case, state.v)
    active = apparent = False
    for idx, br in enumerate(case.branches):
        if br.limit_kind.has_active:
            flow = max(abs(s_from[idx].real), abs(s_to[idx].real))
            active |= flow > br.p_limit * (1 + rel)
        if br.limit_kind.has_apparent:
            flow = max(abs(s_from[idx]), abs(s_to[idx]))
            apparent |= flow > br.s_limit * (1 + rel)

    p_min = np.array([g.p_min for g in case.generators])
    p_max = np.array([g.p_max for g in case.generators])
    q_min = np.array([g.q_min for g in case.generators])
    q_max = np.array([g.q_max for g in case.generators])
    gen_p = bool(np.any(state.gen_p > p_max + th.gen_pu) or np.any(state.gen_p < p_min - th.gen_pu))
    gen_q = bool(np.any(state.gen_q > q_max + th.gen_pu) or np.any(state.gen_q < q_min - th.gen_pu))

    return {
        ViolationClass.BUS_VOLTAGE: voltage,
        ViolationClass.ACTIVE_LINE: bool(active),
        ViolationClass.APPARENT_LINE: bool(apparent),
        ViolationClass.GEN_ACTIVE: gen_p,
        ViolationClass.GEN_REACTIVE: gen_q,
    }


def write_state_csv(state: PowerFlowState, case: NetworkCase, path: Path) -> None:
    """Dump bus voltages & generator outputs; one `bus` row per bus, one `gen` row per unit."""
    lines = ["element,bus,vm,va_deg,p,q"]
    for bus, vm, va in zip(case.buses, state.v_mag, state.v_ang):
        lines.append(f"bus,{bus.id},{vm:.10f},{math.degrees(va):.10f},,")
    for gen, p, q in zip(case.generators, state.gen_p, state.gen_q):
        lines.append(f"gen,{gen.bus},,,{p:.10f},{q:.10f}")

    path.write_text("\n".join(lines) + "\n")
    logger.info(f"Wrote power flow state to '{path}'")


def operating_point_mismatch(
    case: NetworkCase, v: np.ndarray, scenario: DispatchScenario
) -> float:
    """
    Largest power flow mismatch of the voltages `v` against the scenario's injections.

    Active power is checked at every non-slack bus and reactive power at buses without a generator,
    whose reactive output is free within its limits.
    """
    y_bus = build_admittance(case)
    slack = case.slack_position
    gen_buses = set(case.gen_positions.tolist()) - {slack}
    pv = np.array(sorted(gen_buses), dtype=int)
    pq = np.array(sorted(set(range(case.n_bus)) - gen_buses - {slack}), dtype=int)

    p_wind = np.zeros(case.n_bus)
    q_wind = np.zeros(case.n_bus)
    np.add.at(p_wind, case.farm_positions, scenario.wind_p)
    np.add.at(q_wind, case.farm_positions, scenario.wind_q)
    s_bus = (_bus_sum(case, scenario.gen_p) - case.p_load + p_wind) + 1j * (q_wind - case.q_load)

    f = mismatch(y_bus, np.asarray(v, dtype=complex), s_bus, pv, pq)
    return float(np.linalg.norm(f, np.inf)) if f.size else 0.0
