from __future__ import annotations

import logging
import math
import typing as t
from dataclasses import dataclass
from enum import StrEnum

import numpy as np

from ccopf import ccopf_config
from ccopf.conelib import (
    AffineExpr,
    ConicProgram,
    LinearConstraint,
    LmiConstraint,
    PsdConstraint,
    SdpSolution,
    trace_sum,
)
from ccopf.gridlib import MatrixSet, NetworkCase

logger = logging.getLogger(__name__)

Combination: t.TypeAlias = tuple[tuple[str, float], ...]


class RelaxationError(ValueError):  # noqa: D101
    pass


class WindReactive(StrEnum):
    """How wind farm reactive injections enter the nodal reactive bounds."""

    CAPABILITY = "capability"  # Anywhere within +/- tau * P
    FIXED = "fixed"  # Exactly tau * P


@dataclass(frozen=True)
class NodalBounds:
    """Per-bus bounds on net active & reactive injections (p.u.)."""

    p_lo: np.ndarray
    p_hi: np.ndarray
    q_lo: np.ndarray
    q_hi: np.ndarray


def wind_injection(case: NetworkCase, zeta: np.ndarray | None = None) -> np.ndarray:
    """Per-bus wind active injection at the forecast shifted by the forecast errors `zeta`."""
    p_w = np.zeros(case.n_bus)
    for idx, farm in enumerate(case.wind_farms):
        dev = 0.0 if zeta is None else float(zeta[idx])
        p_w[case.farm_positions[idx]] += farm.forecast + dev

    return p_w


def nodal_bounds(
    case: NetworkCase,
    zeta: np.ndarray | None = None,
    wind_q: WindReactive = WindReactive.CAPABILITY,
    fixed_cos_phi: float | None = None,
) -> NodalBounds:
    """
    Build the nodal injection bounds at the wind realization `forecast + zeta`.

    Active bounds are the generator limits less the load plus the wind infeed. Reactive bounds add
    the wind farms' reactive range, `+/- tau * P_W` for capability mode or a fixed `tau * P_W`; in
    fixed mode `fixed_cos_phi` overrides the farms' own power factor.
    """
    inc = case.gen_incidence
    p_min = np.asarray(inc @ np.array([g.p_min for g in case.generators])).ravel()
    p_max = np.asarray(inc @ np.array([g.p_max for g in case.generators])).ravel()
    q_min = np.asarray(inc @ np.array([g.q_min for g in case.generators])).ravel()
    q_max = np.asarray(inc @ np.array([g.q_max for g in case.generators])).ravel()

    p_w = wind_injection(case, zeta)
    q_lo_w = np.zeros(case.n_bus)
    q_hi_w = np.zeros(case.n_bus)
    for idx, farm in enumerate(case.wind_farms):
        k = case.farm_positions[idx]
        p_farm = farm.forecast + (0.0 if zeta is None else float(zeta[idx]))
        if wind_q == WindReactive.FIXED:
            cos_phi = fixed_cos_phi if fixed_cos_phi is not None else farm.cos_phi
            q_fixed = math.sqrt((1 - cos_phi**2) / cos_phi**2) * p_farm
            q_lo_w[k] += q_fixed
            q_hi_w[k] += q_fixed
        else:
            q_lo_w[k] -= farm.tau * p_farm
            q_hi_w[k] += farm.tau * p_farm

    return NodalBounds(
        p_lo=p_min - case.p_load + p_w,
        p_hi=p_max - case.p_load + p_w,
        q_lo=q_min - case.q_load + q_lo_w,
        q_hi=q_max - case.q_load + q_hi_w,
    )


def add_state_constraints(
    program: ConicProgram,
    case: NetworkCase,
    ms: MatrixSet,
    combination: Combination,
    bounds: NodalBounds,
    group: str,
    nodal_p: bool = True,
    apparent: bool = True,
) -> None:
    """
    Constrain the operating point `W = sum(w_j W_j)` of `combination`.

    Adds the nodal active (optional) & reactive bounds, squared voltage bounds, active branch flow
    bounds, and the apparent branch flow LMI (optional) for every rated branch.
    """
    for k, bus in enumerate(case.buses):
        if nodal_p:
            program.add(
                LinearConstraint(
                    trace_sum(combination, ms.bus_active[k]),
                    bounds.p_lo[k],
                    bounds.p_hi[k],
                    tag="p_bounds",
                    group=group,
                )
            )
        program.add(
            LinearConstraint(
                trace_sum(combination, ms.bus_reactive[k]),
                bounds.q_lo[k],
                bounds.q_hi[k],
                tag="q_bounds",
                group=group,
            )
        )
        program.add(
            LinearConstraint(
                trace_sum(combination, ms.bus_voltage[k]),
                bus.v_min**2,
                bus.v_max**2,
                tag="v_bounds",
                group=group,
            )
        )

    for idx, br in enumerate(case.branches):
        if br.limit_kind.has_active:
            program.add(
                LinearConstraint(
                    trace_sum(combination, ms.line_active[idx]),
                    -br.p_limit,
                    br.p_limit,
                    tag="line_p",
                    group=group,
                )
            )

    if apparent:
        add_apparent_limits(program, case, ms, combination, group)


def add_apparent_limits(
    program: ConicProgram,
    case: NetworkCase,
    ms: MatrixSet,
    combination: Combination,
    group: str,
) -> None:
    """Add `[[-S^2, P, Q], [P, -1, 0], [Q, 0, -1]] <= 0` for every branch with an apparent limit."""
    zero = AffineExpr()
    minus_one = AffineExpr.constant(-1.0)
    for idx, br in enumerate(case.branches):
        if not br.limit_kind.has_apparent:
            continue

        p_lm = trace_sum(combination, ms.line_active[idx])
        q_lm = trace_sum(combination, ms.line_reactive[idx])
        block = (
            (AffineExpr.constant(-(br.s_limit**2)), p_lm, q_lm),
            (p_lm, minus_one, zero),
            (q_lm, zero, minus_one),
        )
        program.add(LmiConstraint(block, sense=-1, tag="line_s", group=group))


def add_dispatch(
    program: ConicProgram,
    case: NetworkCase,
    ms: MatrixSet,
    var: str,
    offset: np.ndarray,
) -> AffineExpr:
    """
    Add generator dispatch scalars & cost epigraphs tied to the matrix variable `var`.

    Each generator gets an output scalar `pg<i>` within its limits and a cost scalar `alpha<i>`.
    Every bus balances `Tr{Y_k W} = sum(pg at k) + offset_k`, where `offset` is the fixed net
    injection (wind less load). Quadratic costs enter through the Schur-complement LMI
    `[[c1 p + c0 - alpha, sqrt(c2) p], [sqrt(c2) p, -1]] <= 0`; linear costs become an equality.

    Returns the total cost expression `sum(alpha)`.
    """
    total = AffineExpr()
    gen_terms: dict[int, AffineExpr] = {}
    for g, gen in enumerate(case.generators):
        pg = program.add_scalar_var(f"pg{g}")
        alpha = program.add_scalar_var(f"alpha{g}")
        p_expr = AffineExpr.scalar(pg)
        a_expr = AffineExpr.scalar(alpha)

        program.add(LinearConstraint(p_expr, gen.p_min, gen.p_max, tag="gen_p", group=var))
        c = gen.cost
        if c.c2 > 0:
            root = math.sqrt(c.c2)
            corner = p_expr * root
            block = (
                (p_expr * c.c1 + c.c0 - a_expr, corner),
                (corner, AffineExpr.constant(-1.0)),
            )
            program.add(LmiConstraint(block, sense=-1, tag="cost", group=var))
        else:
            program.add(LinearConstraint(a_expr - p_expr * c.c1, c.c0, c.c0, tag="cost", group=var))

        k = int(case.gen_positions[g])
        gen_terms[k] = gen_terms.get(k, AffineExpr()) + p_expr
        total = total + a_expr

    for k in range(case.n_bus):
        expr = AffineExpr.trace(var, ms.bus_active[k]) - gen_terms.get(k, AffineExpr())
        program.add(LinearConstraint(expr, offset[k], offset[k], tag="p_balance", group=var))

    return total


def assemble_deterministic(
    case: NetworkCase,
    ms: MatrixSet,
    wind_q: WindReactive = WindReactive.CAPABILITY,
    fixed_cos_phi: float | None = None,
) -> ConicProgram:
    """
    Assemble the semidefinite relaxation of the AC-OPF at the wind forecast.

    The program has a single `2n_b x 2n_b` matrix variable `W0`, constrained PSD, and minimizes the
    total generation cost.
    """
    program = ConicProgram("det")
    add_base(program, case, ms, wind_q=wind_q, fixed_cos_phi=fixed_cos_phi)
    logger.info(f"Assembled {program}")
    return program


def add_base(
    program: ConicProgram,
    case: NetworkCase,
    ms: MatrixSet,
    wind_q: WindReactive = WindReactive.CAPABILITY,
    fixed_cos_phi: float | None = None,
) -> AffineExpr:
    """Add the forecast operating point `W0` with dispatch & cost; returns the cost expression."""
    w0 = program.add_matrix_var("W0", ms.dim)
    program.add(PsdConstraint(((w0, 1.0),), tag="psd", group=w0))

    offset = wind_injection(case) - case.p_load
    cost = add_dispatch(program, case, ms, w0, offset)
    bounds = nodal_bounds(case, wind_q=wind_q, fixed_cos_phi=fixed_cos_phi)
    add_state_constraints(program, case, ms, ((w0, 1.0),), bounds, group=w0, nodal_p=False)
    program.set_objective(cost)

    return cost


def generation_cost(solution: SdpSolution) -> float:
    """Sum of the generator cost epigraph variables, excluding any penalty term."""
    return sum(val for name, val in solution.scalars.items() if name.startswith("alpha"))


def dispatch(solution: SdpSolution, case: NetworkCase) -> np.ndarray:
    """Generator active outputs at the forecast operating point."""
    return np.array([solution.scalars[f"pg{g}"] for g in range(len(case.generators))])


def _sorted_eigvals(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.linalg.eigvalsh((w + w.T) / 2)[::-1]


def eigen_ratio(w: np.ndarray) -> float:
    """
    Ratio of the 2nd to the 3rd largest eigenvalue of a symmetric matrix.

    Returns `math.inf` when the 3rd eigenvalue is negligible relative to the largest.
    """
    if w.shape[0] < 3:
        raise RelaxationError(f"Eigenvalue ratio needs a matrix of dimension >= 3, got {w.shape}")

    lam = _sorted_eigvals(w)
    if lam[2] <= ccopf_config.EIGEN_FLOOR * lam[0]:
        return math.inf

    return float(lam[1] / lam[2])


@dataclass(frozen=True)
class VoltageSolution:  # noqa: D101
    v: np.ndarray
    rho: float
    exact: bool

    @property
    def magnitude(self) -> np.ndarray:  # noqa: D102
        return np.abs(self.v)

    @property
    def angle(self) -> np.ndarray:  # noqa: D102
        return np.angle(self.v)


def recover_voltages(
    w: np.ndarray, slack: int, threshold: float = ccopf_config.RANK_THRESHOLD
) -> VoltageSolution:
    """
    Recover the complex bus voltages from a relaxation solution matrix.

    The real `2n x 2n` matrix is folded into its complex Hermitian counterpart
    `W11 + W22 + j(W21 - W12)`, which equals `V V^H` for both the rank-1 matrix `XX^T` & its
    rotation-averaged rank-2 form. The dominant eigenpair gives `V`, rotated so that the slack bus
    (matrix position `slack`) has zero angle.
    """
    w = np.asarray(w, dtype=float)
    w = (w + w.T) / 2
    n = w.shape[0] // 2
    w_c = w[:n, :n] + w[n:, n:] + 1j * (w[n:, :n] - w[:n, n:])

    lam, vecs = np.linalg.eigh(w_c)
    if lam[-1] <= 0:
        raise RelaxationError("Solution matrix has no positive eigenvalue")

    v = math.sqrt(lam[-1]) * vecs[:, -1]
    v = v * np.exp(-1j * np.angle(v[slack]))

    rho = eigen_ratio(w) if w.shape[0] >= 3 else math.inf
    return VoltageSolution(v=v, rho=rho, exact=rho >= threshold)


def near_global_optimality(cost_unpenalized: float, cost_penalized: float) -> float:
    """Percentage ratio of the unpenalized to the penalized generation cost."""
    if cost_unpenalized <= 0 or cost_penalized <= 0:
        raise RelaxationError("Near-global optimality needs positive generation costs")

    return 100 * cost_unpenalized / cost_penalized
