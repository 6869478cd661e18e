from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ccopf import ccopf_config
from ccopf.conelib import AffineExpr, ConicProgram, LinearConstraint
from ccopf.gridlib import MatrixSet, NetworkCase
from ccopf.policylib import CorrectiveControlConfig, PolicyAssemblyError, farm_pattern
from ccopf.sdplib import WindReactive, add_base
from ccopf.uncertaintylib import GaussianSet, RectangularSet, inverse_normal_cdf

logger = logging.getLogger(__name__)


class SingularNetworkError(ValueError):  # noqa: D101
    pass


@dataclass(frozen=True, eq=False)
class PtdfMatrix:
    """
    Branch flow sensitivities to nodal injections, one row per branch & one column per bus.

    Flows are measured from the branch's from bus towards its to bus. The column of the slack bus
    is zero: an injection there is absorbed by the slack itself.
    """

    matrix: np.ndarray
    slack: int
    branches: tuple[tuple[int, int], ...]
    buses: tuple[int, ...]

    def flow_change(self, injection: np.ndarray) -> np.ndarray:
        """Branch flow change caused by the per-bus injection change."""
        return self.matrix @ np.asarray(injection, dtype=float)


def build_ptdf(case: NetworkCase) -> PtdfMatrix:
    """
    Build the power transfer distribution factors from branch reactances only.

    The DC susceptance matrix is reduced by removing the slack row & column, inverted, and padded
    back with a zero slack column.
    """
    n_l, n_b = len(case.branches), case.n_bus
    f = np.array([case.bus_index[br.from_bus] for br in case.branches], dtype=int)
    to = np.array([case.bus_index[br.to_bus] for br in case.branches], dtype=int)
    b = np.array([1 / br.x for br in case.branches])

    # Connection matrix C_ft = C_f - C_t
    rows = np.r_[np.arange(n_l), np.arange(n_l)]
    c_ft = sp.csr_matrix((np.r_[np.ones(n_l), -np.ones(n_l)], (rows, np.r_[f, to])), (n_l, n_b))
    b_f = sp.diags(b) @ c_ft
    b_bus = (c_ft.T @ b_f).toarray()

    keep = np.array([k for k in range(n_b) if k != case.slack_position], dtype=int)
    reduced = b_bus[np.ix_(keep, keep)]
    if keep.size and np.linalg.cond(reduced) > 1e12:
        raise SingularNetworkError("Reduced DC susceptance matrix is singular")

    ptdf = np.zeros((n_l, n_b))
    if keep.size:
        try:
            ptdf[:, keep] = np.linalg.solve(reduced.T, b_f.toarray()[:, keep].T).T
        except np.linalg.LinAlgError as e:
            raise SingularNetworkError("Reduced DC susceptance matrix is singular") from e

    logger.debug(f"Built {n_l}x{n_b} PTDF matrix")
    return PtdfMatrix(
        matrix=ptdf,
        slack=case.buses[case.slack_position].id,
        branches=tuple((br.from_bus, br.to_bus) for br in case.branches),
        buses=tuple(bus.id for bus in case.buses),
    )


def write_ptdf_csv(ptdf: PtdfMatrix, path: Path) -> None:  # noqa: D103
    header = ",".join(["from", "to", *(str(bus) for bus in ptdf.buses)])
    lines = [header]
    for (f, to), row in zip(ptdf.branches, ptdf.matrix):
        lines.append(",".join([str(f), str(to), *(f"{val:.12g}" for val in row)]))

    path.write_text("\n".join(lines) + "\n")


def _line_limit(case: NetworkCase, idx: int) -> float | None:
    """
    Active flow bound for the DC baseline.

    The linearized flows carry no reactive part, so an apparent-only rating is applied to the
    active flow as is. Active ratings take precedence when both are present.
    """
    br = case.branches[idx]
    if br.limit_kind.has_active:
        return br.p_limit
    if br.limit_kind.has_apparent:
        return br.s_limit
    return None


def _base_program(name: str, case: NetworkCase, ms: MatrixSet, cos_phi: float) -> ConicProgram:
    program = ConicProgram(name)
    add_base(program, case, ms, wind_q=WindReactive.FIXED, fixed_cos_phi=cos_phi)
    return program


def _injection_patterns(case: NetworkCase) -> np.ndarray:
    """Per-farm bus injection change for a unit forecast error, net of the generator response."""
    d_g = case.bus_participation
    eye = np.eye(len(case.wind_farms))
    return np.array([farm_pattern(case, unit) - d_g for unit in eye])


def assemble_ptdf_rect(
    case: NetworkCase,
    ms: MatrixSet,
    rect: RectangularSet,
    cc: CorrectiveControlConfig,
    cos_phi: float = ccopf_config.PTDF_COS_PHI,
) -> ConicProgram:
    """
    Assemble the linearized baseline over a rectangular uncertainty set.

    The forecast operating point `W0` keeps the full relaxation with wind at a fixed power factor.
    At every vertex, each generator's output shifted by its participation response must stay
    within its limits and every rated branch's flow shifted by the PTDF-propagated injection change
    must stay within its limit.
    """
    case = cc.apply(case)
    program = _base_program("ptdf-rect", case, ms, cos_phi)
    if rect.n_w == 0:
        return program
    if rect.n_w != len(case.wind_farms):
        raise PolicyAssemblyError(
            f"Uncertainty set has {rect.n_w} directions but the case has {len(case.wind_farms)}"
        )

    ptdf = build_ptdf(case)
    patterns = _injection_patterns(case)
    for v, zeta in enumerate(rect.vertices):
        group = f"v{v}"
        total = float(zeta.sum())
        for g, gen in enumerate(case.generators):
            shift = -gen.participation * total
            program.add(
                LinearConstraint(
                    AffineExpr.scalar(f"pg{g}"),
                    gen.p_min - shift,
                    gen.p_max - shift,
                    tag="ptdf_gen",
                    group=group,
                )
            )

        delta = ptdf.flow_change(zeta @ patterns)
        for idx in range(len(case.branches)):
            limit = _line_limit(case, idx)
            if limit is None:
                continue
            flow = AffineExpr.trace("W0", ms.line_active[idx])
            program.add(
                LinearConstraint(
                    flow, -limit - delta[idx], limit - delta[idx], tag="ptdf_line", group=group
                )
            )

    logger.info(f"Assembled {program}")
    return program


def _margins(case: NetworkCase, gauss: GaussianSet) -> tuple[np.ndarray, np.ndarray]:
    z = inverse_normal_cdf(1 - gauss.epsilon)
    cov = gauss.covariance
    gen = z * case.participation * math.sqrt(max(float(cov.sum()), 0.0))
    psi = build_ptdf(case).matrix @ _injection_patterns(case).T
    line = z * np.sqrt(np.clip(np.einsum("li,ij,lj->l", psi, cov, psi), 0, None))
    return gen, line


def gaussian_margins(
    case: NetworkCase, gauss: GaussianSet, cc: CorrectiveControlConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Generator & branch tightening margins used by the Gaussian baseline."""
    return _margins(cc.apply(case), gauss)


def assemble_ptdf_gauss(
    case: NetworkCase,
    ms: MatrixSet,
    gauss: GaussianSet,
    cc: CorrectiveControlConfig,
    cos_phi: float = ccopf_config.PTDF_COS_PHI,
) -> ConicProgram:
    """
    Assemble the linearized baseline over a Gaussian uncertainty set.

    Generator limits are tightened by `z d_G sqrt(1^T L 1)` and rated branch limits by
    `z sqrt(Psi^T L Psi)`, with `z` the `1 - epsilon` standard normal quantile, `L` the covariance,
    and `Psi_i` the branch's PTDF response to farm `i`'s injection net of the generator response.
    """
    case = cc.apply(case)
    program = _base_program("ptdf-gauss", case, ms, cos_phi)
    if gauss.n_w == 0 or not np.any(gauss.kappa > 0):
        return program
    if gauss.n_w != len(case.wind_farms):
        raise PolicyAssemblyError(
            f"Uncertainty set has {gauss.n_w} directions but the case has {len(case.wind_farms)}"
        )

    gen_margin, line_margin = _margins(case, gauss)
    for g, gen in enumerate(case.generators):
        program.add(
            LinearConstraint(
                AffineExpr.scalar(f"pg{g}"),
                gen.p_min + gen_margin[g],
                gen.p_max - gen_margin[g],
                tag="ptdf_gen",
                group="gauss",
            )
        )

    for idx in range(len(case.branches)):
        limit = _line_limit(case, idx)
        if limit is None:
            continue
        flow = AffineExpr.trace("W0", ms.line_active[idx])
        margin = float(line_margin[idx])
        program.add(
            LinearConstraint(flow, -limit + margin, limit - margin, tag="ptdf_line", group="gauss")
        )

    logger.info(f"Assembled {program}")
    return program
