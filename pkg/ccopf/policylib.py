"""
Piecewise affine corrective-control policies.

A policy maps forecast errors `zeta` to an operating point `W(zeta) = W0 + sum(zeta_i B_i)`, where
each direction has an upper matrix `B_i^u` used for positive deviations and a lower matrix `B_i^l`
used for negative ones, so the forecast point `W0` is represented exactly. Rectangular sets enforce
the operating constraints at the box corners; Gaussian sets work in the covariance eigenbasis and
enforce second-order-cone safe approximations per orthant.

Wind injections follow the physical sign: a unit forecast error raises the farm bus injection by
one, and the generators respond with `-d_G (1 + gamma)` so the droop rows read
`Tr{Y_k B} = e_farm,k - d_Gk (1 + gamma)`.
"""

from __future__ import annotations

import logging
import math
import typing as t
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ccopf.conelib import (
    AffineExpr,
    ConicProgram,
    LinearConstraint,
    PsdConstraint,
    SdpSolution,
    SocConstraint,
    trace_sum,
)
from ccopf.gridlib import MatrixSet, NetworkCase
from ccopf.sdplib import (
    Combination,
    NodalBounds,
    add_apparent_limits,
    add_base,
    add_state_constraints,
    dispatch,
    generation_cost,
    nodal_bounds,
    wind_injection,
)
from ccopf.uncertaintylib import GaussianSet, RectangularSet

logger = logging.getLogger(__name__)

POLICY_HEADER = "# ccopf-policy v1"
GAMMA_PREFIX = "gamma"


class PolicyAssemblyError(ValueError):  # noqa: D101
    pass


class PolicyFormatError(ValueError):  # noqa: D101
    pass


class SetpointError(ValueError):  # noqa: D101
    pass


@dataclass(frozen=True)
class CorrectiveControlConfig:
    """
    Corrective control parameters.

    `participation` holds `d_G` per generator in case order and must sum to one. `wind_cos_phi`
    optionally replaces the power factor limit of each farm. `orthant_corners` adds the mixed
    `{lower, 0, upper}` corners of every orthant to the rectangular program. `gauss_participation`
    scales the rotated generator response by `||eta_i||` ("norm") or `1^T eta_i` ("sum").
    """

    participation: tuple[float, ...]
    mu: float = 0.0
    wind_cos_phi: tuple[float, ...] | None = None
    orthant_corners: bool = True
    gauss_participation: t.Literal["norm", "sum"] = "norm"

    def __post_init__(self) -> None:
        if abs(sum(self.participation) - 1) > 1e-9:
            raise PolicyAssemblyError(
                f"Participation factors must sum to 1, got {sum(self.participation):.9f}"
            )
        if any(d < 0 for d in self.participation):
            raise PolicyAssemblyError("Participation factors must be nonnegative")
        if self.mu < 0:
            raise PolicyAssemblyError(f"Penalty weight must be nonnegative, got {self.mu}")
        if self.wind_cos_phi is not None and any(not (0 < c <= 1) for c in self.wind_cos_phi):
            raise PolicyAssemblyError("Wind power factors must be in (0, 1]")
        if self.gauss_participation not in ("norm", "sum"):
            raise PolicyAssemblyError(
                f"Unknown Gaussian participation scaling '{self.gauss_participation}'"
            )

    def tau(self, case: NetworkCase) -> np.ndarray:
        """Per-farm reactive-to-active ratio at the power factor limit."""
        return np.array([farm.tau for farm in self.apply(case).wind_farms])

    def with_mu(self, mu: float) -> CorrectiveControlConfig:  # noqa: D102
        return replace(self, mu=mu)

    def apply(self, case: NetworkCase) -> NetworkCase:
        """Return the case with these participation factors & wind power factors applied."""
        out = case.with_participation(self.participation)
        if self.wind_cos_phi is not None:
            if len(self.wind_cos_phi) != len(case.wind_farms):
                raise PolicyAssemblyError(
                    f"Expected {len(case.wind_farms)} wind power factors, got "
                    f"{len(self.wind_cos_phi)}"
                )
            farms = [replace(f, cos_phi=c) for f, c in zip(case.wind_farms, self.wind_cos_phi)]
            out = out.with_wind_farms(farms)

        return out


def farm_pattern(case: NetworkCase, weights: np.ndarray) -> np.ndarray:
    """Spread per-farm weights onto the buses, `sum(w_i e_farm_i)`."""
    out = np.zeros(case.n_bus)
    np.add.at(out, case.farm_positions, np.asarray(weights, dtype=float))
    return out


def droop_constraint_rows(
    case: NetworkCase,
    ms: MatrixSet,
    combination: Combination,
    direction: np.ndarray,
    response: float = 1.0,
    gamma: str | None = None,
    group: str = "",
    tag: str = "droop",
) -> list[LinearConstraint]:
    """
    Build the per-bus equalities tying the sensitivity combination to the corrective response.

    For every bus `k`: `Tr{Y_k B} = direction_k - response * d_Gk * (1 + gamma)`, where `B` is the
    weighted sum of matrices in `combination` and `direction` is the per-bus wind injection
    pattern. Without `gamma` the loss slack is fixed at zero.
    """
    d_g = case.bus_participation
    rows = []
    for k in range(case.n_bus):
        expr = trace_sum(combination, ms.bus_active[k])
        coef = response * d_g[k]
        if gamma is not None and coef != 0:
            expr = expr + AffineExpr.scalar(gamma, coef)
        rhs = float(direction[k] - coef)
        rows.append(LinearConstraint(expr, rhs, rhs, tag=tag, group=group))

    return rows


def _check_farms(case: NetworkCase, n_w: int) -> None:
    if n_w != len(case.wind_farms):
        raise PolicyAssemblyError(
            f"Uncertainty set has {n_w} directions but the case has {len(case.wind_farms)} farms"
        )


def _selection(zeta: np.ndarray, prefix: str = "B") -> Combination:
    """Piecewise selection: upper matrices for positive components, lower for negative ones."""
    return tuple(
        (f"{prefix}{i}{'u' if z > 0 else 'l'}", float(z)) for i, z in enumerate(zeta) if z != 0
    )


def assemble_cc_rect(
    case: NetworkCase, ms: MatrixSet, rect: RectangularSet, cc: CorrectiveControlConfig
) -> ConicProgram:
    """
    Assemble the chance-constrained program over a rectangular uncertainty set.

    Every vertex `v` gets the operating point `W_v = W0 + sum(zeta_vi B_i^{u|l})` with the full set
    of operating constraints at the vertex wind infeed, a PSD requirement, and link rows tying the
    change in nodal injections to the wind deviation and the generator response scaled by
    `1 + gamma_v`. With orthant corners enabled the mixed corners get the operating constraints &
    PSD requirement as well. The objective is the generation cost plus `mu * sum(gamma)`.
    """
    case = cc.apply(case)
    _check_farms(case, rect.n_w)

    program = ConicProgram("cc-rect")
    cost = add_base(program, case, ms)
    if rect.n_w == 0:
        logger.info(f"Assembled {program} (no uncertain injections)")
        return program

    for i in range(rect.n_w):
        program.add_matrix_var(f"B{i}u", ms.dim)
        program.add_matrix_var(f"B{i}l", ms.dim)

    gammas = []
    for v, zeta in enumerate(rect.vertices):
        group = f"v{v}"
        combo = (("W0", 1.0), *_selection(zeta))
        add_state_constraints(program, case, ms, combo, nodal_bounds(case, zeta), group)
        program.add(PsdConstraint(combo, tag="psd", group=group))

        total = float(zeta.sum())
        gamma = None
        if abs(total) > 1e-12:
            gamma = program.add_scalar_var(f"{GAMMA_PREFIX}_v{v}")
            gammas.append(gamma)
        else:
            logger.warning(f"Vertex {v} has zero net deviation, its loss slack is fixed at 0")

        rows = droop_constraint_rows(
            case,
            ms,
            _selection(zeta),
            direction=farm_pattern(case, zeta),
            response=total,
            gamma=gamma,
            group=group,
            tag="link",
        )
        for row in rows:
            program.add(row)

    if cc.orthant_corners:
        vertex_keys = {tuple(z.tolist()) for z in rect.vertices}
        n_corner = 0
        for zeta in rect.orthant_corners():
            if tuple(zeta.tolist()) in vertex_keys or not zeta.any():
                continue
            group = f"c{n_corner}"
            combo = (("W0", 1.0), *_selection(zeta))
            add_state_constraints(program, case, ms, combo, nodal_bounds(case, zeta), group)
            program.add(PsdConstraint(combo, tag="psd", group=group))
            n_corner += 1
        logger.debug(f"Added {n_corner} orthant corner(s)")

    penalty = sum((AffineExpr.scalar(g, cc.mu) for g in gammas), AffineExpr())
    program.set_objective(cost + penalty)
    logger.info(f"Assembled {program}")
    return program


@dataclass(frozen=True)
class _RowSpec:
    """A two-sided operating row `lo(c) <= Tr{A W(c)} <= hi(c)` with bounds affine in `c`."""

    tag: str
    coef: sp.csr_matrix
    lo: float
    hi: float
    d_lo: np.ndarray
    d_hi: np.ndarray


def _gaussian_rows(
    case: NetworkCase, ms: MatrixSet, directions: list[np.ndarray]
) -> list[_RowSpec]:
    base = nodal_bounds(case)
    shifts = [nodal_bounds(case, eta) for eta in directions]

    def _deriv(get: t.Callable[[NodalBounds], np.ndarray], k: int) -> np.ndarray:
        return np.array([get(s)[k] - get(base)[k] for s in shifts])

    none = np.zeros(len(directions))
    rows = []
    for k, bus in enumerate(case.buses):
        rows.append(
            _RowSpec(
                "p_bounds",
                ms.bus_active[k],
                base.p_lo[k],
                base.p_hi[k],
                _deriv(lambda b: b.p_lo, k),
                _deriv(lambda b: b.p_hi, k),
            )
        )
        rows.append(
            _RowSpec(
                "q_bounds",
                ms.bus_reactive[k],
                base.q_lo[k],
                base.q_hi[k],
                _deriv(lambda b: b.q_lo, k),
                _deriv(lambda b: b.q_hi, k),
            )
        )
        rows.append(
            _RowSpec("v_bounds", ms.bus_voltage[k], bus.v_min**2, bus.v_max**2, none, none)
        )
    for idx, br in enumerate(case.branches):
        if br.limit_kind.has_active:
            rows.append(
                _RowSpec("line_p", ms.line_active[idx], -br.p_limit, br.p_limit, none, none)
            )

    return rows


def assemble_cc_gauss(
    case: NetworkCase, ms: MatrixSet, gauss: GaussianSet, cc: CorrectiveControlConfig
) -> ConicProgram:
    """
    Assemble the chance-constrained program over a Gaussian uncertainty set.

    Work happens in the eigenbasis `c = eta^T zeta`. Every axis with `kappa_i > 0` gets rotated
    sensitivities `B_i^u`, `B_i^l` with droop rows along the rotated wind pattern and one loss slack
    per (axis, side). For every orthant of sign patterns the operating rows become second-order
    cones `||kappa_i (Tr{A B_i} - dbound_i)|| <= bound - Tr{A W0}`, on both sides of each row.
    End-point PSD requirements `W0 +/- kappa_i B_i` and apparent flow limits at the corners of the
    rectangle enclosing the ellipsoid complete the program.
    """
    case = cc.apply(case)
    _check_farms(case, gauss.n_w)

    program = ConicProgram("cc-gauss")
    cost = add_base(program, case, ms)

    active = [i for i in range(gauss.n_w) if gauss.kappa[i] > 0]
    if not active:
        logger.info(f"Assembled {program} (zero covariance)")
        return program

    gammas = []
    directions = [gauss.eigvecs[:, i] for i in active]
    for i, eta in zip(active, directions):
        if cc.gauss_participation == "norm":
            scale = float(np.linalg.norm(eta))
        else:
            scale = float(eta.sum())
        pattern = farm_pattern(case, eta)

        for side in ("u", "l"):
            name = program.add_matrix_var(f"B{i}{side}", ms.dim)
            gamma = None
            if abs(scale) > 1e-12:
                gamma = program.add_scalar_var(f"{GAMMA_PREFIX}_{i}{side}")
                gammas.append(gamma)
            else:
                logger.warning(f"Axis {i} has no net generator response, its loss slack is fixed")

            rows = droop_constraint_rows(
                case, ms, ((name, 1.0),), pattern, scale, gamma, group=f"a{i}{side}"
            )
            for row in rows:
                program.add(row)

        kappa = float(gauss.kappa[i])
        program.add(PsdConstraint((("W0", 1.0), (f"B{i}u", kappa)), tag="psd", group=f"a{i}u"))
        program.add(PsdConstraint((("W0", 1.0), (f"B{i}l", -kappa)), tag="psd", group=f"a{i}l"))

    specs = _gaussian_rows(case, ms, directions)
    for q in range(2 ** len(active)):
        group = f"q{q}"
        signs = [1 if (q >> pos) & 1 else -1 for pos in range(len(active))]
        sel = [f"B{i}{'u' if s > 0 else 'l'}" for i, s in zip(active, signs)]

        for spec in specs:
            at_w0 = AffineExpr.trace("W0", spec.coef)
            for side, bound, deriv in (("hi", spec.hi, spec.d_hi), ("lo", spec.lo, spec.d_lo)):
                terms = tuple(
                    AffineExpr.trace(name, spec.coef, gauss.kappa[i])
                    - float(gauss.kappa[i] * deriv[pos])
                    for pos, (i, name) in enumerate(zip(active, sel))
                )
                slack = (-at_w0 + bound) if side == "hi" else (at_w0 - bound)
                program.add(SocConstraint(terms, slack, tag=spec.tag, group=group))

        offsets = tuple((name, s * float(gauss.kappa[i])) for i, s, name in zip(active, signs, sel))
        corner = (("W0", 1.0), *offsets)
        add_apparent_limits(program, case, ms, corner, group=group)

    penalty = sum((AffineExpr.scalar(g, cc.mu) for g in gammas), AffineExpr())
    program.set_objective(cost + penalty)
    logger.info(f"Assembled {program}")
    return program


@dataclass(frozen=True, eq=False)
class AffinePolicySolution:
    """
    A solved policy.

    `b_up` & `b_lo` are indexed by farm for rectangular sets and by eigen-axis for Gaussian sets,
    where `rotation` holds the eigenvectors. Policies without uncertainty handling (`set_kind`
    "none") carry only `w0`. `objective` is the generation cost and `penalty` the `mu * sum(gamma)`
    term.
    """

    w0: np.ndarray
    gen_p: np.ndarray
    set_kind: t.Literal["none", "rect", "gauss"] = "none"
    b_up: tuple[np.ndarray, ...] = ()
    b_lo: tuple[np.ndarray, ...] = ()
    gamma: dict[str, float] = field(default_factory=dict)
    objective: float = math.nan
    penalty: float = 0.0
    mu: float = 0.0
    mode: str = ""
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    rotation: np.ndarray | None = None
    kappa: np.ndarray | None = None

    @property
    def n_directions(self) -> int:  # noqa: D102
        return len(self.b_up)

    @classmethod
    def from_sdp(
        cls,
        solution: SdpSolution,
        case: NetworkCase,
        uncertainty: RectangularSet | GaussianSet | None = None,
        mu: float = 0.0,
        mode: str = "",
    ) -> AffinePolicySolution:
        """Collect a policy from an optimal program solution."""
        if not solution.is_optimal:
            raise SetpointError(f"Cannot build a policy from a '{solution.status}' solution")

        w0 = solution.matrices["W0"]
        zeros = np.zeros_like(w0)
        gamma = {k: v for k, v in solution.scalars.items() if k.startswith(GAMMA_PREFIX)}
        common: dict[str, t.Any] = {
            "w0": w0,
            "gen_p": dispatch(solution, case),
            "gamma": gamma,
            "objective": generation_cost(solution),
            "penalty": mu * sum(gamma.values()),
            "mu": mu,
            "mode": mode,
        }

        if uncertainty is None:
            return cls(set_kind="none", **common)

        n = uncertainty.n_w
        b_up = tuple(solution.matrices.get(f"B{i}u", zeros) for i in range(n))
        b_lo = tuple(solution.matrices.get(f"B{i}l", zeros) for i in range(n))
        if isinstance(uncertainty, RectangularSet):
            return cls(
                set_kind="rect",
                b_up=b_up,
                b_lo=b_lo,
                lower=uncertainty.lower,
                upper=uncertainty.upper,
                **common,
            )

        return cls(
            set_kind="gauss",
            b_up=b_up,
            b_lo=b_lo,
            rotation=uncertainty.eigvecs,
            kappa=uncertainty.kappa,
            **common,
        )

    def coordinates(self, zeta: np.ndarray) -> np.ndarray:
        """Map forecast errors to policy coordinates (the eigenbasis for Gaussian policies)."""
        zeta = np.asarray(zeta, dtype=float)
        if self.rotation is not None:
            return self.rotation.T @ zeta
        return zeta

    def in_set(self, zeta: np.ndarray, tol: float = 1e-9) -> bool:
        """Check whether `zeta` lies within the set the policy was built for."""
        if self.set_kind == "rect":
            assert self.lower is not None and self.upper is not None
            return bool(np.all(zeta >= self.lower - tol) and np.all(zeta <= self.upper + tol))
        if self.set_kind == "gauss":
            assert self.kappa is not None
            return bool(np.all(np.abs(self.coordinates(zeta)) <= self.kappa + tol))
        return True


def evaluate_policy(sol: AffinePolicySolution, zeta: np.ndarray) -> np.ndarray:
    """
    Evaluate the piecewise affine policy at the provided forecast errors.

    Errors outside the policy's uncertainty set are evaluated anyway, with a warning.
    """
    zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
    if sol.set_kind == "none":
        return sol.w0.copy()

    if zeta.shape != (sol.n_directions,):
        raise PolicyAssemblyError(
            f"Forecast error has shape {zeta.shape}, policy expects ({sol.n_directions},)"
        )
    if not sol.in_set(zeta):
        logger.warning(f"Evaluating policy outside its uncertainty set at zeta={zeta}")

    w = sol.w0.copy()
    for i, c in enumerate(sol.coordinates(zeta)):
        if c >= 0:
            w += c * sol.b_up[i]
        else:
            w += c * sol.b_lo[i]

    return w


def solution_matrices(sol: AffinePolicySolution) -> dict[str, np.ndarray]:
    """
    Operating points whose rank is diagnosed: `W0` plus every vertex or axis end-point.

    Rectangular vertices are labelled `W1..W2^n` in vertex order; Gaussian end-points are labelled
    `W<i>+` & `W<i>-` per axis.
    """
    out = {"W0": sol.w0}
    if sol.set_kind == "rect":
        assert sol.lower is not None and sol.upper is not None
        rect = RectangularSet(sol.lower, sol.upper)
        for v, zeta in enumerate(rect.vertices, start=1):
            out[f"W{v}"] = evaluate_policy(sol, zeta)
    elif sol.set_kind == "gauss":
        assert sol.kappa is not None
        for i, kappa in enumerate(sol.kappa):
            if kappa <= 0:
                continue
            out[f"W{i + 1}+"] = sol.w0 + kappa * sol.b_up[i]
            out[f"W{i + 1}-"] = sol.w0 - kappa * sol.b_lo[i]

    return out


@dataclass(frozen=True, eq=False)
class CorrectiveSetpoints:
    """Device set-points at one forecast error realization, all in p.u."""

    gen_p: np.ndarray
    gen_v: np.ndarray
    wind_p: np.ndarray
    wind_q: np.ndarray
    clipped: bool = False


def extract_setpoints(
    sol: AffinePolicySolution, case: NetworkCase, ms: MatrixSet, zeta: np.ndarray | None = None
) -> CorrectiveSetpoints:
    """
    Derive generator & wind farm set-points from the policy at `zeta` (the forecast by default).

    Generator outputs follow the change in their bus's active injection, shared by participation
    (equally if none) among the generators at that bus. Voltage set-points are `sqrt(Tr{M_k W})`.
    Wind reactive injections come from the reactive balance at farm buses and are clipped to the
    power factor capability, with a warning.
    """
    n_w = len(case.wind_farms)
    zeta = np.zeros(n_w) if zeta is None else np.atleast_1d(np.asarray(zeta, dtype=float))
    if zeta.shape != (n_w,):
        raise SetpointError(f"Forecast error has shape {zeta.shape}, expected ({n_w},)")

    w = evaluate_policy(sol, zeta) if sol.set_kind != "none" else sol.w0
    p_inj = ms.traces("p", w)
    q_inj = ms.traces("q", w)
    v_sq = ms.traces("v", w)

    wind_p = np.array([f.forecast for f in case.wind_farms]) + zeta
    p_w_bus = wind_injection(case, zeta)

    base_inj = ms.traces("p", sol.w0)
    delta_bus = p_inj - base_inj - (p_w_bus - wind_injection(case))
    gen_p = np.array(sol.gen_p, dtype=float)
    for k in np.unique(case.gen_positions):
        members = np.flatnonzero(case.gen_positions == k)
        weights = case.participation[members]
        if weights.sum() > 0:
            weights = weights / weights.sum()
        else:
            weights = np.full(members.size, 1 / members.size)
        gen_p[members] += weights * delta_bus[k]

    if np.any(v_sq < -1e-9):
        bad = int(np.argmin(v_sq))
        raise SetpointError(f"Negative squared voltage {v_sq[bad]:.3e} at bus {case.buses[bad].id}")
    gen_v = np.sqrt(np.clip(v_sq[case.gen_positions], 0, None))

    wind_q = np.zeros(n_w)
    clipped = False
    for idx, farm in enumerate(case.wind_farms):
        k = case.farm_positions[idx]
        share_mask = case.farm_positions == k
        total_p = wind_p[share_mask].sum()
        share = wind_p[idx] / total_p if total_p > 0 else 1 / share_mask.sum()
        q = (q_inj[k] + case.q_load[k]) * share

        cap = farm.tau * max(wind_p[idx], 0.0)
        if abs(q) > cap + 1e-6:
            logger.warning(
                f"Wind farm at bus {farm.bus} reactive set-point {q:.4f} exceeds capability "
                f"{cap:.4f}, clipping"
            )
            clipped = True
        wind_q[idx] = float(np.clip(q, -cap, cap))

    return CorrectiveSetpoints(
        gen_p=gen_p, gen_v=gen_v, wind_p=wind_p, wind_q=wind_q, clipped=clipped
    )


def _write_block(lines: list[str], kind: str, name: str, arr: np.ndarray) -> None:
    if kind == "matrix":
        lines.append(f"@ matrix {name} {arr.shape[0]} {arr.shape[1]}")
        lines.extend(" ".join(repr(float(x)) for x in row) for row in arr)
    else:
        lines.append(f"@ vector {name} {arr.size}")
        lines.append(" ".join(repr(float(x)) for x in arr))


def write_policy(
    sol: AffinePolicySolution, path: Path, provenance: dict[str, str] | None = None
) -> None:
    """
    Write the policy as plain text.

    The file opens with the `# ccopf-policy v1` marker followed by `# key: value` provenance
    lines, then `@ matrix <name> <rows> <cols>` & `@ vector <name> <n>` blocks in row-major order
    and a `@ gamma <n>` block of `<name> <value>` lines.
    """
    header = {
        "set_kind": sol.set_kind,
        "mode": sol.mode,
        "mu": repr(sol.mu),
        "objective": repr(sol.objective),
        "penalty": repr(sol.penalty),
        **(provenance or {}),
    }
    lines = [POLICY_HEADER]
    lines.extend(f"# {key}: {val}" for key, val in header.items())

    _write_block(lines, "matrix", "W0", sol.w0)
    _write_block(lines, "vector", "gen_p", sol.gen_p)
    for i, (up, lo) in enumerate(zip(sol.b_up, sol.b_lo)):
        _write_block(lines, "matrix", f"B{i}u", up)
        _write_block(lines, "matrix", f"B{i}l", lo)
    for name, arr in (
        ("lower", sol.lower),
        ("upper", sol.upper),
        ("kappa", sol.kappa),
    ):
        if arr is not None:
            _write_block(lines, "vector", name, arr)
    if sol.rotation is not None:
        _write_block(lines, "matrix", "rotation", sol.rotation)

    lines.append(f"@ gamma {len(sol.gamma)}")
    lines.extend(f"{name} {val!r}" for name, val in sol.gamma.items())

    path.write_text("\n".join(lines) + "\n")
    logger.info(f"Wrote {sol.set_kind} policy to '{path}'")


def read_policy(path: Path) -> AffinePolicySolution:
    """Read a policy written by `write_policy`."""
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != POLICY_HEADER:
        raise PolicyFormatError(f"'{path}' is missing the '{POLICY_HEADER}' marker")

    header: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    gamma: dict[str, float] = {}
    idx = 1
    try:
        while idx < len(lines) and lines[idx].startswith("#"):
            key, _, val = lines[idx][1:].partition(":")
            header[key.strip()] = val.strip()
            idx += 1

        while idx < len(lines):
            line = lines[idx].strip()
            idx += 1
            if not line:
                continue

            parts = line.split()
            if parts[0] != "@":
                raise PolicyFormatError(f"'{path}' line {idx}: expected a block header")
            match parts[1:]:
                case ["matrix", name, rows, cols]:
                    n_rows, n_cols = int(rows), int(cols)
                    block = [lines[idx + r].split() for r in range(n_rows)]
                    arrays[name] = np.array(block, dtype=float).reshape(n_rows, n_cols)
                    idx += n_rows
                case ["vector", name, size]:
                    n = int(size)
                    vals = lines[idx].split() if n else []
                    arrays[name] = np.array(vals, dtype=float).reshape(n)
                    idx += 1
                case ["gamma", size]:
                    for r in range(int(size)):
                        name, val = lines[idx + r].split()
                        gamma[name] = float(val)
                    idx += int(size)
                case _:
                    raise PolicyFormatError(f"'{path}' line {idx}: unknown block {line!r}")
    except (ValueError, IndexError) as e:
        if isinstance(e, PolicyFormatError):
            raise
        raise PolicyFormatError(f"'{path}' is malformed near line {idx}") from e

    set_kind = header.get("set_kind", "none")
    if set_kind not in ("none", "rect", "gauss"):
        raise PolicyFormatError(f"'{path}' has unknown set kind '{set_kind}'")
    if "W0" not in arrays or "gen_p" not in arrays:
        raise PolicyFormatError(f"'{path}' is missing the W0 or gen_p block")

    n = sum(1 for name in arrays if name.startswith("B") and name.endswith("u"))
    try:
        b_up = tuple(arrays[f"B{i}u"] for i in range(n))
        b_lo = tuple(arrays[f"B{i}l"] for i in range(n))
    except KeyError as e:
        raise PolicyFormatError(f"'{path}' has an incomplete sensitivity block set") from e

    return AffinePolicySolution(
        w0=arrays["W0"],
        gen_p=arrays["gen_p"],
        set_kind=t.cast(t.Literal["none", "rect", "gauss"], set_kind),
        b_up=b_up,
        b_lo=b_lo,
        gamma=gamma,
        objective=float(header.get("objective", "nan")),
        penalty=float(header.get("penalty", "0")),
        mu=float(header.get("mu", "0")),
        mode=header.get("mode", ""),
        lower=arrays.get("lower"),
        upper=arrays.get("upper"),
        rotation=arrays.get("rotation"),
        kappa=arrays.get("kappa"),
    )
