"""
Solver-agnostic conic program representation.

Programs are built from symmetric matrix variables & scalar variables. Every scalar quantity is
an `AffineExpr`: a constant plus scalar terms plus trace terms `Tr{A W}`. Constraints come in four
flavors: two-sided linear rows, small LMI blocks of affine entries, second-order cones over affine
entries, and PSD requirements on a weighted sum of matrix variables.

`solve` lowers the program onto cvxpy; `write_sdpa` exports it in the SDPA sparse text format.
"""

from __future__ import annotations

import logging
import math
import time
import typing as t
from collections import Counter
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

import cvxpy as cp
import numpy as np
import scipy.sparse as sp

from ccopf import ccopf_config

logger = logging.getLogger(__name__)


class ProgramStructureError(ValueError):  # noqa: D101
    pass


@dataclass(frozen=True)
class MatrixVar:  # noqa: D101
    name: str
    dim: int


@dataclass(frozen=True)
class AffineExpr:
    """`const + sum(c * scalar) + sum(Tr{A W})`, with trace coefficients keyed by variable name."""

    const: float = 0.0
    scalars: t.Mapping[str, float] = field(default_factory=dict)
    traces: t.Mapping[str, sp.csr_matrix] = field(default_factory=dict)

    @classmethod
    def constant(cls, value: float) -> AffineExpr:  # noqa: D102
        return cls(const=float(value))

    @classmethod
    def scalar(cls, name: str, coef: float = 1.0) -> AffineExpr:  # noqa: D102
        return cls(scalars={name: float(coef)})

    @classmethod
    def trace(  # noqa: D102
        cls, var: str, coef_matrix: sp.spmatrix, scale: float = 1.0
    ) -> AffineExpr:
        return cls(traces={var: sp.csr_matrix(coef_matrix * scale)})

    def __add__(self, other: AffineExpr | float) -> AffineExpr:
        if not isinstance(other, AffineExpr):
            return AffineExpr(self.const + float(other), self.scalars, self.traces)

        scalars = dict(self.scalars)
        for name, coef in other.scalars.items():
            scalars[name] = scalars.get(name, 0.0) + coef
        traces = dict(self.traces)
        for name, mat in other.traces.items():
            traces[name] = sp.csr_matrix(traces[name] + mat) if name in traces else mat

        return AffineExpr(self.const + other.const, scalars, traces)

    def __radd__(self, other: float) -> AffineExpr:
        return self + other

    def __mul__(self, factor: float) -> AffineExpr:
        factor = float(factor)
        return AffineExpr(
            self.const * factor,
            {name: coef * factor for name, coef in self.scalars.items()},
            {name: sp.csr_matrix(mat * factor) for name, mat in self.traces.items()},
        )

    def __rmul__(self, factor: float) -> AffineExpr:
        return self * factor

    def __neg__(self) -> AffineExpr:
        return self * -1.0

    def __sub__(self, other: AffineExpr | float) -> AffineExpr:
        return self + (-other)

    def evaluate(
        self, matrices: t.Mapping[str, np.ndarray], scalars: t.Mapping[str, float]
    ) -> float:
        """Evaluate the expression at the provided variable values."""
        total = self.const
        total += sum(coef * scalars[name] for name, coef in self.scalars.items())
        for name, mat in self.traces.items():
            total += float(mat.multiply(matrices[name]).sum())

        return total


def trace_sum(var_weights: t.Iterable[tuple[str, float]], coef_matrix: sp.spmatrix) -> AffineExpr:
    """Build `Tr{A (sum_j w_j W_j)}` as a single expression."""
    expr = AffineExpr()
    for var, weight in var_weights:
        if weight != 0:
            expr = expr + AffineExpr.trace(var, coef_matrix, weight)

    return expr


@dataclass(frozen=True)
class LinearConstraint:
    """`lower <= expr <= upper`; an equality when both bounds coincide."""

    expr: AffineExpr
    lower: float
    upper: float
    tag: str
    group: str = ""

    @property
    def is_equality(self) -> bool:  # noqa: D102
        return self.lower == self.upper


@dataclass(frozen=True)
class LmiConstraint:
    """Square block of affine entries, constrained PSD (`sense=1`) or NSD (`sense=-1`)."""

    block: tuple[tuple[AffineExpr, ...], ...]
    sense: int
    tag: str
    group: str = ""


@dataclass(frozen=True)
class SocConstraint:
    """`||terms||_2 <= bound`."""

    terms: tuple[AffineExpr, ...]
    bound: AffineExpr
    tag: str
    group: str = ""


@dataclass(frozen=True)
class PsdConstraint:
    """`sum(w_j W_j) >= 0` in the semidefinite sense."""

    combination: tuple[tuple[str, float], ...]
    tag: str
    group: str = ""


Constraint: t.TypeAlias = LinearConstraint | LmiConstraint | SocConstraint | PsdConstraint


class ConicProgram:
    """
    A minimization problem over symmetric matrix & scalar variables.

    Variables must be declared before they are referenced; every added constraint is checked
    against the declared variables, trace coefficient matrices must be symmetric with matching
    dimensions, and LMI blocks must be square.
    """

    matrix_vars: dict[str, MatrixVar]
    scalar_vars: list[str]
    constraints: list[Constraint]
    objective: AffineExpr

    def __init__(self, name: str = "program") -> None:
        self.name = name
        self.matrix_vars = {}
        self.scalar_vars = []
        self.constraints = []
        self.objective = AffineExpr()

    def __str__(self) -> str:
        kinds = Counter(type(c).__name__ for c in self.constraints)
        return (
            f"{self.name}: {len(self.matrix_vars)} matrix vars, {len(self.scalar_vars)} scalars, "
            f"{dict(kinds)}"
        )

    def add_matrix_var(self, name: str, dim: int) -> str:  # noqa: D102
        if name in self.matrix_vars or name in self.scalar_vars:
            raise ProgramStructureError(f"Variable '{name}' declared twice")
        self.matrix_vars[name] = MatrixVar(name, dim)
        return name

    def add_scalar_var(self, name: str) -> str:  # noqa: D102
        if name in self.matrix_vars or name in self.scalar_vars:
            raise ProgramStructureError(f"Variable '{name}' declared twice")
        self.scalar_vars.append(name)
        return name

    def _check_expr(self, expr: AffineExpr) -> None:
        for name in expr.scalars:
            if name not in self.scalar_vars:
                raise ProgramStructureError(f"Unknown scalar variable '{name}'")
        for name, mat in expr.traces.items():
            if name not in self.matrix_vars:
                raise ProgramStructureError(f"Unknown matrix variable '{name}'")
            dim = self.matrix_vars[name].dim
            if mat.shape != (dim, dim):
                raise ProgramStructureError(
                    f"Trace coefficient of shape {mat.shape} does not match '{name}' ({dim}x{dim})"
                )
            if mat.nnz and abs(mat - mat.T).max() > 1e-12 * max(abs(mat).max(), 1.0):
                raise ProgramStructureError(f"Trace coefficient for '{name}' is not symmetric")

    def add(self, constraint: Constraint) -> None:
        """Validate & append a constraint."""
        match constraint:
            case LinearConstraint(expr=expr, lower=lo, upper=hi):
                if lo > hi:
                    # Kept so the backend reports infeasibility rather than failing at assembly
                    logger.debug(f"Constraint '{constraint.tag}' has crossed bounds ({lo}, {hi})")
                self._check_expr(expr)
            case LmiConstraint(block=block):
                if any(len(row) != len(block) for row in block):
                    raise ProgramStructureError(f"LMI '{constraint.tag}' is not square")
                for row in block:
                    for entry in row:
                        self._check_expr(entry)
            case SocConstraint(terms=terms, bound=bound):
                for entry in (*terms, bound):
                    self._check_expr(entry)
            case PsdConstraint(combination=combination):
                for name, _ in combination:
                    if name not in self.matrix_vars:
                        raise ProgramStructureError(f"Unknown matrix variable '{name}'")

        self.constraints.append(constraint)

    def set_objective(self, objective: AffineExpr) -> None:  # noqa: D102
        self._check_expr(objective)
        self.objective = objective

    def count(
        self, kind: type | None = None, tag: str | None = None, group: str | None = None
    ) -> int:
        """Count constraints matching the provided type, tag, and group filters."""
        return sum(
            (kind is None or isinstance(c, kind))
            and (tag is None or c.tag == tag)
            and (group is None or c.group == group)
            for c in self.constraints
        )

    def signature(self) -> list[tuple[str, str, str]]:
        """Sorted `(type, tag, group)` multiset describing the program's structure."""
        return sorted((type(c).__name__, c.tag, c.group) for c in self.constraints)

    def linear_residuals(self, solution: SdpSolution) -> dict[int, float]:
        """
        Bound violation of each linear constraint at the provided solution, keyed by index.

        Positive values are violations, negative values are slack.
        """
        out = {}
        for idx, c in enumerate(self.constraints):
            if not isinstance(c, LinearConstraint):
                continue
            val = c.expr.evaluate(solution.matrices, solution.scalars)
            out[idx] = max(c.lower - val, val - c.upper)

        return out


class SolverStatus(StrEnum):  # noqa: D101
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical-failure"


@dataclass(frozen=True)
class SolverTolerances:  # noqa: D101
    feasibility: float = ccopf_config.SOLVER_FEAS_TOL
    gap: float = ccopf_config.SOLVER_GAP_TOL
    max_iter: int = ccopf_config.SOLVER_MAX_ITER
    solver: str = ccopf_config.SOLVER

    def solver_options(self) -> dict[str, t.Any]:
        """Translate the tolerances into keyword arguments understood by the configured solver."""
        match self.solver.upper():
            case "CLARABEL":
                return {
                    "tol_feas": self.feasibility,
                    "tol_gap_abs": self.gap,
                    "tol_gap_rel": self.gap,
                    "max_iter": self.max_iter,
                }
            case "SCS":
                return {
                    "eps_abs": self.feasibility,
                    "eps_rel": self.gap,
                    "max_iters": self.max_iter,
                }
            case "MOSEK":
                return {
                    "mosek_params": {
                        "MSK_DPAR_INTPNT_CO_TOL_PFEAS": self.feasibility,
                        "MSK_DPAR_INTPNT_CO_TOL_DFEAS": self.feasibility,
                        "MSK_DPAR_INTPNT_CO_TOL_REL_GAP": self.gap,
                        "MSK_IPAR_INTPNT_MAX_ITERATIONS": self.max_iter,
                    }
                }
            case "CVXOPT":
                return {
                    "abstol": self.gap,
                    "reltol": self.gap,
                    "feastol": self.feasibility,
                    "max_iters": self.max_iter,
                }
            case _:
                return {}


@dataclass(frozen=True)
class SolveStats:  # noqa: D101
    solver: str
    iterations: int | None
    wall_time: float
    message: str = ""


@dataclass(frozen=True)
class SdpSolution:  # noqa: D101
    matrices: dict[str, np.ndarray]
    scalars: dict[str, float]
    objective_value: float
    status: SolverStatus
    stats: SolveStats

    @property
    def is_optimal(self) -> bool:  # noqa: D102
        return self.status == SolverStatus.OPTIMAL

    def value(self, expr: AffineExpr) -> float:  # noqa: D102
        return expr.evaluate(self.matrices, self.scalars)


class _Layout:
    """Column offsets of every variable in the flattened vector `x`."""

    def __init__(self, program: ConicProgram) -> None:
        self.offsets: dict[str, int] = {}
        pos = 0
        for name, var in program.matrix_vars.items():
            self.offsets[name] = pos
            pos += var.dim**2
        for name in program.scalar_vars:
            self.offsets[name] = pos
            pos += 1
        self.size = pos
        self.dims = {name: var.dim for name, var in program.matrix_vars.items()}

    def compile(self, exprs: t.Sequence[AffineExpr]) -> tuple[sp.csr_matrix, np.ndarray]:
        """Lower the expressions into a sparse coefficient matrix & a constant vector."""
        rows: list[np.ndarray] = []
        cols: list[np.ndarray] = []
        vals: list[np.ndarray] = []
        consts = np.zeros(len(exprs))

        for idx, expr in enumerate(exprs):
            consts[idx] = expr.const
            for name, coef in expr.scalars.items():
                rows.append(np.array([idx]))
                cols.append(np.array([self.offsets[name]]))
                vals.append(np.array([coef]))
            for name, mat in expr.traces.items():
                coo = mat.tocoo()
                # Column-major flattening of the matrix variable
                flat = self.offsets[name] + coo.row + coo.col * self.dims[name]
                rows.append(np.full(coo.nnz, idx))
                cols.append(flat)
                vals.append(coo.data)

        if rows:
            mat = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(len(exprs), self.size),
            )
        else:
            mat = sp.csr_matrix((len(exprs), self.size))

        return mat, consts


def _lower(program: ConicProgram) -> tuple[cp.Problem, dict[str, cp.Variable], cp.Variable | None]:
    """Translate the program into a cvxpy problem."""
    layout = _Layout(program)
    mats = {
        name: cp.Variable((var.dim, var.dim), symmetric=True, name=name)
        for name, var in program.matrix_vars.items()
    }
    scalars = cp.Variable(len(program.scalar_vars), name="scalars") if program.scalar_vars else None

    parts = [
        cp.reshape(mats[name], (var.dim**2,), order="F")
        for name, var in program.matrix_vars.items()
    ]
    if scalars is not None:
        parts.append(scalars)
    x = cp.hstack(parts) if len(parts) > 1 else parts[0]

    cons: list[cp.Constraint] = []
    linear = [c for c in program.constraints if isinstance(c, LinearConstraint)]
    if linear:
        g_mat, g_const = layout.compile([c.expr for c in linear])
        lower = np.array([c.lower for c in linear])
        upper = np.array([c.upper for c in linear])
        y = g_mat @ x + g_const

        eq = np.flatnonzero(lower == upper)
        up = np.flatnonzero((lower != upper) & np.isfinite(upper))
        lo = np.flatnonzero((lower != upper) & np.isfinite(lower))
        if eq.size:
            cons.append(y[eq] == upper[eq])
        if up.size:
            cons.append(y[up] <= upper[up])
        if lo.size:
            cons.append(y[lo] >= lower[lo])

    # LMI & SOC entries share one compiled block
    entry_exprs: list[AffineExpr] = []
    for c in program.constraints:
        match c:
            case LmiConstraint(block=block):
                # Column-major so a reshape recovers the block
                m = len(block)
                entry_exprs.extend(block[i][j] for j in range(m) for i in range(m))
            case SocConstraint(terms=terms, bound=bound):
                entry_exprs.extend((bound, *terms))

    if entry_exprs:
        e_mat, e_const = layout.compile(entry_exprs)
        entries = e_mat @ x + e_const

    pos = 0
    for c in program.constraints:
        match c:
            case LmiConstraint(block=block, sense=sense):
                m = len(block)
                blk = cp.reshape(entries[pos : pos + m * m], (m, m), order="F")
                pos += m * m
                # cvxpy expects a symmetric argument for PSD constraints
                blk = (blk + blk.T) / 2
                cons.append(blk >> 0 if sense > 0 else blk << 0)
            case SocConstraint(terms=terms):
                n_terms = len(terms)
                if n_terms:
                    cons.append(cp.SOC(entries[pos], entries[pos + 1 : pos + 1 + n_terms]))
                else:
                    cons.append(entries[pos] >= 0)
                pos += 1 + n_terms
            case PsdConstraint(combination=combination):
                combo = sum(weight * mats[name] for name, weight in combination)
                cons.append(combo >> 0)

    o_mat, o_const = layout.compile([program.objective])
    objective = cp.Minimize(cp.sum(o_mat @ x) + o_const[0])

    return cp.Problem(objective, cons), mats, scalars


_STATUS_MAP = {
    cp.OPTIMAL: SolverStatus.OPTIMAL,
    cp.OPTIMAL_INACCURATE: SolverStatus.OPTIMAL,
    cp.INFEASIBLE: SolverStatus.INFEASIBLE,
    cp.INFEASIBLE_INACCURATE: SolverStatus.INFEASIBLE,
}


def solve(program: ConicProgram, tol: SolverTolerances | None = None) -> SdpSolution:
    """
    Solve the program with the configured cvxpy backend.

    Solver exceptions & non-optimal statuses are reported through the returned status rather than
    raised; the backend message is kept in `stats.message`.
    """
    tol = tol or SolverTolerances()
    problem, mats, scalars = _lower(program)

    logger.info(f"Solving {program} with {tol.solver}")
    start = time.perf_counter()
    message = ""
    try:
        problem.solve(solver=tol.solver, **tol.solver_options())
        cvx_status = problem.status
    except cp.SolverError as e:
        cvx_status = "solver_error"
        message = str(e)
    wall_time = time.perf_counter() - start

    status = _STATUS_MAP.get(cvx_status, SolverStatus.NUMERICAL_FAILURE)
    if cvx_status == cp.OPTIMAL_INACCURATE:
        logger.warning(f"{program.name}: solver reported an inaccurate optimum")
    if status == SolverStatus.NUMERICAL_FAILURE and not message:
        message = f"solver status '{cvx_status}'"

    iterations = None
    if problem.solver_stats is not None:
        iterations = problem.solver_stats.num_iters

    stats = SolveStats(
        solver=tol.solver, iterations=iterations, wall_time=wall_time, message=message
    )
    if status != SolverStatus.OPTIMAL:
        logger.warning(f"{program.name}: {status} ({message or cvx_status})")
        return SdpSolution({}, {}, math.nan, status, stats)

    matrices = {}
    for name, var in mats.items():
        val = np.asarray(var.value)
        val = (val + val.T) / 2
        min_eig = np.linalg.eigvalsh(val)[0] if val.size else 0.0
        if min_eig < -ccopf_config.PSD_TOLERANCE:
            logger.warning(f"{program.name}: matrix '{name}' has min eigenvalue {min_eig:.3e}")
        matrices[name] = val

    scalar_vals: dict[str, float] = {}
    if scalars is not None:
        scalar_vals = dict(zip(program.scalar_vars, np.asarray(scalars.value).ravel().tolist()))

    logger.info(f"{program.name}: optimal objective {problem.value:.6f} in {wall_time:.2f}s")
    return SdpSolution(matrices, scalar_vals, float(problem.value), status, stats)


def _fold_matrix(program: ConicProgram, layout: _Layout) -> tuple[sp.csr_matrix, int]:
    """Map the full column-major layout onto upper-triangle free variables."""
    rows, cols = [], []
    pos = 0
    for name, var in program.matrix_vars.items():
        n = var.dim
        iu, ju = np.triu_indices(n)
        tri = pos + np.arange(iu.size)
        off = layout.offsets[name]
        rows.extend([off + iu + ju * n, off + ju + iu * n])
        cols.extend([tri, tri])
        pos += iu.size
    for name in program.scalar_vars:
        rows.append(np.array([layout.offsets[name]]))
        cols.append(np.array([pos]))
        pos += 1

    r, c = np.concatenate(rows), np.concatenate(cols)
    # Diagonal entries appear twice in the concatenation above
    keep = np.unique(np.c_[r, c], axis=0)
    fold = sp.csr_matrix((np.ones(len(keep)), (keep[:, 0], keep[:, 1])), shape=(layout.size, pos))
    return fold, pos


def write_sdpa(program: ConicProgram, path: Path) -> None:
    """
    Export the program in SDPA sparse format (`.dat-s`).

    The free variables are the upper triangles of every matrix variable followed by the scalars.
    Linear rows form a single diagonal block; each PSD/LMI/SOC constraint becomes its own block,
    with second-order cones written as arrow matrices.
    """
    layout = _Layout(program)
    fold, n_y = _fold_matrix(program, layout)

    blocks: list[tuple[int, list[tuple[int, int, AffineExpr]]]] = []
    diag: list[AffineExpr] = []
    for c in program.constraints:
        match c:
            case LinearConstraint(expr=expr, lower=lo, upper=hi):
                if math.isfinite(hi):
                    diag.append(hi - expr)
                if math.isfinite(lo):
                    diag.append(expr - lo)
            case LmiConstraint(block=block, sense=sense):
                m = len(block)
                blocks.append(
                    (m, [(i, j, block[i][j] * sense) for i in range(m) for j in range(i, m)])
                )
            case SocConstraint(terms=terms, bound=bound):
                m = len(terms) + 1
                entries = [(0, 0, bound)] + [(0, j + 1, e) for j, e in enumerate(terms)]
                entries += [(j, j, bound) for j in range(1, m)]
                blocks.append((m, entries))
            case PsdConstraint(combination=combination):
                dim = program.matrix_vars[combination[0][0]].dim
                entries = []
                for i in range(dim):
                    for j in range(i, dim):
                        unit = sp.csr_matrix(([1.0], ([i], [j])), shape=(dim, dim))
                        # Tr{S W} with S = (E_ij + E_ji)/2 picks out W_ij
                        sym = (unit + unit.T) / 2
                        entries.append((i, j, trace_sum(combination, sym)))
                blocks.append((dim, entries))

    all_entries: list[tuple[int, int, int, AffineExpr]] = []
    struct = []
    for blk_no, (dim, entries) in enumerate(blocks, start=1):
        struct.append(str(dim))
        all_entries.extend((blk_no, i, j, e) for i, j, e in entries)
    if diag:
        struct.append(str(-len(diag)))
        lp_no = len(blocks) + 1
        all_entries.extend((lp_no, k, k, e) for k, e in enumerate(diag))

    c_mat, _ = layout.compile([program.objective])
    c_vec = np.asarray((c_mat @ fold).todense()).ravel()

    e_mat, e_const = layout.compile([e for *_, e in all_entries])
    e_fold = sp.csr_matrix(e_mat @ fold).tocoo()

    lines = [
        f'"{program.name}: objective constant {program.objective.const!r} omitted"',
        str(n_y),
        str(len(struct)),
        " ".join(struct),
        " ".join(repr(float(v)) for v in c_vec),
    ]
    for row, (blk, i, j, _) in enumerate(all_entries):
        if e_const[row] != 0:
            lines.append(f"0 {blk} {i + 1} {j + 1} {-e_const[row]!r}")
    for row, col, val in zip(e_fold.row, e_fold.col, e_fold.data):
        blk, i, j, _ = all_entries[row]
        if val != 0:
            lines.append(f"{col + 1} {blk} {i + 1} {j + 1} {float(val)!r}")

    path.write_text("\n".join(lines) + "\n")
    logger.info(f"Wrote SDPA export of {program.name} to '{path}'")
