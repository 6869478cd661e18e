from __future__ import annotations

import logging
import math
import typing as t
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

import numpy as np

from ccopf import ccopf_config
from ccopf.conelib import ConicProgram, SdpSolution, SolverTolerances, solve
from ccopf.gridlib import MatrixSet, NetworkCase
from ccopf.policylib import (
    AffinePolicySolution,
    CorrectiveControlConfig,
    assemble_cc_gauss,
    assemble_cc_rect,
    solution_matrices,
)
from ccopf.powerflowlib import (
    ViolationClass,
    ViolationThresholds,
    apply_scenario_and_balance,
    build_scenario,
    check_violations,
)
from ccopf.ptdflib import assemble_ptdf_gauss, assemble_ptdf_rect
from ccopf.sdplib import assemble_deterministic, eigen_ratio
from ccopf.uncertaintylib import GaussianSet, RectangularSet, ScenarioPool, sample

logger = logging.getLogger(__name__)

Uncertainty: t.TypeAlias = RectangularSet | GaussianSet
Sampler: t.TypeAlias = RectangularSet | GaussianSet | ScenarioPool


class EvaluationAbortedError(RuntimeError):  # noqa: D101
    pass


class Mode(StrEnum):  # noqa: D101
    DET = "det"
    CC_RECT = "cc-rect"
    CC_GAUSS = "cc-gauss"
    PTDF_RECT = "ptdf-rect"
    PTDF_GAUSS = "ptdf-gauss"

    @property
    def set_kind(self) -> t.Literal["none", "rect", "gauss"]:  # noqa: D102
        if self is Mode.DET:
            return "none"
        return "rect" if self.value.endswith("rect") else "gauss"

    @property
    def is_policy(self) -> bool:
        """Whether the mode produces a piecewise affine policy rather than a single point."""
        return self in (Mode.CC_RECT, Mode.CC_GAUSS)


def build_program(
    mode: Mode,
    case: NetworkCase,
    ms: MatrixSet,
    uncertainty: Uncertainty | None,
    cc: CorrectiveControlConfig,
) -> ConicProgram:
    """Assemble the program for the requested mode."""
    if mode is Mode.DET:
        return assemble_deterministic(cc.apply(case), ms)
    if mode.set_kind == "rect" and not isinstance(uncertainty, RectangularSet):
        raise ValueError(f"Mode '{mode}' needs a rectangular uncertainty set")
    if mode.set_kind == "gauss" and not isinstance(uncertainty, GaussianSet):
        raise ValueError(f"Mode '{mode}' needs a Gaussian uncertainty set")

    match mode:
        case Mode.CC_RECT:
            return assemble_cc_rect(case, ms, uncertainty, cc)  # type: ignore[arg-type]
        case Mode.CC_GAUSS:
            return assemble_cc_gauss(case, ms, uncertainty, cc)  # type: ignore[arg-type]
        case Mode.PTDF_RECT:
            return assemble_ptdf_rect(case, ms, uncertainty, cc)  # type: ignore[arg-type]
        case _:
            return assemble_ptdf_gauss(case, ms, uncertainty, cc)  # type: ignore[arg-type]


def to_policy(
    mode: Mode,
    solution: SdpSolution,
    case: NetworkCase,
    uncertainty: Uncertainty | None,
    cc: CorrectiveControlConfig,
) -> AffinePolicySolution:
    """Wrap an optimal solution; the linearized baselines & the deterministic run keep only `W0`."""
    return AffinePolicySolution.from_sdp(
        solution,
        cc.apply(case),
        uncertainty if mode.is_policy else None,
        mu=cc.mu if mode.is_policy else 0.0,
        mode=str(mode),
    )


@dataclass(frozen=True)
class ViolationReport:
    """
    Aggregated Monte Carlo outcome.

    `violated` counts converged samples per violation class; probabilities are taken over the
    converged samples only. Non-converged power flows are counted separately and never treated as
    safe. `breakdown` optionally holds per-timestep reports keyed by label.
    """

    violated: dict[ViolationClass, int]
    n_samples: int
    n_converged: int
    breakdown: dict[str, ViolationReport] = field(default_factory=dict)

    @classmethod
    def empty(cls) -> ViolationReport:  # noqa: D102
        return cls({vc: 0 for vc in ViolationClass}, 0, 0)

    @property
    def n_nonconverged(self) -> int:  # noqa: D102
        return self.n_samples - self.n_converged

    @property
    def probabilities(self) -> dict[ViolationClass, float]:  # noqa: D102
        if self.n_converged == 0:
            return {vc: math.nan for vc in ViolationClass}
        return {vc: self.violated.get(vc, 0) / self.n_converged for vc in ViolationClass}

    def combine(self, other: ViolationReport) -> ViolationReport:
        """Merge two sample aggregates; the fold is commutative so shard order is irrelevant."""
        merged = Counter(self.violated)
        merged.update(other.violated)
        return ViolationReport(
            violated={vc: merged.get(vc, 0) for vc in ViolationClass},
            n_samples=self.n_samples + other.n_samples,
            n_converged=self.n_converged + other.n_converged,
        )

    @classmethod
    def from_timesteps(cls, reports: t.Mapping[str, ViolationReport]) -> ViolationReport:
        """Aggregate per-timestep reports, keeping each one in the breakdown."""
        total = cls.empty()
        for report in reports.values():
            total = total.combine(report)
        return cls(total.violated, total.n_samples, total.n_converged, dict(reports))


def clip_to_ratings(case: NetworkCase, zeta: np.ndarray) -> np.ndarray:
    """Clip forecast errors so each farm's output stays within `[0, rated]`."""
    forecast = np.array([farm.forecast for farm in case.wind_farms])
    rated = np.array([farm.rated for farm in case.wind_farms])
    return np.clip(zeta, -forecast, rated - forecast)


def _evaluate_shard(
    case: NetworkCase,
    ms: MatrixSet,
    policy: AffinePolicySolution,
    samples: np.ndarray,
    cc: CorrectiveControlConfig | None,
    voltage_mode: t.Literal["policy", "hold"],
    thresholds: ViolationThresholds,
) -> ViolationReport:
    violated: Counter[ViolationClass] = Counter()
    n_converged = 0
    for zeta in samples:
        scenario = build_scenario(case, ms, policy, zeta, voltage_mode=voltage_mode)
        state = apply_scenario_and_balance(case, scenario, cc)
        if not state.converged:
            logger.debug(f"Power flow did not converge at zeta={zeta}: {state.message}")
            continue

        n_converged += 1
        flags = check_violations(state, case, thresholds)
        violated.update(vc for vc, hit in flags.items() if hit)

    return ViolationReport(
        violated={vc: violated.get(vc, 0) for vc in ViolationClass},
        n_samples=len(samples),
        n_converged=n_converged,
    )


def monte_carlo(
    case: NetworkCase,
    ms: MatrixSet,
    policy: AffinePolicySolution,
    sampler: Sampler,
    n: int = ccopf_config.MC_SAMPLES,
    seed: int | None = None,
    cc: CorrectiveControlConfig | None = None,
    voltage_mode: t.Literal["policy", "hold"] = "policy",
    thresholds: ViolationThresholds | None = None,
    shard_size: int = ccopf_config.MC_SHARD_SIZE,
    workers: int = 1,
    max_nonconverged: float = ccopf_config.MC_MAX_NONCONVERGED,
) -> ViolationReport:
    """
    Estimate per-class violation probabilities of a dispatch under sampled forecast errors.

    The `n` samples are split into shards of `shard_size`, each drawing from its own child of
    `seed`'s seed sequence, so the aggregate is independent of `workers`. Every sample is clipped to
    the farm ratings, run through the balanced power flow, and checked for violations.

    Raises `EvaluationAbortedError` when more than `max_nonconverged` of the samples fail to
    converge.
    """
    if n < 1:
        raise EvaluationAbortedError("Empty evaluation: sample count must be at least 1")

    if cc is not None:
        case = cc.apply(case)
    thresholds = thresholds or ViolationThresholds()
    forecast = np.array([farm.forecast for farm in case.wind_farms])

    sizes = [min(shard_size, n - start) for start in range(0, n, shard_size)]
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    shards = [
        clip_to_ratings(case, sample(sampler, size, child, forecast=forecast))
        for size, child in zip(sizes, children)
    ]
    logger.info(f"Evaluating {n} scenarios in {len(shards)} shard(s) on {workers} worker(s)")

    args = (case, ms, policy)
    extra = (None, voltage_mode, thresholds)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_evaluate_shard, *args, s, *extra) for s in shards]
            results = [f.result() for f in futures]
    else:
        results = [_evaluate_shard(*args, s, *extra) for s in shards]

    report = ViolationReport.empty()
    for shard_report in results:
        report = report.combine(shard_report)

    if report.n_nonconverged > max_nonconverged * n:
        raise EvaluationAbortedError(
            f"{report.n_nonconverged} of {n} power flows did not converge "
            f"(limit {max_nonconverged:.0%})"
        )
    if report.n_nonconverged:
        logger.warning(f"{report.n_nonconverged} of {n} power flows did not converge")

    return report


def cost_of_uncertainty(cc_cost: float, baseline_cost: float) -> float:
    """Relative cost increase, in percent, of a dispatch over the deterministic baseline."""
    if baseline_cost <= 0:
        raise ValueError(f"Baseline cost must be positive, got {baseline_cost}")

    return 100 * (cc_cost - baseline_cost) / baseline_cost


@dataclass(frozen=True)
class SweepPoint:  # noqa: D101
    mu: float
    status: str
    rho: dict[str, float]
    gen_cost: float
    penalty: float

    @property
    def feasible(self) -> bool:  # noqa: D102
        return self.status == "optimal"

    def rank_one(self, threshold: float = ccopf_config.RANK_THRESHOLD) -> bool:
        """Whether every recorded solution matrix has an eigenvalue ratio of `threshold` or more."""
        return self.feasible and bool(self.rho) and all(r >= threshold for r in self.rho.values())


@dataclass(frozen=True)
class SweepResult:  # noqa: D101
    mode: str
    points: tuple[SweepPoint, ...]

    def __post_init__(self) -> None:
        mus = [p.mu for p in self.points]
        if any(b <= a for a, b in zip(mus, mus[1:])):
            raise ValueError("Sweep grid must be strictly increasing")

    @property
    def matrix_names(self) -> list[str]:  # noqa: D102
        for point in self.points:
            if point.rho:
                return list(point.rho)
        return []

    def smallest_rank_one(self, threshold: float = ccopf_config.RANK_THRESHOLD) -> float | None:
        """Smallest penalty weight at which every solution matrix is numerically rank-1."""
        for point in self.points:
            if point.rank_one(threshold):
                return point.mu
        return None


def _sweep_point(
    mode: Mode,
    case: NetworkCase,
    ms: MatrixSet,
    uncertainty: Uncertainty,
    cc: CorrectiveControlConfig,
    tol: SolverTolerances | None,
) -> SweepPoint:
    solution = solve(build_program(mode, case, ms, uncertainty, cc), tol)
    if not solution.is_optimal:
        logger.warning(f"Sweep point mu={cc.mu} ended with status '{solution.status}'")
        return SweepPoint(cc.mu, str(solution.status), {}, math.nan, math.nan)

    policy = to_policy(mode, solution, case, uncertainty, cc)
    rho = {name: eigen_ratio(w) for name, w in solution_matrices(policy).items()}
    return SweepPoint(cc.mu, str(solution.status), rho, policy.objective, policy.penalty)


def penalty_sweep(
    case: NetworkCase,
    ms: MatrixSet,
    uncertainty: Uncertainty,
    cc: CorrectiveControlConfig,
    mu_grid: t.Sequence[float],
    tol: SolverTolerances | None = None,
    workers: int = 1,
) -> SweepResult:
    """
    Solve the chance-constrained program over a grid of penalty weights.

    Each point records the eigenvalue ratio of `W0` & of every vertex or axis end-point, the
    generation cost and the penalty term. Solver failures are recorded per point and do not stop
    the sweep.
    """
    if not mu_grid:
        raise ValueError("Penalty grid must not be empty")

    mode = Mode.CC_RECT if isinstance(uncertainty, RectangularSet) else Mode.CC_GAUSS
    configs = [cc.with_mu(float(mu)) for mu in mu_grid]
    logger.info(f"Sweeping {len(configs)} penalty weight(s) for {mode}")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_sweep_point, mode, case, ms, uncertainty, c, tol) for c in configs
            ]
            points = [f.result() for f in futures]
    else:
        points = [_sweep_point(mode, case, ms, uncertainty, c, tol) for c in configs]

    result = SweepResult(str(mode), tuple(points))
    mu_star = result.smallest_rank_one()
    if mu_star is None:
        logger.info("No penalty weight in the grid gives rank-1 solution matrices")
    else:
        logger.info(f"Smallest penalty weight with rank-1 solution matrices: {mu_star}")

    return result


def write_sweep_csv(result: SweepResult, path: Path) -> None:
    """Write one row per penalty weight: `mu, rho_<matrix>..., gen_cost, penalty, status`."""
    names = result.matrix_names
    lines = [",".join(["mu", *(f"rho_{name}" for name in names), "gen_cost", "penalty", "status"])]
    for p in result.points:
        rho = [f"{p.rho.get(name, math.nan):.6e}" for name in names]
        tail = [f"{p.gen_cost:.6f}", f"{p.penalty:.6f}", p.status]
        lines.append(",".join([f"{p.mu:g}", *rho, *tail]))

    path.write_text("\n".join(lines) + "\n")
    logger.info(f"Wrote sweep results to '{path}'")


def write_report_csv(reports: t.Mapping[str, ViolationReport], path: Path) -> None:
    """Write one row per (mode, timestep, class) with the probability and the sample counts."""
    lines = ["mode,timestep,class,probability,violated,converged,nonconverged"]
    for mode, report in reports.items():
        steps = report.breakdown or {"all": report}
        for label, step in steps.items():
            for vc, prob in step.probabilities.items():
                lines.append(
                    f"{mode},{label},{vc},{prob:.6f},{step.violated.get(vc, 0)},"
                    f"{step.n_converged},{step.n_nonconverged}"
                )

    path.write_text("\n".join(lines) + "\n")
    logger.info(f"Wrote violation report to '{path}'")


def format_report_table(reports: t.Mapping[str, ViolationReport]) -> str:
    """Violation probabilities in percent, one row per (mode, class) & one column per timestep."""
    labels: list[str] = []
    for report in reports.values():
        for label in report.breakdown or {"all": report}:
            if label not in labels:
                labels.append(label)

    header = f"{'mode':<12}{'class':<16}" + "".join(f"{label:>10}" for label in labels)
    rows = [header, "-" * len(header)]
    for mode, report in reports.items():
        steps = report.breakdown or {"all": report}
        for vc in ViolationClass:
            cells = []
            for label in labels:
                prob = steps[label].probabilities[vc] if label in steps else math.nan
                cells.append(f"{100 * prob:>10.1f}")
            rows.append(f"{mode:<12}{vc:<16}" + "".join(cells))
        nonconv = "".join(
            f"{steps[label].n_nonconverged if label in steps else 0:>10d}" for label in labels
        )
        rows.append(f"{mode:<12}{'non-converged':<16}" + nonconv)

    return "\n".join(rows)


def format_cost_table(costs: t.Mapping[str, t.Mapping[str, float]]) -> str:
    """Cost of uncertainty in percent, one row per mode & one column per timestep."""
    labels: list[str] = []
    for per_step in costs.values():
        labels.extend(label for label in per_step if label not in labels)

    header = f"{'mode':<12}" + "".join(f"{label:>10}" for label in labels)
    rows = [header, "-" * len(header)]
    for mode, per_step in costs.items():
        cells = "".join(f"{per_step.get(label, math.nan):>10.3f}" for label in labels)
        rows.append(f"{mode:<12}{cells}")

    return "\n".join(rows)

