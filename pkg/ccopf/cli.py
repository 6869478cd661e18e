from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import typing as t
from importlib import metadata
from pathlib import Path

import numpy as np
from dotenv import load_dotenv

from ccopf import ccopf_config
from ccopf.conelib import SdpSolution, SolverTolerances, solve, write_sdpa
from ccopf.evallib import (
    EvaluationAbortedError,
    Mode,
    ViolationReport,
    build_program,
    cost_of_uncertainty,
    format_cost_table,
    format_report_table,
    monte_carlo,
    penalty_sweep,
    to_policy,
    write_report_csv,
    write_sweep_csv,
)
from ccopf.gridlib import CaseFetchError, CaseSemanticError, CaseSyntaxError, build_matrix_set
from ccopf.policylib import (
    AffinePolicySolution,
    PolicyAssemblyError,
    PolicyFormatError,
    SetpointError,
    read_policy,
    solution_matrices,
    write_policy,
)
from ccopf.powerflowlib import (
    PowerFlowError,
    apply_scenario_and_balance,
    build_scenario,
    operating_point_mismatch,
    write_state_csv,
)
from ccopf.ptdflib import SingularNetworkError, build_ptdf, write_ptdf_csv
from ccopf.sdplib import RelaxationError, eigen_ratio, near_global_optimality, recover_voltages
from ccopf.studylib import ConfigError, PreparedStep, StudyConfig, load_study
from ccopf.uncertaintylib import GaussianSet, UncertaintySetError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_EVALUATION = 3

CONFIG_ERRORS = (
    ConfigError,
    CaseSyntaxError,
    CaseSemanticError,
    CaseFetchError,
    UncertaintySetError,
    PolicyAssemblyError,
    PolicyFormatError,
    SingularNetworkError,
    OSError,
)


class SolveFailedError(RuntimeError):  # noqa: D101
    pass


def _versions() -> dict[str, str]:
    out = {}
    for pkg in ("ccopf", "numpy", "scipy", "cvxpy"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def write_manifest(
    out_dir: Path, command: str, study: StudyConfig, mode: Mode, seed: int | None
) -> None:
    """Record what produced the outputs in `out_dir`: config hash, package versions & seeds."""
    manifest = {
        "command": command,
        "config": str(study.source),
        "config_sha256": study.digest,
        "mode": str(mode),
        "evaluation_seed": seed,
        "scenario_seeds": {step.label: step.scenarios.seed for step in study.timesteps},
        "versions": _versions(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _policy_path(out_dir: Path, label: str) -> Path:
    return out_dir / f"policy_{label}.txt"


def _solve_or_raise(
    mode: Mode, step: PreparedStep, study: StudyConfig, mu: float, tol: SolverTolerances
) -> tuple[SdpSolution, AffinePolicySolution]:
    cc = study.corrective_control(step.case, mu=mu)
    ms = build_matrix_set(step.case)
    solution = solve(build_program(mode, step.case, ms, step.uncertainty, cc), tol)
    if not solution.is_optimal:
        raise SolveFailedError(
            f"{mode} solve for '{step.label}' ended with status '{solution.status}': "
            f"{solution.stats.message}"
        )
    return solution, to_policy(mode, solution, step.case, step.uncertainty, cc)


def _select_mu(study: StudyConfig, step: PreparedStep, tol: SolverTolerances) -> float:
    """Use the configured weight, or the smallest rank-1 weight of the configured grid."""
    if study.mu_grid is None or step.uncertainty is None:
        return study.mu

    cc = study.corrective_control(step.case)
    ms = build_matrix_set(step.case)
    result = penalty_sweep(step.case, ms, step.uncertainty, cc, study.mu_grid, tol)
    mu_star = result.smallest_rank_one()
    if mu_star is None:
        fallback = study.mu_grid[-1]
        logger.warning(f"No rank-1 weight on the grid for '{step.label}', using {fallback}")
        return fallback
    return mu_star


def cmd_validate(study: StudyConfig, mode: Mode) -> list[str]:
    """Run every configuration & case check, returning human-readable diagnostics."""
    case = study.load_network()
    lines = [f"case: {case.name} ({case.n_bus} buses, {len(case.generators)} generators)"]
    cc = study.corrective_control(case)
    basis = f"{len(study.participation)} bus(es)" if study.participation else "p_max"
    lines.append(f"participation: {sum(cc.participation):.6f} by {basis}")
    for step in study.timesteps:
        prepared = study.prepare(step, case, mode)
        desc = "no uncertainty set"
        match prepared.uncertainty:
            case GaussianSet() as gauss:
                desc = f"gauss set, kappa={np.array2string(gauss.kappa, precision=4)}"
            case None:
                pass
            case rect:
                desc = f"rect set, {rect.n_w} farm(s), {len(rect.vertices)} vertices"
        pool = "no pool" if prepared.pool is None else f"{prepared.pool.n_scenarios} scenarios"
        lines.append(f"timestep {step.label}: {pool}, {desc}")
    lines.append("OK")
    return lines


def cmd_solve(
    study: StudyConfig, mode: Mode, out_dir: Path, tol: SolverTolerances, sdpa: bool = False
) -> list[str]:
    """
    Solve every timestep in the requested mode and write policies plus a summary.

    Chance-constrained modes also report the eigenvalue ratio of every solution matrix, the
    near-global optimality against the unpenalized program, and the cost of uncertainty against
    the deterministic baseline.
    """
    case = study.load_network()
    summary = [f"mode: {mode}", f"case: {case.name}"]
    costs: dict[str, float] = {}
    for step in study.timesteps:
        prepared = study.prepare(step, case, mode)
        mu = _select_mu(study, prepared, tol) if mode.is_policy else 0.0
        solution, policy = _solve_or_raise(mode, prepared, study, mu, tol)
        write_policy(
            policy,
            _policy_path(out_dir, step.label),
            {"timestep": step.label, "case": case.name, "config_sha256": study.digest},
        )

        summary.append(f"[{step.label}]")
        summary.append(f"  objective: {solution.objective_value:.6f}")
        summary.append(f"  generation cost: {policy.objective:.6f}")
        summary.append(
            f"  solve: {solution.stats.wall_time:.2f}s, {solution.stats.iterations} iterations"
        )
        for name, w in solution_matrices(policy).items():
            summary.append(f"  rho({name}): {eigen_ratio(w):.4e}")

        if mode.is_policy:
            summary.append(f"  mu: {mu:g}")
            _, unpenalized = _solve_or_raise(mode, prepared, study, 0.0, tol)
            try:
                delta = near_global_optimality(unpenalized.objective, policy.objective)
                summary.append(f"  near-global optimality: {delta:.2f}%")
            except RelaxationError as e:
                summary.append(f"  near-global optimality: n/a ({e})")

        if mode is not Mode.DET:
            _, baseline = _solve_or_raise(Mode.DET, prepared, study, 0.0, tol)
            coup = cost_of_uncertainty(policy.objective, baseline.objective)
            costs[step.label] = coup
            summary.append(f"  cost of uncertainty: {coup:.3f}%")

        cc = study.corrective_control(prepared.case, mu=mu)
        case_cc = cc.apply(prepared.case)
        ms = build_matrix_set(case_cc)
        v = recover_voltages(policy.w0, case_cc.slack_position)
        zeta0 = np.zeros(len(case_cc.wind_farms))
        scenario = build_scenario(case_cc, ms, policy, zeta0, voltage_mode="hold")
        summary.append(f"  rank-1 W0: {v.exact}")
        mis = operating_point_mismatch(case_cc, v.v, scenario)
        summary.append(f"  recovered voltage mismatch: {mis:.3e} p.u.")
        state = apply_scenario_and_balance(case_cc, scenario, v0=v.v)
        if state.converged:
            write_state_csv(state, case_cc, out_dir / f"state_{step.label}.csv")
        else:
            summary.append(f"  forecast power flow: {state.message}")

        if mode in (Mode.PTDF_RECT, Mode.PTDF_GAUSS):
            write_ptdf_csv(build_ptdf(prepared.case), out_dir / f"ptdf_{step.label}.csv")
        if sdpa:
            program = build_program(mode, prepared.case, ms, prepared.uncertainty, cc)
            write_sdpa(program, out_dir / f"program_{step.label}.dat-s")

    if costs:
        summary.append("")
        summary.append("cost of uncertainty [%]")
        summary.append(format_cost_table({str(mode): costs}))

    (out_dir / "summary.txt").write_text("\n".join(summary) + "\n")
    return summary


def cmd_evaluate(
    study: StudyConfig,
    mode: Mode,
    out_dir: Path,
    seed: int | None,
    policy_path: Path | None = None,
) -> list[str]:
    """Monte Carlo evaluate the solved policies of every timestep."""
    if study.evaluation.n < 1:
        raise EvaluationAbortedError("Empty evaluation: sample count must be at least 1")

    case = study.load_network()
    ev = study.evaluation
    reports: dict[str, ViolationReport] = {}
    for idx, step in enumerate(study.timesteps):
        prepared = study.prepare(step, case, mode)
        path = policy_path or _policy_path(out_dir, step.label)
        if not path.exists():
            raise ConfigError(f"No solved policy at '{path}', run solve first")
        policy = read_policy(path)

        sampler = prepared.uncertainty if ev.sampler == "set" else prepared.pool
        if sampler is None:
            raise ConfigError(f"Timestep '{step.label}' has nothing to sample from")

        step_seed = None if seed is None else seed + idx
        cc = study.corrective_control(prepared.case)
        reports[step.label] = monte_carlo(
            prepared.case,
            build_matrix_set(prepared.case),
            policy,
            sampler,
            n=ev.n,
            seed=step_seed,
            cc=cc,
            voltage_mode=study.voltage_mode if mode.is_policy else "hold",
            thresholds=ev.thresholds,
            shard_size=ev.shard_size,
            workers=ev.workers,
            max_nonconverged=ev.max_nonconverged,
        )

    combined = {str(mode): ViolationReport.from_timesteps(reports)}
    write_report_csv(combined, out_dir / "violations.csv")
    table = format_report_table(combined)
    (out_dir / "violations.txt").write_text(table + "\n")
    return ["violation probability [%]", table]


def cmd_sweep(
    study: StudyConfig, mode: Mode, out_dir: Path, tol: SolverTolerances
) -> list[str]:
    """Run the penalty sweep for every timestep and write plot-ready CSV files."""
    if not mode.is_policy:
        raise ConfigError(f"Penalty sweeps need a chance-constrained mode, got '{mode}'")

    case = study.load_network()
    lines = []
    for step in study.timesteps:
        prepared = study.prepare(step, case, mode)
        if prepared.uncertainty is None:
            raise ConfigError(f"Timestep '{step.label}' has no wind farms to sweep over")

        grid = study.mu_grid
        if grid is None:
            start, stop, inc = (
                ccopf_config.SWEEP_RECT_24 if mode is Mode.CC_RECT else ccopf_config.SWEEP_GAUSS_24
            )
            grid = tuple(np.arange(start, stop + inc / 2, inc).tolist())

        cc = study.corrective_control(prepared.case)
        ms = build_matrix_set(prepared.case)
        result = penalty_sweep(
            prepared.case, ms, prepared.uncertainty, cc, grid, tol, workers=study.evaluation.workers
        )
        write_sweep_csv(result, out_dir / f"sweep_{step.label}.csv")
        mu_star = result.smallest_rank_one()
        shown = "none on grid" if mu_star is None else f"{mu_star:g}"
        lines.append(f"{step.label}: {len(result.points)} point(s), smallest rank-1 mu: {shown}")

    return lines


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccopf", description="Chance-constrained AC-OPF via semidefinite relaxation."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, desc in (
        ("validate", "Check a study configuration and its case"),
        ("solve", "Solve every timestep of a study"),
        ("evaluate", "Monte Carlo evaluate solved policies"),
        ("sweep", "Sweep the loss penalty weight"),
    ):
        cmd = sub.add_parser(name, help=desc)
        cmd.add_argument("--config", type=Path, required=True, help="Study TOML file")
        cmd.add_argument("--mode", choices=[str(m) for m in Mode], help="Override the study mode")
        cmd.add_argument("--out", type=Path, help="Output directory (default from the study)")
        cmd.add_argument("--seed", type=int, help="Evaluation seed (unsigned 64-bit)")
        if name == "solve":
            cmd.add_argument("--sdpa", action="store_true", help="Also export SDPA sparse files")
        if name == "evaluate":
            cmd.add_argument("--policy", type=Path, help="Evaluate this policy file instead")

    return parser


def main(argv: t.Sequence[str] | None = None) -> int:  # noqa: D103
    parser = _build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    load_dotenv()

    if args.seed is not None and not (0 <= args.seed < 2**64):
        print(f"Seed must be an unsigned 64-bit integer, got {args.seed}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        study = load_study(args.config)
        mode = Mode(args.mode) if args.mode else study.mode
        tol = study.solver_tolerances(os.environ.get(ccopf_config.SOLVER_TOL_ENV_VAR))
        seed = args.seed if args.seed is not None else study.evaluation.seed

        if args.command == "validate":
            lines = cmd_validate(study, mode)
        else:
            out_dir = (args.out or study.out_dir) / str(mode)
            out_dir.mkdir(parents=True, exist_ok=True)
            write_manifest(out_dir, args.command, study, mode, seed)
            match args.command:
                case "solve":
                    lines = cmd_solve(study, mode, out_dir, tol, sdpa=args.sdpa)
                case "evaluate":
                    lines = cmd_evaluate(study, mode, out_dir, seed, args.policy)
                case _:
                    lines = cmd_sweep(study, mode, out_dir, tol)
    except CONFIG_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolveFailedError, SetpointError, RelaxationError) as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except (EvaluationAbortedError, PowerFlowError) as e:
        print(f"evaluation aborted: {e}", file=sys.stderr)
        return EXIT_EVALUATION

    print("\n".join(lines))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
