from __future__ import annotations

import hashlib
import logging
import math
import tomllib
import typing as t
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ccopf import ccopf_config
from ccopf.conelib import SolverTolerances
from ccopf.evallib import Mode
from ccopf.gridlib import LimitKind, NetworkCase, WindFarm, load_case, transform_case
from ccopf.policylib import CorrectiveControlConfig
from ccopf.powerflowlib import ViolationThresholds
from ccopf.uncertaintylib import (
    GaussianSet,
    RectangularSet,
    ScenarioPool,
    build_gaussian,
    build_rectangular,
    synthetic_pool,
)

logger = logging.getLogger(__name__)

SWEEP_PREFIX = "sweep:"


class ConfigError(ValueError):  # noqa: D101
    pass


def parse_mu_grid(spec: str) -> tuple[float, ...]:
    """
    Parse a `sweep:<start>:<stop>:<step>` penalty grid, both ends included.

    A single value (`sweep:<mu>`) gives a one-point grid.
    """
    if not spec.startswith(SWEEP_PREFIX):
        raise ConfigError(f"Penalty grid must start with '{SWEEP_PREFIX}', got {spec!r}")

    try:
        parts = [float(tok) for tok in spec.removeprefix(SWEEP_PREFIX).split(":")]
    except ValueError as e:
        raise ConfigError(f"Malformed penalty grid {spec!r}") from e

    match parts:
        case [mu]:
            grid = (mu,)
        case [start, stop, step] if step > 0 and stop >= start:
            n = math.floor((stop - start) / step + 1e-9)
            grid = tuple(start + k * step for k in range(n + 1))
        case _:
            raise ConfigError(f"Malformed penalty grid {spec!r}, expected sweep:start:stop:step")

    if any(mu < 0 for mu in grid):
        raise ConfigError(f"Penalty weights must be nonnegative: {spec!r}")
    return grid


@dataclass(frozen=True)
class FarmSpec:
    """A wind farm as configured; powers in MW, `forecast` of `None` means the pool mean."""

    bus: int
    rated: float
    forecast: float | None
    cos_phi: float = ccopf_config.DEFAULT_COS_PHI


@dataclass(frozen=True)
class ScenarioSpec:
    """Where a timestep's scenario pool comes from: a CSV file (MW) or the synthetic generator."""

    pool: Path | None = None
    n: int = 0
    shape_a: tuple[float, ...] = ()
    shape_b: tuple[float, ...] = ()
    correlation: tuple[tuple[float, ...], ...] | None = None
    seed: int | None = None

    @property
    def configured(self) -> bool:  # noqa: D102
        return self.pool is not None or self.n > 0

    def build(self, farms: t.Sequence[FarmSpec], base_mva: float) -> ScenarioPool:
        """Load or generate the pool, converted to p.u. and checked against the farm ratings."""
        rated = [farm.rated for farm in farms]
        if self.pool is not None:
            pool_mw = ScenarioPool.from_csv(self.pool)
            expected = tuple(farm.bus for farm in farms)
            if pool_mw.farms != expected:
                raise ConfigError(
                    f"Scenario pool '{self.pool}' has farms {pool_mw.farms}, expected {expected}"
                )
        else:
            corr = None if self.correlation is None else np.array(self.correlation)
            pool_mw = synthetic_pool(
                [farm.bus for farm in farms],
                rated,
                self.shape_a,
                self.shape_b,
                self.n,
                correlation=corr,
                seed=self.seed,
            )

        pool_mw.check_ratings(rated)
        return ScenarioPool(pool_mw.scenarios / base_mva, pool_mw.farms)


@dataclass(frozen=True)
class Timestep:  # noqa: D101
    label: str
    forecast: tuple[float | None, ...]
    scenarios: ScenarioSpec
    load_scale: float = 1.0


@dataclass(frozen=True)
class UncertaintySpec:
    """
    How the uncertainty set is obtained.

    Without explicit parameters the set is fitted to the timestep's scenario pool. Otherwise
    `relative_bounds` gives a symmetric box of that fraction of each forecast and `relative_sigma`
    a Gaussian with that fraction of each forecast as standard deviation, correlated by
    `correlation` if provided.
    """

    kind: t.Literal["rect", "gauss"] = "rect"
    epsilon: float = ccopf_config.EPSILON
    beta: float = ccopf_config.BETA
    printed_coefficient: bool = False
    relative_bounds: float | None = None
    relative_sigma: float | None = None
    correlation: tuple[tuple[float, ...], ...] | None = None


@dataclass(frozen=True)
class EvaluationSpec:  # noqa: D101
    n: int = ccopf_config.MC_SAMPLES
    seed: int | None = None
    sampler: t.Literal["set", "pool"] = "set"
    shard_size: int = ccopf_config.MC_SHARD_SIZE
    workers: int = 1
    max_nonconverged: float = ccopf_config.MC_MAX_NONCONVERGED
    thresholds: ViolationThresholds = field(default_factory=ViolationThresholds)


@dataclass(frozen=True, eq=False)
class PreparedStep:
    """A timestep ready to solve: the case with its farms and the uncertainty set for the mode."""

    label: str
    case: NetworkCase
    pool: ScenarioPool | None
    uncertainty: RectangularSet | GaussianSet | None


@dataclass(frozen=True, eq=False)
class StudyConfig:
    """A fully validated study file; every path is absolute."""

    source: Path
    digest: str
    case: str
    min_transformer_r: float
    load_scale: float
    line_limit_scale: float
    voltage_bounds: tuple[float, float] | None
    limit_kind: LimitKind | None
    farms: tuple[FarmSpec, ...]
    participation: dict[int, float]
    uncertainty: UncertaintySpec
    mode: Mode
    mu: float
    mu_grid: tuple[float, ...] | None
    orthant_corners: bool
    gauss_participation: t.Literal["norm", "sum"]
    voltage_mode: t.Literal["policy", "hold"]
    timesteps: tuple[Timestep, ...]
    solver: SolverTolerances
    evaluation: EvaluationSpec
    out_dir: Path

    def load_network(self) -> NetworkCase:
        """Load & transform the configured case, without wind farms."""
        case = load_case(self.case)
        case = transform_case(
            case,
            min_transformer_r=self.min_transformer_r,
            load_scale=self.load_scale,
            line_limit_scale=self.line_limit_scale,
            voltage_bounds=self.voltage_bounds,
            limit_kind=self.limit_kind,
        )
        logger.info(
            f"Loaded case '{case.name}': {case.n_bus} buses, {len(case.branches)} branches, "
            f"{len(case.generators)} generators"
        )
        return case

    def participation_factors(self, case: NetworkCase) -> tuple[float, ...]:
        """
        Per-generator participation factors.

        An empty bus map means every unit participates in proportion to its maximum output;
        otherwise each bus's factor is shared equally among its units.
        """
        if not self.participation:
            p_max = np.array([gen.p_max for gen in case.generators])
            if p_max.sum() <= 0:
                raise ConfigError("Cannot share participation by p_max: no generator capacity")
            return tuple((p_max / p_max.sum()).tolist())

        gen_buses = [gen.bus for gen in case.generators]
        for bus in self.participation:
            if bus not in gen_buses:
                raise ConfigError(f"Participation assigned to bus {bus}, which has no generator")

        return tuple(
            self.participation.get(bus, 0.0) / gen_buses.count(bus) for bus in gen_buses
        )

    def corrective_control(
        self, case: NetworkCase, mu: float | None = None
    ) -> CorrectiveControlConfig:
        """Build the corrective control parameters for the case."""
        return CorrectiveControlConfig(
            participation=self.participation_factors(case),
            mu=self.mu if mu is None else mu,
            orthant_corners=self.orthant_corners,
            gauss_participation=self.gauss_participation,
        )

    def solver_tolerances(self, env_value: str | None = None) -> SolverTolerances:
        """Apply a solver tolerance override from the environment to both tolerances."""
        if env_value is None or not env_value.strip():
            return self.solver

        try:
            tol = float(env_value)
        except ValueError as e:
            raise ConfigError(
                f"{ccopf_config.SOLVER_TOL_ENV_VAR} must be a float, got {env_value!r}"
            ) from e
        if not (tol > 0):
            raise ConfigError(f"{ccopf_config.SOLVER_TOL_ENV_VAR} must be positive, got {tol}")

        logger.info(f"Solver tolerance overridden from the environment: {tol:g}")
        return SolverTolerances(
            feasibility=tol, gap=tol, max_iter=self.solver.max_iter, solver=self.solver.solver
        )

    def prepare(self, step: Timestep, case: NetworkCase, mode: Mode) -> PreparedStep:
        """
        Attach the timestep's wind farms to the case and build the uncertainty set.

        The set kind follows the mode; the deterministic mode keeps the configured kind so that it
        can still be sampled for evaluation.
        """
        base = case.base_mva
        if not math.isclose(step.load_scale, 1.0):
            case = transform_case(case, load_scale=step.load_scale)

        pool = step.scenarios.build(self.farms, base) if step.scenarios.configured else None
        forecast = []
        for idx, (farm, value) in enumerate(zip(self.farms, step.forecast)):
            if value is None:
                if pool is None:
                    raise ConfigError(f"Farm at bus {farm.bus}: forecast 'mean' needs a pool")
                forecast.append(float(pool.scenarios[:, idx].mean()))
            else:
                forecast.append(value / base)

        farms = [
            WindFarm(bus=spec.bus, rated=spec.rated / base, forecast=f, cos_phi=spec.cos_phi)
            for spec, f in zip(self.farms, forecast)
        ]
        case = case.with_wind_farms(farms)

        kind = self.uncertainty.kind if mode.set_kind == "none" else mode.set_kind
        uncertainty = self._uncertainty(kind, np.array(forecast), pool) if farms else None
        return PreparedStep(step.label, case, pool, uncertainty)

    def _uncertainty(
        self, kind: str, forecast: np.ndarray, pool: ScenarioPool | None
    ) -> RectangularSet | GaussianSet:
        spec = self.uncertainty
        if kind == "rect":
            if spec.relative_bounds is not None:
                half = spec.relative_bounds * forecast
                return RectangularSet(-half, half, epsilon=spec.epsilon, beta=spec.beta)
            if pool is None:
                raise ConfigError("Rectangular set needs relative_bounds or a scenario pool")
            return build_rectangular(
                pool, forecast, spec.epsilon, spec.beta, spec.printed_coefficient
            )

        if spec.relative_sigma is not None:
            sigma = spec.relative_sigma * forecast
            corr = np.eye(forecast.size) if spec.correlation is None else np.array(spec.correlation)
            return GaussianSet.from_covariance(np.outer(sigma, sigma) * corr, spec.epsilon)
        if pool is None:
            raise ConfigError("Gaussian set needs relative_sigma or a scenario pool")
        return build_gaussian(pool, forecast, spec.epsilon)


def _section(raw: dict[str, t.Any], name: str) -> dict[str, t.Any]:
    val = raw.get(name, {})
    if not isinstance(val, dict):
        raise ConfigError(f"[{name}] must be a table")
    return val


def _resolve(base: Path, value: str) -> str:
    if value.startswith(("http://", "https://")):
        return value
    path = (base / value).resolve()
    if not path.exists():
        raise ConfigError(f"Referenced file does not exist: {path}")
    return str(path)


def _scenario_spec(base: Path, raw: dict[str, t.Any], n_farms: int) -> ScenarioSpec:
    if "pool" in raw:
        return ScenarioSpec(pool=Path(_resolve(base, str(raw["pool"]))))
    if not raw:
        return ScenarioSpec()

    spec = ScenarioSpec(
        n=int(raw.get("n", 0)),
        shape_a=tuple(float(x) for x in raw.get("shape_a", ())),
        shape_b=tuple(float(x) for x in raw.get("shape_b", ())),
        correlation=(
            tuple(tuple(float(x) for x in row) for row in raw["correlation"])
            if "correlation" in raw
            else None
        ),
        seed=raw.get("seed"),
    )
    if spec.n < 1:
        raise ConfigError("Synthetic scenarios need a positive count n")
    if len(spec.shape_a) != n_farms or len(spec.shape_b) != n_farms:
        raise ConfigError(f"Synthetic scenarios need shape_a & shape_b for each of {n_farms} farms")
    return spec


def _forecast(values: t.Sequence[t.Any]) -> tuple[float | None, ...]:
    out: list[float | None] = []
    for val in values:
        if val == "mean":
            out.append(None)
        elif isinstance(val, int | float):
            out.append(float(val))
        else:
            raise ConfigError(f"Forecast must be a number or 'mean', got {val!r}")
    return tuple(out)


def _check_probability(name: str, value: float) -> float:
    if not (0 < value < 1):
        raise ConfigError(f"{name} must be in (0, 1), got {value}")
    return value


def load_study(path: Path) -> StudyConfig:  # noqa: C901
    """
    Load & validate a TOML study file.

    Every invariant is checked here: referenced files exist, participation factors sum to one,
    `epsilon` & `beta` lie in `(0, 1)`, and a penalty grid is well formed. Relative paths resolve
    against the study file's directory.
    """
    path = Path(path).resolve()
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"Could not read study file '{path}'") from e
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Invalid TOML in '{path}': {e}") from e

    base = path.parent
    case_sec = _section(raw, "case")
    if "path" in case_sec:
        case = _resolve(base, str(case_sec["path"]))
    elif "url" in case_sec:
        case = str(case_sec["url"])
    else:
        raise ConfigError("[case] needs a path or url")

    transform = _section(raw, "transform")
    bounds = transform.get("voltage_bounds")
    if bounds is not None and (len(bounds) != 2 or not bounds[0] < bounds[1]):
        raise ConfigError(f"voltage_bounds must be [v_min, v_max] with v_min < v_max: {bounds}")
    try:
        limit_kind = LimitKind(transform["limit_kind"]) if "limit_kind" in transform else None
    except ValueError as e:
        raise ConfigError(f"Unknown limit_kind {transform['limit_kind']!r}") from e

    farm_rows = raw.get("wind_farms", [])
    farms = []
    for row in farm_rows:
        try:
            farms.append(
                FarmSpec(
                    bus=int(row["bus"]),
                    rated=float(row["rated"]),
                    forecast=_forecast([row.get("forecast", "mean")])[0],
                    cos_phi=float(row.get("cos_phi", ccopf_config.DEFAULT_COS_PHI)),
                )
            )
        except KeyError as e:
            raise ConfigError(f"Wind farm entry is missing {e}") from e

    part_sec = dict(_section(raw, "participation"))
    basis = part_sec.pop("proportional_to", None)
    if basis is not None and basis != "p_max":
        raise ConfigError(f"Participation can only be proportional to 'p_max', got {basis!r}")
    participation = {int(bus): float(d) for bus, d in part_sec.items()}
    if basis is not None and participation:
        raise ConfigError("Give either proportional_to or per-bus factors, not both")
    if basis is None and not participation:
        raise ConfigError("[participation] must assign at least one factor or proportional_to")
    if participation and abs(sum(participation.values()) - 1) > 1e-9:
        raise ConfigError(
            f"Participation factors must sum to 1, got {sum(participation.values()):.6f}"
        )
    if any(d < 0 for d in participation.values()):
        raise ConfigError("Participation factors must be nonnegative")

    unc = _section(raw, "uncertainty")
    uncertainty = UncertaintySpec(
        kind=unc.get("kind", "rect"),
        epsilon=_check_probability("epsilon", float(unc.get("epsilon", ccopf_config.EPSILON))),
        beta=_check_probability("beta", float(unc.get("beta", ccopf_config.BETA))),
        printed_coefficient=bool(unc.get("printed_coefficient", False)),
        relative_bounds=unc.get("relative_bounds"),
        relative_sigma=unc.get("relative_sigma"),
        correlation=(
            tuple(tuple(float(x) for x in row) for row in unc["correlation"])
            if "correlation" in unc
            else None
        ),
    )
    if uncertainty.kind not in ("rect", "gauss"):
        raise ConfigError(f"Uncertainty kind must be 'rect' or 'gauss', got {uncertainty.kind!r}")

    policy = _section(raw, "policy")
    try:
        mode = Mode(policy.get("mode", "cc-rect"))
    except ValueError as e:
        raise ConfigError(f"Unknown mode {policy.get('mode')!r}") from e

    mu_raw = policy.get("mu", 0.0)
    mu_grid = None
    if isinstance(mu_raw, str):
        mu_grid = parse_mu_grid(mu_raw)
        mu = mu_grid[-1]
    else:
        mu = float(mu_raw)
        if mu < 0:
            raise ConfigError(f"Penalty weight must be nonnegative, got {mu}")

    gauss_participation = policy.get("gauss_participation", "norm")
    if gauss_participation not in ("norm", "sum"):
        raise ConfigError(f"gauss_participation must be 'norm' or 'sum': {gauss_participation!r}")
    voltage_mode = policy.get("voltage_mode", "policy")
    if voltage_mode not in ("policy", "hold"):
        raise ConfigError(f"voltage_mode must be 'policy' or 'hold': {voltage_mode!r}")

    default_scenarios = _scenario_spec(base, _section(raw, "scenarios"), len(farms))
    timesteps = []
    for idx, row in enumerate(raw.get("timesteps", []), start=1):
        forecast = _forecast(row.get("forecast", [farm.forecast for farm in farms]))
        if len(forecast) != len(farms):
            raise ConfigError(f"Timestep {idx} forecast needs one value per farm")
        scen_raw = row.get("scenarios")
        scenarios = (
            default_scenarios if scen_raw is None else _scenario_spec(base, scen_raw, len(farms))
        )
        timesteps.append(
            Timestep(
                label=str(row.get("label", f"t{idx}")),
                forecast=forecast,
                scenarios=scenarios,
                load_scale=float(row.get("load_scale", 1.0)),
            )
        )
    if not timesteps:
        timesteps.append(
            Timestep("base", tuple(farm.forecast for farm in farms), default_scenarios)
        )
    labels = [step.label for step in timesteps]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"Timestep labels must be unique: {labels}")

    solver_sec = _section(raw, "solver")
    solver = SolverTolerances(
        feasibility=float(solver_sec.get("feasibility", ccopf_config.SOLVER_FEAS_TOL)),
        gap=float(solver_sec.get("gap", ccopf_config.SOLVER_GAP_TOL)),
        max_iter=int(solver_sec.get("max_iter", ccopf_config.SOLVER_MAX_ITER)),
        solver=str(solver_sec.get("name", ccopf_config.SOLVER)),
    )

    ev = _section(raw, "evaluation")
    evaluation = EvaluationSpec(
        n=int(ev.get("n", ccopf_config.MC_SAMPLES)),
        seed=ev.get("seed"),
        sampler=ev.get("sampler", "set"),
        shard_size=int(ev.get("shard_size", ccopf_config.MC_SHARD_SIZE)),
        workers=int(ev.get("workers", 1)),
        max_nonconverged=float(ev.get("max_nonconverged", ccopf_config.MC_MAX_NONCONVERGED)),
        thresholds=ViolationThresholds(
            gen_pu=float(ev.get("gen_threshold", ccopf_config.GEN_THRESHOLD_PU)),
            relative=float(ev.get("relative_threshold", ccopf_config.RELATIVE_THRESHOLD)),
        ),
    )
    if evaluation.sampler not in ("set", "pool"):
        raise ConfigError(f"Evaluation sampler must be 'set' or 'pool': {evaluation.sampler!r}")
    if evaluation.shard_size < 1 or evaluation.workers < 1:
        raise ConfigError("Evaluation shard_size & workers must be positive")

    out_dir = (base / str(_section(raw, "output").get("dir", "out"))).resolve()

    logger.info(f"Loaded study '{path.name}' with {len(timesteps)} timestep(s)")
    return StudyConfig(
        source=path,
        digest=hashlib.sha256(text.encode()).hexdigest(),
        case=case,
        min_transformer_r=float(transform.get("min_transformer_r", 0.0)),
        load_scale=float(transform.get("load_scale", 1.0)),
        line_limit_scale=float(transform.get("line_limit_scale", 1.0)),
        voltage_bounds=None if bounds is None else (float(bounds[0]), float(bounds[1])),
        limit_kind=limit_kind,
        farms=tuple(farms),
        participation=participation,
        uncertainty=uncertainty,
        mode=mode,
        mu=mu,
        mu_grid=mu_grid,
        orthant_corners=bool(policy.get("orthant_corners", True)),
        gauss_participation=gauss_participation,
        voltage_mode=voltage_mode,
        timesteps=tuple(timesteps),
        solver=solver,
        evaluation=evaluation,
        out_dir=out_dir,
    )
