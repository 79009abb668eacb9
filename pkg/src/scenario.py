# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Scenario descriptions, named presets, parameter scans and result export."""

import json
import logging
import math
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from jinja2 import Template
from joblib import Parallel, delayed

from exceptions import ArtifactError, ErrorWithExitCode, InvalidSpecError
from services.artifacts import S3ArtifactStore, is_s3_uri, parse_s3_uri
from solvers.dynamics import (
    CostProfile,
    EpidemicParams,
    ScenarioMetrics,
    Trajectory,
    alpha_at_zero,
    horizon_ok,
    integrate_sir,
    metrics,
)
from solvers.government import (
    GovernmentPreferences,
    GovernmentSolution,
    solve_government,
    tracking_preferences,
    tracking_warm_start,
)
from solvers.individual import IndividualSolution, solve_nash, utility
from solvers.sweep import SweepSettings
from solvers.utilitarian import UtilitarianSolution, solve_utilitarian

logger = logging.getLogger(__name__)

ROLES = ("baseline", "nash", "utilitarian", "government")
START_CHOICES = {"both": ("zero", "warm"), "zero": ("zero",), "warm": ("warm",)}
SCAN_AXES = ("alpha1", "alpha", "alpha_g1", "alpha_g", "gamma_g", "i_hc")
GOVERNMENT_AXES = ("alpha_g1", "alpha_g", "gamma_g")
FORMATS = ("csv", "json")

PER_DECADE = 25
CROSSOVER_DEPTH = 3
CSV_FLOAT_FORMAT = "%.17g"
TEMPLATE_FILE = Path(__file__).parent / "templates" / "presets.md.j2"

Solution = Union[Trajectory, IndividualSolution, UtilitarianSolution, GovernmentSolution]


@dataclass(frozen=True)
class ScanAxis:
    """Parameter varied by a scan and its strictly increasing values."""

    name: str
    values: Tuple[float, ...]

    def __post_init__(self):
        """Validate the axis name and values."""
        if self.name not in SCAN_AXES:
            raise InvalidSpecError(f"unknown scan axis '{self.name}', expected one of {SCAN_AXES}")
        try:
            values = tuple(float(v) for v in self.values)
        except (TypeError, ValueError):
            raise InvalidSpecError(f"scan values must be numbers - got {self.values!r}")
        if not values:
            raise InvalidSpecError("a scan needs at least one value")
        if not all(math.isfinite(v) for v in values):
            raise InvalidSpecError("scan values must be finite")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise InvalidSpecError("scan values must be strictly increasing")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class ScenarioSpec:
    """Complete, serialisable description of one run or one scan.

    Args:
        role: one of baseline, nash, utilitarian, government
        epidemic: epidemic parameters
        individual_cost: preferences of the individuals
        government_prefs: preferences of the government, only for the government role
        sweep: settings of the individual and utilitarian sweeps (inner sweep of the government)
        outer_sweep: settings of the government sweep
        starts: government starts, one of both, zero, warm
        check_starts: run the utilitarian two-start check
        scan: optional scan axis
    """

    role: str = "nash"
    epidemic: EpidemicParams = field(default_factory=EpidemicParams)
    individual_cost: CostProfile = field(default_factory=CostProfile)
    government_prefs: Optional[GovernmentPreferences] = None
    sweep: SweepSettings = field(default_factory=SweepSettings)
    outer_sweep: SweepSettings = field(default_factory=SweepSettings.outer)
    starts: str = "both"
    check_starts: bool = False
    scan: Optional[ScanAxis] = None

    def __post_init__(self):
        """Validate the cross-field invariants."""
        if self.role not in ROLES:
            raise InvalidSpecError(f"unknown role '{self.role}', expected one of {ROLES}")
        if (self.role == "government") != (self.government_prefs is not None):
            raise InvalidSpecError("government_prefs must be set exactly for the government role")
        if self.starts not in START_CHOICES:
            raise InvalidSpecError(
                f"unknown starts '{self.starts}', expected one of {list(START_CHOICES)}"
            )
        if self.scan is not None and self.scan.name in GOVERNMENT_AXES:
            if self.role != "government":
                raise InvalidSpecError(f"scan axis '{self.scan.name}' needs the government role")

    @property
    def start_labels(self) -> Tuple[str, ...]:
        """Return the government start labels selected by ``starts``."""
        return START_CHOICES[self.starts]

    def with_axis_value(self, name: str, value: float) -> "ScenarioSpec":
        """Return the single-point spec with one scan parameter set to value."""
        c, gp = self.individual_cost, self.government_prefs
        if name == "alpha1":
            c = replace(c, alpha1=value)
        elif name == "alpha":
            c = replace(c, alpha0=value, alpha1=value)
        elif name == "i_hc":
            c = replace(c, i_hc=value)
            if gp is not None:
                gp = GovernmentPreferences(cost=replace(gp.cost, i_hc=value))
        elif name in GOVERNMENT_AXES:
            if gp is None:
                raise InvalidSpecError(f"scan axis '{name}' needs government preferences")
            if name == "alpha_g1":
                gp = GovernmentPreferences(cost=replace(gp.cost, alpha1=value))
            elif name == "alpha_g":
                gp = GovernmentPreferences(cost=replace(gp.cost, alpha0=value, alpha1=value))
            else:
                gp = GovernmentPreferences(cost=replace(gp.cost, gamma=value))
        else:
            raise InvalidSpecError(f"unknown scan axis '{name}'")
        return replace(self, individual_cost=c, government_prefs=gp, scan=None)

    def to_dict(self) -> dict:
        """Return the spec as plain nested data."""
        return {
            "role": self.role,
            "epidemic": asdict(self.epidemic),
            "individual_cost": self.individual_cost.to_dict(),
            "government_prefs": (
                None if self.government_prefs is None else self.government_prefs.to_dict()
            ),
            "sweep": self.sweep.to_dict(),
            "outer_sweep": self.outer_sweep.to_dict(),
            "starts": self.starts,
            "check_starts": self.check_starts,
            "scan": (
                None
                if self.scan is None
                else {"name": self.scan.name, "values": list(self.scan.values)}
            ),
        }

    @classmethod
    def from_dict(
        cls, data: Dict[str, Any], base: Optional["ScenarioSpec"] = None
    ) -> "ScenarioSpec":
        """Build a spec from nested data, filling missing fields from base.

        Raises:
            InvalidSpecError: on unknown fields or invalid values
        """
        if not isinstance(data, dict):
            raise InvalidSpecError("a scenario document must be a mapping")
        base = base or cls()
        unknown = set(data) - {item.name for item in fields(cls)}
        if unknown:
            raise InvalidSpecError(f"unknown scenario fields {sorted(unknown)}")
        try:
            epidemic = _merge(base.epidemic, data.get("epidemic"))
            individual = _merge(base.individual_cost, data.get("individual_cost"))
            role = data.get("role", base.role)
            prefs = base.government_prefs
            if "government_prefs" in data:
                raw = data["government_prefs"]
                if raw is None:
                    prefs = None
                else:
                    seed = prefs.cost if prefs is not None else individual
                    prefs = GovernmentPreferences(cost=_merge(seed, raw))
            elif role != "government":
                prefs = None
            elif prefs is None:
                prefs = GovernmentPreferences.aligned(individual)
            scan = base.scan
            if "scan" in data:
                raw = data["scan"]
                scan = None if raw is None else ScanAxis(name=raw["name"], values=raw["values"])
            return cls(
                role=role,
                epidemic=epidemic,
                individual_cost=individual,
                government_prefs=prefs,
                sweep=_merge(base.sweep, data.get("sweep")),
                outer_sweep=_merge(base.outer_sweep, data.get("outer_sweep")),
                starts=data.get("starts", base.starts),
                check_starts=bool(data.get("check_starts", base.check_starts)),
                scan=scan,
            )
        except (KeyError, TypeError) as e:
            raise InvalidSpecError(f"malformed scenario document: {str(e)}")


def _merge(instance, overrides: Optional[dict]):
    """Return a copy of a frozen dataclass with the given fields replaced."""
    if not overrides:
        return instance
    if not isinstance(overrides, dict):
        raise InvalidSpecError(f"expected a mapping for {type(instance).__name__}")
    known = {item.name for item in fields(instance)}
    unknown = set(overrides) - known
    if unknown:
        raise InvalidSpecError(f"unknown {type(instance).__name__} fields {sorted(unknown)}")
    return replace(instance, **overrides)


@dataclass(frozen=True)
class Preset:
    """Named scenario together with what it reproduces and how it is checked."""

    name: str
    spec: ScenarioSpec
    description: str
    panel: str
    tolerance: str


@dataclass(frozen=True)
class ScenarioResult:
    """Solved scenario with its summary metrics and run metadata."""

    spec: ScenarioSpec
    solution: Solution
    metrics: ScenarioMetrics
    metadata: Dict[str, Any]

    @property
    def role(self) -> str:
        """Return the role of the solved scenario."""
        return self.spec.role

    @property
    def traj(self) -> Trajectory:
        """Return the trajectory of the solution."""
        return self.solution if isinstance(self.solution, Trajectory) else self.solution.traj

    def to_dict(self) -> dict:
        """Return the result as plain nested data, trajectory included."""
        return {
            "role": self.role,
            "spec": self.spec.to_dict(),
            "metrics": self.metrics.to_dict(),
            "metadata": self.metadata,
            "trajectory": {name: values.tolist() for name, values in self.traj.columns().items()},
        }


@dataclass(frozen=True)
class PointOutcome:
    """Outcome of one scan point; failed points carry the error instead of metrics."""

    value: float
    metrics: Optional[ScenarioMetrics] = None
    converged: bool = False
    iterations: int = 0
    horizon_ok: Optional[bool] = None
    error: Optional[str] = None
    exit_code: Optional[int] = None
    start_values: Optional[Dict[str, Optional[float]]] = None
    start_branches: Optional[Dict[str, Optional[str]]] = None
    n_local_optima: Optional[int] = None
    flags: Tuple[str, ...] = ()
    references: Optional[Dict[str, Dict[str, Any]]] = None

    @property
    def branch(self) -> Optional[str]:
        """Return the branch label of the point, None if failed or not a government run."""
        return None if self.metrics is None else self.metrics.branch

    def to_dict(self) -> dict:
        """Return the outcome as plain data."""
        data = asdict(self)
        data["flags"] = list(self.flags)
        return data


@dataclass(frozen=True)
class ScanResult:
    """Metrics along a scan axis and the detected branch crossover."""

    spec: ScenarioSpec
    axis: str
    values: Tuple[float, ...]
    points: Tuple[PointOutcome, ...]
    crossover: Optional[Tuple[float, float]] = None

    def series(self, name: str) -> np.ndarray:
        """Return one metric along the axis, NaN at failed points."""
        return np.array(
            [np.nan if p.metrics is None else getattr(p.metrics, name) for p in self.points],
            dtype=float,
        )

    @property
    def normalized_cost(self) -> Dict[str, List[Optional[float]]]:
        """Return total cost in units of the minimum and of the maximum infection cost."""
        by_alpha0, by_alpha1 = [], []
        for value, point in zip(self.values, self.points):
            profile = _cost_owner(self.spec.with_axis_value(self.axis, value))
            if point.metrics is None:
                by_alpha0.append(None)
                by_alpha1.append(None)
                continue
            cost = point.metrics.total_cost
            by_alpha0.append(cost / profile.alpha0 if profile.alpha0 > 0 else None)
            by_alpha1.append(cost / profile.alpha1 if profile.alpha1 > 0 else None)
        return {"alpha0": by_alpha0, "alpha1": by_alpha1}

    def to_dict(self) -> dict:
        """Return the result as plain nested data."""
        return {
            "spec": self.spec.to_dict(),
            "axis": self.axis,
            "values": list(self.values),
            "metrics": {
                name: [getattr(p.metrics, name) if p.metrics else None for p in self.points]
                for name in ("peak_i", "total_cases", "duration", "total_cost", "branch")
            },
            "normalized_cost": self.normalized_cost,
            "points": [point.to_dict() for point in self.points],
            "crossover": None if self.crossover is None else list(self.crossover),
        }


def _cost_owner(spec: ScenarioSpec) -> CostProfile:
    """Return the profile whose objective is reported as total cost."""
    return spec.government_prefs.cost if spec.role == "government" else spec.individual_cost


def log_grid(lo: float, hi: float, per_decade: int = PER_DECADE) -> Tuple[float, ...]:
    """Return log-spaced values from lo to hi with per_decade points per decade."""
    if not 0 < lo < hi:
        raise InvalidSpecError(f"a log grid needs 0 < lo < hi - got lo={lo}, hi={hi}")
    if per_decade < 1:
        raise InvalidSpecError(f"per_decade must be >= 1 - got {per_decade}")
    count = max(int(round(per_decade * math.log10(hi / lo))), 1) + 1
    return tuple(float(v) for v in np.geomspace(lo, hi, count))


def _build_presets() -> Dict[str, Preset]:
    constant_400 = CostProfile.constant(400.0)
    individual_100 = CostProfile.constant(100.0, i_hc=0.01)
    gov_threshold = CostProfile(alpha0=100.0, alpha1=400.0, i_hc=0.01)
    gov_constant = CostProfile.constant(100.0, i_hc=0.01)
    presets = [
        Preset(
            name="fig2-baseline",
            spec=ScenarioSpec(role="baseline"),
            description="Epidemic without behaviour change, k = kappa* = 4.",
            panel="course of the epidemic: baseline (grey) curves of s and i",
            tolerance="peak_i = 0.4034 +- 1e-3, total_cases = 0.980 +- 1e-3",
        ),
        Preset(
            name="fig2-nash-400",
            spec=ScenarioSpec(role="nash", individual_cost=constant_400),
            description="Nash equilibrium for a constant infection cost alpha = 400.",
            panel="course of the epidemic: Nash equilibrium (black) curves of k, s and i",
            tolerance="-U within 1% of a direct optimisation on 50 control nodes",
        ),
        Preset(
            name="fig2-utilitarian-400",
            spec=ScenarioSpec(role="utilitarian", individual_cost=constant_400),
            description="Utilitarian optimum for a constant infection cost alpha = 400.",
            panel="course of the epidemic: utilitarian (gold dashed) curves of k, s and i",
            tolerance="U_p >= U_p of the Nash behaviour; H_p drift < 1e-4",
        ),
        Preset(
            name="fig2-gov-free",
            spec=ScenarioSpec(
                role="government",
                individual_cost=constant_400,
                government_prefs=GovernmentPreferences.aligned(constant_400, gamma=0.0),
                starts="zero",
            ),
            description="Cost-free government with preferences aligned to alpha = 400.",
            panel="course of the epidemic: cost-free intervention (gold) curves of k and eps",
            tolerance="sup|k - k_utilitarian| < 1e-3; eps > 0 early, then eps < 0",
        ),
        Preset(
            name="fig2-gov-costly",
            spec=ScenarioSpec(
                role="government",
                individual_cost=constant_400,
                government_prefs=GovernmentPreferences.aligned(constant_400, gamma=0.5),
                starts="zero",
            ),
            description="Costly government (gamma_g = 0.5), preferences aligned to alpha = 400.",
            panel="course of the epidemic: costly intervention (cyan) curves of k and eps",
            tolerance="var(k) over the epidemic below the cost-free case; -V < -U of Nash",
        ),
        Preset(
            name="fig3-nash-hc-0.1",
            spec=ScenarioSpec(
                role="nash",
                individual_cost=CostProfile(alpha0=100.0, alpha1=400.0, i_hc=0.1),
                scan=ScanAxis(name="alpha1", values=log_grid(100.0, 800.0)),
            ),
            description="Nash equilibrium with a healthcare threshold i_hc = 0.1, alpha0 = 100.",
            panel="threshold scan: peak, cases, duration and cost against alpha1 (i_hc = 0.1)",
            tolerance="peak_i nonincreasing; peak_i <= 1.2 i_hc at alpha1 = 400; "
            "peak meets i_hc for alpha1 in [200, 300]",
        ),
        Preset(
            name="fig3-nash-constant",
            spec=ScenarioSpec(
                role="nash",
                individual_cost=CostProfile.constant(100.0),
                scan=ScanAxis(name="alpha", values=(100.0, 200.0, 400.0, 800.0)),
            ),
            description="Nash equilibrium for constant infection costs alpha in 100..800.",
            panel="threshold scan: constant-cost reference line and the -U/alpha1 inset",
            tolerance="-U/alpha constant within +-10%; peak nonincreasing, duration nondecreasing",
        ),
        Preset(
            name="fig4-nash-hc-0.01",
            spec=ScenarioSpec(
                role="nash",
                individual_cost=CostProfile(alpha0=100.0, alpha1=400.0, i_hc=0.01),
                scan=ScanAxis(name="alpha1", values=log_grid(100.0, 1600.0)),
            ),
            description="Nash equilibrium without intervention, healthcare threshold i_hc = 0.01.",
            panel="government scan: no-intervention reference (red) peak against alpha1",
            tolerance="peak_i continuous in alpha1 (no jump above 50% between neighbours)",
        ),
        Preset(
            name="fig4-gov-hc-0.01-free",
            spec=ScenarioSpec(
                role="government",
                individual_cost=individual_100,
                government_prefs=GovernmentPreferences(cost=gov_threshold),
                scan=ScanAxis(name="alpha_g1", values=log_grid(100.0, 1600.0)),
            ),
            description="Cost-free government, threshold i_hc = 0.01, individuals at alpha = 100.",
            panel="government scan: cost-free intervention with threshold (green) peak",
            tolerance="two distinct optima per point; peak jumps > 50% once at the crossover",
        ),
        Preset(
            name="fig4-gov-hc-0.01-costly",
            spec=ScenarioSpec(
                role="government",
                individual_cost=individual_100,
                government_prefs=GovernmentPreferences(cost=replace(gov_threshold, gamma=0.5)),
                scan=ScanAxis(name="alpha_g1", values=log_grid(100.0, 1600.0)),
            ),
            description="Costly government (gamma_g = 0.5), threshold i_hc = 0.01.",
            panel="government scan: costly intervention with threshold (purple) peak",
            tolerance="crossover alpha_g1 above the cost-free crossover",
        ),
        Preset(
            name="fig4-gov-constant-free",
            spec=ScenarioSpec(
                role="government",
                individual_cost=individual_100,
                government_prefs=GovernmentPreferences(cost=gov_constant),
                starts="zero",
                scan=ScanAxis(name="alpha_g", values=log_grid(100.0, 1600.0)),
            ),
            description="Cost-free government with a constant infection cost alpha_g.",
            panel="government scan: constant-cost reference of the cost-free intervention",
            tolerance="every point converges from the zero start",
        ),
        Preset(
            name="fig4-gov-constant-costly",
            spec=ScenarioSpec(
                role="government",
                individual_cost=individual_100,
                government_prefs=GovernmentPreferences(cost=replace(gov_constant, gamma=0.5)),
                starts="zero",
                scan=ScanAxis(name="alpha_g", values=log_grid(100.0, 1600.0)),
            ),
            description="Costly government (gamma_g = 0.5), constant infection cost alpha_g.",
            panel="government scan: constant-cost reference of the costly intervention",
            tolerance="every point converges from the zero start",
        ),
    ]
    return {preset.name: preset for preset in presets}


PRESETS = _build_presets()


def get_preset(name: str) -> Preset:
    """Return a preset by name.

    Raises:
        InvalidSpecError: if no preset has that name
    """
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidSpecError(f"unknown preset '{name}', expected one of {sorted(PRESETS)}")


def render_presets() -> str:
    """Return the preset catalogue rendered as markdown."""
    template = Template(TEMPLATE_FILE.read_text())
    return template.render(
        presets=[
            {
                "name": preset.name,
                "role": preset.spec.role,
                "description": preset.description,
                "panel": preset.panel,
                "tolerance": preset.tolerance,
                "parameters": _key_parameters(preset.spec),
            }
            for preset in PRESETS.values()
        ]
    )


def _key_parameters(spec: ScenarioSpec) -> Dict[str, Any]:
    c = spec.individual_cost
    params = {"alpha0": c.alpha0, "alpha1": c.alpha1, "i_hc": c.i_hc}
    if spec.government_prefs is not None:
        g = spec.government_prefs.cost
        params.update({"alpha_g0": g.alpha0, "alpha_g1": g.alpha1, "gamma_g": g.gamma})
    if spec.scan is not None:
        params["scan"] = f"{spec.scan.name} in [{spec.scan.values[0]:g}, {spec.scan.values[-1]:g}]"
    return params


def run_scenario(spec: ScenarioSpec, warm_start: Optional[np.ndarray] = None) -> ScenarioResult:
    """Solve one scenario for its role and summarise it.

    Args:
        spec: scenario description; a scan axis is ignored
        warm_start: precomputed eps of the government "warm" start

    Raises:
        ErrorWithExitCode: solver failures, with their diagnostics
    """
    p, c = spec.epidemic, spec.individual_cost
    logger.info(
        "solving %s scenario (alpha0=%g, alpha1=%g, i_hc=%g, n_grid=%d)",
        spec.role,
        c.alpha0,
        c.alpha1,
        c.i_hc,
        p.n_grid,
    )
    zero = np.zeros(int(p.n_grid))
    metadata: Dict[str, Any] = {"alpha_at_zero": alpha_at_zero(c)}
    branch = None

    if spec.role == "baseline":
        solution = integrate_sir(p.kappa_star, p)
        cost = -utility(solution, p, c)
        metadata.update(iterations=0)
    elif spec.role == "nash":
        solution = solve_nash(zero, p, c, spec.sweep)
        cost = -solution.utility
        metadata.update(iterations=solution.iterations, residual=solution.residual)
    elif spec.role == "utilitarian":
        solution = solve_utilitarian(zero, p, c, spec.sweep, check_starts=spec.check_starts)
        cost = -solution.utility
        metadata.update(
            iterations=solution.iterations,
            residual=solution.residual,
            starts_agree=solution.starts_agree,
        )
    else:
        gp = spec.government_prefs
        solution = solve_government(
            p,
            c,
            gp,
            sweep_outer=spec.outer_sweep,
            sweep_inner=spec.sweep,
            starts=spec.start_labels,
            warm_start=warm_start,
        )
        cost = -solution.value
        branch = solution.branch
        metadata.update(
            alpha_g_at_zero=alpha_at_zero(gp.cost),
            iterations=solution.iterations,
            residual=solution.residual,
            starts=[outcome.to_dict() for outcome in solution.starts],
            n_local_optima=solution.n_local_optima,
            flags=list(solution.flags),
        )

    traj = solution if isinstance(solution, Trajectory) else solution.traj
    ok = horizon_ok(traj)
    metadata.update(horizon_ok=ok, i_final=float(traj.i[-1]))
    if not ok:
        logger.warning(
            "i(t_f) = %.3e is not below 1e-8; the salvage term is inaccurate, raise t_f",
            traj.i[-1],
        )
    summary = metrics(traj, cost, branch=branch)
    logger.info(
        "%s scenario solved: peak_i=%.6g total_cases=%.6g duration=%.6g total_cost=%.8g",
        spec.role,
        summary.peak_i,
        summary.total_cases,
        summary.duration,
        summary.total_cost,
    )
    return ScenarioResult(spec=spec, solution=solution, metrics=summary, metadata=metadata)


def _evaluate_point(
    spec: ScenarioSpec,
    value: float,
    warm_start: Optional[np.ndarray] = None,
    with_references: bool = False,
) -> PointOutcome:
    """Solve one scan point, recording failures instead of raising them."""
    try:
        result = run_scenario(spec, warm_start=warm_start)
    except ErrorWithExitCode as err:
        logger.warning("scan point %g failed: %s", value, err.msg)
        return PointOutcome(value=value, error=err.msg, exit_code=err.exit_code)

    extra: Dict[str, Any] = {}
    if spec.role == "government":
        solution = result.solution
        extra.update(
            start_values=solution.start_values,
            start_branches={o.label: o.branch for o in solution.starts},
            n_local_optima=solution.n_local_optima,
            flags=tuple(solution.flags),
        )
    if with_references and spec.role == "nash" and not spec.individual_cost.is_constant:
        extra["references"] = _constant_references(spec)
    return PointOutcome(
        value=value,
        metrics=result.metrics,
        converged=True,
        iterations=int(result.metadata.get("iterations", 0)),
        horizon_ok=result.metadata["horizon_ok"],
        **extra,
    )


def _constant_references(spec: ScenarioSpec) -> Dict[str, Dict[str, Any]]:
    """Return Nash metrics for constant costs at alpha0 and at alpha1 of the point."""
    references = {}
    c = spec.individual_cost
    for label, alpha in (("alpha0", c.alpha0), ("alpha1", c.alpha1)):
        constant = replace(spec, individual_cost=replace(c, alpha0=alpha, alpha1=alpha))
        try:
            references[label] = run_scenario(constant).metrics.to_dict()
        except ErrorWithExitCode as err:
            references[label] = {"error": err.msg}
    return references


def _warm_starts(
    specs: Sequence[ScenarioSpec],
) -> Tuple[List[ScenarioSpec], List[Optional[np.ndarray]]]:
    """Compute the tracking warm starts once per distinct parameter set.

    Points whose warm start fails fall back to the zero start only.
    """
    cache: Dict[Any, Optional[np.ndarray]] = {}
    resolved_specs, starts = [], []
    for spec in specs:
        if spec.role != "government" or "warm" not in spec.start_labels:
            resolved_specs.append(spec)
            starts.append(None)
            continue
        key = (
            spec.epidemic,
            spec.individual_cost,
            tracking_preferences(spec.government_prefs),
            spec.outer_sweep,
            spec.sweep,
        )
        if key not in cache:
            try:
                cache[key] = np.array(tracking_warm_start(*key))
            except ErrorWithExitCode as err:
                logger.warning("tracking warm start failed, using the zero start: %s", err.msg)
                cache[key] = None
        if cache[key] is None:
            resolved_specs.append(replace(spec, starts="zero"))
        else:
            resolved_specs.append(spec)
        starts.append(cache[key])
    return resolved_specs, starts


def run_scan(spec: ScenarioSpec, jobs: int = 1, with_references: bool = False) -> ScanResult:
    """Evaluate a scenario at every value of its scan axis.

    Points are independent and run in parallel with joblib when jobs != 1. For government
    scans the value at which the branch label flips is refined by bisection.

    Args:
        spec: scenario with a scan axis
        jobs: number of joblib workers, -1 for all cores
        with_references: add constant-cost Nash references to threshold scans

    Raises:
        InvalidSpecError: if the spec has no scan axis
    """
    if spec.scan is None:
        raise InvalidSpecError("run_scan needs a spec with a scan axis")
    axis, values = spec.scan.name, spec.scan.values
    logger.info("scanning %s over %d values with %d jobs", axis, len(values), jobs)

    point_specs = [spec.with_axis_value(axis, value) for value in values]
    point_specs, warm = _warm_starts(point_specs)
    points = Parallel(n_jobs=jobs)(
        delayed(_evaluate_point)(point_spec, value, warm_start, with_references)
        for point_spec, value, warm_start in zip(point_specs, values, warm)
    )
    for point in points:
        status = "failed" if point.error else (point.branch or "ok")
        logger.info("scan %s=%g: %s", axis, point.value, status)

    crossover = None
    if spec.role == "government":
        crossover = _detect_crossover(spec, axis, values, points)
    return ScanResult(
        spec=spec, axis=axis, values=tuple(values), points=tuple(points), crossover=crossover
    )


def _detect_crossover(
    spec: ScenarioSpec, axis: str, values: Sequence[float], points: Sequence[PointOutcome]
) -> Optional[Tuple[float, float]]:
    """Return the interval in which the government branch label flips, if it does."""
    flips = [
        j
        for j in range(len(points) - 1)
        if points[j].branch is not None
        and points[j + 1].branch is not None
        and points[j].branch != points[j + 1].branch
    ]
    if not flips:
        return None
    if len(flips) > 1:
        logger.warning("branch label flips %d times in the scan; refining the first", len(flips))
    j = flips[0]
    lo, hi = values[j], values[j + 1]
    low_branch = points[j].branch
    for _ in range(CROSSOVER_DEPTH):
        mid = math.sqrt(lo * hi) if lo > 0 else 0.5 * (lo + hi)
        point_spec, warm = _warm_starts([spec.with_axis_value(axis, mid)])
        outcome = _evaluate_point(point_spec[0], mid, warm[0])
        if outcome.branch is None:
            logger.warning("crossover refinement stopped at %s=%g: %s", axis, mid, outcome.error)
            break
        if outcome.branch == low_branch:
            lo = mid
        else:
            hi = mid
    logger.info("branch crossover of %s in [%g, %g]", axis, lo, hi)
    return lo, hi


def load_spec(path: Union[str, Path], base: Optional[ScenarioSpec] = None) -> ScenarioSpec:
    """Load a scenario document; .yaml/.yml files are read as YAML, anything else as JSON.

    A JSON export of a result is accepted as well, its resolved spec is used.

    Raises:
        ArtifactError: if the file cannot be read
        InvalidSpecError: if the document is malformed
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ArtifactError(f"cannot read scenario file '{path}': {str(e)}")
    try:
        if path.suffix in (".yaml", ".yml"):
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except (yaml.YAMLError, ValueError) as e:
        raise InvalidSpecError(f"cannot parse scenario file '{path}': {str(e)}")
    if isinstance(data, dict) and isinstance(data.get("spec"), dict):
        data = data["spec"]
    return ScenarioSpec.from_dict(data, base=base)


def _trajectory_frame(traj: Trajectory) -> pd.DataFrame:
    return pd.DataFrame(traj.columns())


def _scan_frame(result: ScanResult) -> pd.DataFrame:
    frame = pd.DataFrame(
        {
            result.axis: result.values,
            "peak_i": result.series("peak_i"),
            "total_cases": result.series("total_cases"),
            "duration": result.series("duration"),
            "total_cost": result.series("total_cost"),
            "branch": [point.branch for point in result.points],
            "error": [point.error for point in result.points],
        }
    )
    return frame


def _json_ready(value):
    """Replace non-finite floats by None so that the document is strict JSON."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {key: _json_ready(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(item) for item in value]
    return value


def _write(result: Union[ScenarioResult, ScanResult], fmt: str, path: Path) -> None:
    if fmt == "csv":
        if isinstance(result, ScanResult):
            frame = _scan_frame(result)
        else:
            frame = _trajectory_frame(result.traj)
        frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    else:
        # floats are written as their shortest round-trip repr, the same double that 17
        # significant digits give
        with open(path, "w") as fh:
            json.dump(_json_ready(result.to_dict()), fh, indent=1, allow_nan=False)
            fh.write("\n")


def export(
    result: Union[ScenarioResult, ScanResult],
    fmt: str,
    path: Union[str, Path],
    store: Optional[S3ArtifactStore] = None,
) -> str:
    """Persist a result and return where it was written.

    CSV holds the trajectory of a scenario, or one row per point of a scan. JSON holds the
    full result including the resolved spec. Floats keep their exact round-trip value.
    ``s3://bucket/key`` destinations are written to a temporary file and uploaded.

    Raises:
        ArtifactError: if writing or uploading fails, with the original message
        InvalidSpecError: on an unknown format
    """
    if fmt not in FORMATS:
        raise InvalidSpecError(f"unknown export format '{fmt}', expected one of {FORMATS}")
    if is_s3_uri(path):
        store = store or S3ArtifactStore()
        _, key = parse_s3_uri(str(path))
        kind = "scan" if isinstance(result, ScanResult) else result.role
        with tempfile.TemporaryDirectory() as tmp:
            local = Path(tmp) / (key.rsplit("/", 1)[-1] or f"{kind}.{fmt}")
            _write_local(result, fmt, local)
            return store.upload(local, str(path))
    target = Path(path)
    _write_local(result, fmt, target)
    logger.info("wrote %s export to %s", fmt, target)
    return str(target)


def _write_local(result, fmt: str, path: Path) -> None:
    try:
        _write(result, fmt, path)
    except OSError as e:
        raise ArtifactError(f"cannot write '{path}': {str(e)}")
