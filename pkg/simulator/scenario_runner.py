"""
Scenario Runner
Parses key = value scenario files and drives a complete simulation from
meshing through creep initialisation and propagation to the result files
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from channel_thm import FlowParams
from constitutive import ConvergenceError, TemperatureProfile, load_temperature_profile
from diagnostics import (
    RunSummary,
    TimeSeriesRecorder,
    TimeSeriesRow,
    compare_with_observations,
    fluid_balance,
    lake_level_conversion,
    summarize_run,
)
from geometry_mesh import DomainSpec, build_mesh, dump_mesh
from global_solver import (
    HydrofractureModel,
    Observer,
    PropagationError,
    SimState,
    SolverSettings,
    creep_initialize,
    initial_state,
    run,
    static_solve,
)
from material_table import MaterialTable, default_materials
from output_writer import OutputWriter

logger = logging.getLogger(__name__)

DEFAULT_PROFILE = Path(__file__).resolve().parent.parent / "configs" / "temperature_profile.txt"
REFERENCE_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "reduced_reference.cfg"

__all__ = [
    "REFERENCE_CONFIG", "ConfigError", "ScenarioConfig", "ScenarioResult", "TimeSeriesRow", "apply_overrides",
    "lake_level_conversion", "load_config", "parse_config", "run_scenario",
]


class ConfigError(ValueError):
    """Invalid scenario file or override, with the offending line when known"""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ScenarioConfig(BaseModel):
    """One simulation; field names are the keys accepted in scenario files"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # geometry
    ice_thickness: float = Field(default=980.0, gt=0)
    domain_width: float = Field(default=6000.0, gt=0)
    rock_thickness: float = Field(default=200.0, gt=0)
    notch_depth: float = Field(default=30.0, gt=0)
    fine_element_size: float = Field(default=2.5, gt=0)
    coarse_element_size: float = Field(default=20.0, gt=0)
    growth_ratio: float = Field(default=1.2, gt=1)
    arm_extent: Optional[float] = Field(default=None, gt=0)

    # materials
    rheology: Literal["elastic", "viscoelastic"] = "viscoelastic"
    temperature: Optional[float] = Field(default=None, le=0)
    temperature_profile: Optional[Path] = None
    f_t: Optional[float] = Field(default=None, gt=0)
    creep_A: Optional[float] = Field(default=None, ge=0)
    p_ext: float = Field(default=1e5, ge=0)
    gravity: float = Field(default=9.81, ge=0)

    # time stepping
    dt: float = Field(default=2.0, gt=0)
    duration: float = Field(default=7200.0, gt=0)
    init_dt: float = Field(default=600.0, gt=0)
    init_duration: float = Field(default=86400.0, ge=0)
    propagate: bool = True
    energy_tolerance: float = Field(default=1e-8, gt=0)
    max_iterations: int = Field(default=25, ge=1)
    max_insertions: int = Field(default=500, ge=1)

    # lake and output
    lake_area: float = Field(default=5.6e6, gt=0)
    w_oop: float = Field(default=3200.0, gt=0)
    output_stride: int = Field(default=1, ge=1)
    snapshot_stride: int = Field(default=0, ge=0)
    output_dir: Path = Path("results")
    mesh_dump: bool = False
    label: str = "north_lake"

    @model_validator(mode="after")
    def _check_consistency(self) -> "ScenarioConfig":
        if self.duration <= self.dt:
            raise ValueError(f"duration ({self.duration} s) must exceed the time step ({self.dt} s)")
        if self.temperature is not None and self.temperature_profile is not None:
            raise ValueError("give either a constant temperature or a temperature profile, not both")
        return self

    def domain(self) -> DomainSpec:
        return DomainSpec(
            ice_thickness=self.ice_thickness, domain_width=self.domain_width,
            rock_thickness=self.rock_thickness, initial_notch_depth=self.notch_depth,
            fine_element_size=self.fine_element_size, coarse_element_size=self.coarse_element_size,
            growth_ratio=self.growth_ratio, arm_extent=self.arm_extent,
        )

    def profile(self) -> TemperatureProfile:
        if self.temperature is not None:
            return TemperatureProfile.constant(self.temperature, self.ice_thickness)
        return load_temperature_profile(self.temperature_profile or DEFAULT_PROFILE)

    def materials(self) -> MaterialTable:
        table = default_materials(
            profile=self.profile(), rheology=self.rheology, override_f_t=self.f_t,
            override_A=self.creep_A, p_ext=self.p_ext, flow=FlowParams(gravity=self.gravity),
        )
        table.check_profile(self.ice_thickness)
        return table

    def settings(self) -> SolverSettings:
        return SolverSettings(dt=self.dt, duration=self.duration, init_dt=self.init_dt,
                              init_duration=self.init_duration, propagate=self.propagate,
                              energy_tolerance=self.energy_tolerance, max_iterations=self.max_iterations,
                              max_insertions=self.max_insertions)


def _raise_config_error(error: ValidationError, lines: dict) -> None:
    first = error.errors()[0]
    key = first["loc"][0] if first["loc"] else None
    name = f"{key}: " if key is not None else ""
    raise ConfigError(f"{name}{first['msg']}", lines.get(key)) from error


def parse_config(text: str) -> ScenarioConfig:
    """Read `key = value` lines; '#' starts a comment, omitted keys keep their defaults"""
    values = {}
    lines = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got '{line}'", number)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"empty key or value in '{line}'", number)
        if key not in ScenarioConfig.model_fields:
            raise ConfigError(f"unknown key '{key}'", number)
        if key in values:
            raise ConfigError(f"'{key}' given twice (first on line {lines[key]})", number)
        values[key] = None if value.lower() == "none" else value
        lines[key] = number
    try:
        return ScenarioConfig(**values)
    except ValidationError as e:
        _raise_config_error(e, lines)


def load_config(path: Union[str, Path]) -> ScenarioConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    config = parse_config(text)
    if config.temperature_profile is not None and not config.temperature_profile.is_absolute():
        config = config.model_copy(update={"temperature_profile": Path(path).parent / config.temperature_profile})
    logger.info(f"Loaded scenario '{config.label}' from {path}")
    return config


def apply_overrides(config: ScenarioConfig, **overrides) -> ScenarioConfig:
    """New config with the non-None overrides applied and re-validated"""
    updates = {k: v for k, v in overrides.items() if v is not None}
    if overrides.get("temperature") is not None:
        updates["temperature_profile"] = None
    elif overrides.get("temperature_profile") is not None:
        updates["temperature"] = None
    try:
        return ScenarioConfig.model_validate({**config.model_dump(), **updates})
    except ValidationError as e:
        _raise_config_error(e, {})


class SnapshotObserver:
    """Writes a VTK snapshot every `stride` increments, named by step number"""

    def __init__(self, writer: OutputWriter, stride: int):
        self.writer = writer
        self.stride = stride

    def __call__(self, model: HydrofractureModel, state: SimState) -> None:
        step = round(state.time / model.settings.dt)
        self.writer.write_snapshot(model, state, f"snapshot_{step:05d}.vtk")


@dataclass
class ScenarioResult:
    rows: List[TimeSeriesRow]
    state: SimState
    summary: RunSummary
    model: HydrofractureModel


def run_scenario(config: ScenarioConfig, observers: Sequence[Observer] = ()) -> ScenarioResult:
    """Mesh, initialise, propagate and write every result file of one scenario"""
    logger.info(f"🚀 Scenario '{config.label}': H={config.ice_thickness:g} m, {config.rheology}, "
                f"dt={config.dt:g} s, duration={config.duration:g} s")
    materials = config.materials()
    mesh, path = build_mesh(config.domain())
    model = HydrofractureModel(mesh, path, materials, settings=config.settings())
    state = initial_state(model)

    writer = OutputWriter(config.output_dir)
    if config.mesh_dump:
        dump_mesh(mesh, writer.path("mesh"))
    recorder = TimeSeriesRecorder(config.output_stride)
    all_observers: List[Observer] = [recorder, *observers]
    if config.snapshot_stride:
        all_observers.append(SnapshotObserver(writer, config.snapshot_stride))

    try:
        if np.any(model.ip_A > 0):
            creep_initialize(model, state)
        else:
            static_solve(model, state)
        run(model, state, all_observers)
    except (ConvergenceError, PropagationError) as e:
        logger.error(f"❌ Solver failure at t={state.time:.1f} s: {e}")
        writer.write_timeseries(recorder.rows, "timeseries_partial.csv")
        writer.write_snapshot(model, state, "failure.vtk")
        raise

    rows = recorder.rows
    writer.write_timeseries(rows)
    writer.write_snapshot(model, state, "final.vtk")
    summary = summarize_run(rows, config.rheology, config.ice_thickness, config.w_oop, config.lake_area)
    summary = summary.model_copy(update={"observation_deviations": compare_with_observations(summary)})
    writer.write_summary(summary)

    balance = fluid_balance(model, state)
    logger.info(f"✅ Done: Q_total={state.Q_total:.2f} m3/m "
                f"(lake drop {lake_level_conversion(state.Q_total, config.w_oop, config.lake_area):.3f} m), "
                f"water balance closes to {balance.closure_error:.2e}")
    return ScenarioResult(rows=rows, state=state.snapshot(), summary=summary, model=model)
