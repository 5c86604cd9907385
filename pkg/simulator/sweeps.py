"""
Parameter Sweeps
Ice-thickness and ice-temperature sweeps run as independent scenarios in
parallel worker processes
"""

import logging
from typing import Iterable, List, Sequence

from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from diagnostics import RunSummary
from scenario_runner import ScenarioConfig, apply_overrides, run_scenario

logger = logging.getLogger(__name__)

THICKNESSES = (100.0, 200.0, 300.0, 400.0, 500.0)
TEMPERATURES = (0.0, -2.0, -4.0, -6.0, -8.0)
RHEOLOGIES = ("elastic", "viscoelastic")

# both sweeps: 5 m path elements, reduced strength, constant creep coefficient
SWEEP_SETUP = dict(fine_element_size=5.0, f_t=0.3e6, creep_A=5e-24)
TEMPERATURE_SWEEP_THICKNESS = 300.0


def _run_one(config: ScenarioConfig) -> RunSummary:
    # one BLAS thread per worker; the workers already saturate the cores
    with threadpool_limits(limits=1):
        return run_scenario(config).summary


def run_sweep(configs: Sequence[ScenarioConfig], n_jobs: int = 1) -> List[RunSummary]:
    """Run scenarios concurrently; results come back in input order"""
    logger.info(f"🚀 Sweep of {len(configs)} scenarios on {n_jobs} workers")
    return Parallel(n_jobs=n_jobs)(delayed(_run_one)(c) for c in configs)


def thickness_configs(base: ScenarioConfig, thicknesses: Iterable[float] = THICKNESSES,
                      rheologies: Iterable[str] = RHEOLOGIES) -> List[ScenarioConfig]:
    """Temperate ice at each thickness and rheology; geometry and time stepping come from base"""
    configs = []
    for rheology in rheologies:
        for thickness in thicknesses:
            label = f"H{thickness:g}_{rheology}"
            configs.append(apply_overrides(base, **SWEEP_SETUP, temperature=0.0, ice_thickness=thickness,
                                           rheology=rheology, label=label, output_dir=base.output_dir / label))
    return configs


def temperature_configs(base: ScenarioConfig, temperatures: Iterable[float] = TEMPERATURES) -> List[ScenarioConfig]:
    """300 m of ice at each constant temperature"""
    configs = []
    for temperature in temperatures:
        label = f"T{temperature:g}C"
        configs.append(apply_overrides(base, **SWEEP_SETUP, ice_thickness=TEMPERATURE_SWEEP_THICKNESS,
                                       temperature=temperature, label=label, output_dir=base.output_dir / label))
    return configs


def thickness_sweep(base: ScenarioConfig, thicknesses: Iterable[float] = THICKNESSES,
                    rheologies: Iterable[str] = RHEOLOGIES, n_jobs: int = 1) -> List[RunSummary]:
    """Does horizontal cracking develop at each thickness, for each rheology"""
    summaries = run_sweep(thickness_configs(base, thicknesses, rheologies), n_jobs)
    for s in summaries:
        logger.info(f"H={s.ice_thickness:g} m {s.rheology}: horizontal cracking={s.horizontal_cracking}, "
                    f"arm {s.arm_length_m:.1f} m")
    return summaries


def temperature_sweep(base: ScenarioConfig, temperatures: Iterable[float] = TEMPERATURES,
                      n_jobs: int = 1) -> List[RunSummary]:
    """Depth at which freezing shuts the crevasse for each constant ice temperature"""
    temperatures = list(temperatures)
    summaries = run_sweep(temperature_configs(base, temperatures), n_jobs)
    for temperature, s in zip(temperatures, summaries):
        reached = "reached the bed" if s.bed_time_s is not None else f"arrested at {s.final_crevasse_depth_m:.1f} m"
        logger.info(f"T={temperature:g} degC: crevasse {reached}")
    return summaries
