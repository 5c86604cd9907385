"""
Run Diagnostics
Per-step time-series rows, fluid balance, lake-level conversion and the
summary of a finished run compared with the field observations
"""

import logging
import math
from dataclasses import astuple, dataclass, fields
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

if TYPE_CHECKING:
    from global_solver import HydrofractureModel, SimState

logger = logging.getLogger(__name__)

UPLIFT_STATIONS = (0.0, 500.0, 1000.0, 2000.0)


@dataclass(frozen=True)
class TimeSeriesRow:
    time_s: float
    crevasse_depth_m: float
    crack_left_m: float
    crack_right_m: float
    mouth_open_def_m: float
    mouth_open_melt_m: float
    p_base_Pa: float
    p_tip_Pa: float
    q_inlet_m2_s: float
    Q_total_m3pm: float
    E_friction_Jpm: float
    E_conduction_Jpm: float
    E_phase_Jpm: float
    uplift_0m: float
    uplift_500m: float
    uplift_1000m: float
    uplift_2000m: float

    def values(self) -> tuple:
        return astuple(self)

    def normalised_energies(self, rho_i: float = 910.0, latent_heat: float = 335000.0) -> Dict[str, float]:
        """Energies expressed as the ice volume per metre they would melt or freeze"""
        scale = rho_i * latent_heat
        return {
            "friction": self.E_friction_Jpm / scale,
            "conduction": self.E_conduction_Jpm / scale,
            "phase": self.E_phase_Jpm / scale,
        }


CSV_COLUMNS = tuple(f.name for f in fields(TimeSeriesRow))
CSV_HEADER = ",".join(CSV_COLUMNS)


def _vertex_pressure(model: "HydrofractureModel", state: "SimState", node: int) -> float:
    index = model.mesh.pressure_index.get(node)
    return float(state.p[index]) if index is not None else float("nan")


def build_row(model: "HydrofractureModel", state: "SimState") -> TimeSeriesRow:
    """Diagnostics of the current state"""
    path = model.path
    mesh = model.mesh
    lengths = {arm: path.opened_length(arm) for arm in ("vertical", "left", "right")}

    base = path.tip_segment("vertical")
    p_base = _vertex_pressure(model, state, base.nodes[2]) if base is not None else float("nan")
    longer = "left" if lengths["left"] >= lengths["right"] else "right"
    tip = path.tip_segment(longer)
    p_tip = _vertex_pressure(model, state, tip.nodes[2]) if tip is not None else p_base

    uy = state.u[1::2]
    reference = state.u_reference[1::2] if state.u_reference is not None else np.zeros_like(uy)
    uplift = [float(uy[n] - reference[n]) for n in (mesh.surface_node(x) for x in UPLIFT_STATIONS)]

    has_ips = len(state.jump) > 0
    return TimeSeriesRow(
        state.time,
        lengths["vertical"], lengths["left"], lengths["right"],
        float(state.jump[0]) if has_ips else 0.0,
        float(state.h_melt[0]) if has_ips else 0.0,
        p_base, p_tip,
        state.q_inlet, state.Q_total,
        state.E_friction, state.E_conduction, state.E_phase,
        *uplift,
    )


class TimeSeriesRecorder:
    """Observer collecting a row per call; `run` calls it every `stride` committed increments"""

    def __init__(self, stride: int = 1):
        if stride < 1:
            raise ValueError("output stride must be at least 1")
        self.stride = stride
        self.rows: List[TimeSeriesRow] = []

    def __call__(self, model: "HydrofractureModel", state: "SimState") -> None:
        self.rows.append(build_row(model, state))


@dataclass(frozen=True)
class FluidBalance:
    injected: float
    crack_volume_change: float
    melt_term: float
    storage: float

    @property
    def accounted(self) -> float:
        return self.crack_volume_change + self.melt_term + self.storage

    @property
    def closure_error(self) -> float:
        """Relative mismatch between injected and accounted volume"""
        if self.injected == 0.0:
            return abs(self.accounted)
        return abs(self.injected - self.accounted) / abs(self.injected)


def fluid_balance(model: "HydrofractureModel", state: "SimState") -> FluidBalance:
    """Cumulative water budget since the start of the propagation phase"""
    w = model.topology().weights.ravel()
    beta_m = 1.0 - model.thermal.rho_i / model.flow.rho_w
    crack = float(np.sum(w * state.jump)) - state.crack_volume_reference
    melt = float(np.sum(w * state.h_melt)) - state.melt_volume_reference
    return FluidBalance(injected=state.Q_total, crack_volume_change=crack,
                        melt_term=beta_m * melt, storage=state.V_storage)


def lake_level_conversion(Q_total: float, w_oop: float, lake_area: float) -> float:
    """Lake-level drop (m) for a drained volume per metre spread over the lake"""
    if w_oop <= 0 or lake_area <= 0:
        raise ValueError("out-of-plane width and lake area must be positive")
    return Q_total * w_oop / lake_area


def lake_level_series(rows: Sequence[TimeSeriesRow], w_oop: float, lake_area: float) -> np.ndarray:
    return np.array([lake_level_conversion(r.Q_total_m3pm, w_oop, lake_area) for r in rows])


def lake_level_rate(rows: Sequence[TimeSeriesRow], w_oop: float, lake_area: float) -> np.ndarray:
    """Rate of lake-level drop in m/h"""
    if len(rows) < 2:
        return np.zeros(len(rows))
    times = np.array([r.time_s for r in rows])
    return np.gradient(lake_level_series(rows, w_oop, lake_area), times) * 3600.0


def count_propagation_episodes(times: Sequence[float], lengths: Sequence[float], min_pause: float = 20.0) -> int:
    """Growth bursts separated by pauses of at least `min_pause` seconds"""
    episodes = 0
    growing = False
    last_growth = -math.inf
    for i in range(1, len(lengths)):
        if lengths[i] > lengths[i - 1] + 1e-9:
            if not growing or times[i] - last_growth >= min_pause:
                episodes += 1
            growing = True
            last_growth = times[i]
        elif times[i] - last_growth >= min_pause:
            growing = False
    return episodes


class RunSummary(BaseModel):
    """Headline numbers of one run"""

    rheology: str
    ice_thickness: float
    duration_s: float
    bed_time_s: Optional[float] = None
    final_crevasse_depth_m: float = 0.0
    horizontal_cracking: bool = False
    arm_length_m: float = 0.0
    propagation_episodes: int = 0
    Q_total_m3pm: float = 0.0
    lake_drop_m: float = 0.0
    inflow_plateau_m3pmph: Optional[float] = None
    final_mouth_opening_m: float = 0.0
    peak_mouth_opening_m: float = 0.0
    final_melt_thickness_m: float = 0.0
    heat_dominance: float = 0.0
    observation_deviations: Dict[str, float] = {}


def summarize_run(rows: Sequence[TimeSeriesRow], rheology: str, ice_thickness: float,
                  w_oop: float = 3200.0, lake_area: float = 5.6e6) -> RunSummary:
    """Reduce a time series to the quantities quoted for the field case"""
    if not rows:
        return RunSummary(rheology=rheology, ice_thickness=ice_thickness, duration_s=0.0)
    times = np.array([r.time_s for r in rows])
    depth = np.array([r.crevasse_depth_m for r in rows])
    arms = np.array([r.crack_left_m + r.crack_right_m for r in rows])
    reached = np.flatnonzero(depth >= ice_thickness - 1e-6)
    bed_time = float(times[reached[0]]) if reached.size else None

    plateau = None
    second_half = times > 0.5 * times[-1]
    if bed_time is not None and np.any(second_half):
        plateau = float(np.median([r.q_inlet_m2_s for r, keep in zip(rows, second_half) if keep]) * 3600.0)

    last = rows[-1]
    after_bed = slice(int(reached[0]), None) if reached.size else slice(len(rows), None)
    dominance = last.E_friction_Jpm / last.E_conduction_Jpm if last.E_conduction_Jpm > 0 else math.inf
    return RunSummary(
        rheology=rheology,
        ice_thickness=ice_thickness,
        duration_s=float(times[-1]),
        bed_time_s=bed_time,
        final_crevasse_depth_m=float(depth[-1]),
        horizontal_cracking=bool(arms[-1] > 0.0),
        arm_length_m=max(last.crack_left_m, last.crack_right_m),
        propagation_episodes=count_propagation_episodes(times[after_bed], arms[after_bed]),
        Q_total_m3pm=last.Q_total_m3pm,
        lake_drop_m=lake_level_conversion(last.Q_total_m3pm, w_oop, lake_area),
        inflow_plateau_m3pmph=plateau,
        final_mouth_opening_m=last.mouth_open_def_m,
        peak_mouth_opening_m=max(r.mouth_open_def_m for r in rows),
        final_melt_thickness_m=last.mouth_open_melt_m,
        heat_dominance=dominance,
    )


# Quoted scalars of the 2008 North Lake drainage and its reference simulation
OBSERVED = {
    "bed_time_s": {"elastic": 13 * 60.0, "viscoelastic": 25 * 60.0},
    "inflow_plateau_m3pmph": 1050.0,
    "Q_total_m3pm": 1300.0,
    "arm_length_m": 1600.0,
    "final_mouth_opening_m": 0.5,
}


def compare_with_observations(summary: RunSummary) -> Dict[str, float]:
    """Relative deviation of each summary quantity from its reference value"""
    deviations = {}
    for key, reference in OBSERVED.items():
        if isinstance(reference, dict):
            reference = reference.get(summary.rheology)
        value = getattr(summary, key)
        if value is None or reference is None:
            continue
        deviations[key] = (value - reference) / reference
    for key, dev in deviations.items():
        logger.info(f"{key}: {dev:+.1%} from the observed value")
    return deviations
