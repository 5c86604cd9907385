"""
Output Writer
CSV time series, legacy VTK snapshots and JSON run summaries
"""

import logging
import os
from pathlib import Path
from typing import TYPE_CHECKING, Sequence, Union

import meshio
import numpy as np

from constitutive import ZERO_CELSIUS, deviatoric_norm, maxwell_time
from diagnostics import CSV_HEADER, RunSummary, TimeSeriesRow
from geometry_mesh import MATERIAL_ICE

if TYPE_CHECKING:
    from global_solver import HydrofractureModel, SimState

logger = logging.getLogger(__name__)

# written in place of an infinite relaxation time (rock, stress-free ice)
MAXWELL_TIME_SENTINEL = 1e30


class OutputError(OSError):
    """Result file could not be written"""


class OutputWriter:
    """Writes all result files of one run below a single directory"""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        try:
            os.makedirs(self.out_dir, exist_ok=True)
        except OSError as e:
            raise OutputError(f"cannot create output directory {self.out_dir}: {e}") from e

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_timeseries(self, rows: Sequence[TimeSeriesRow], name: str = "timeseries.csv") -> Path:
        target = self.path(name)
        table = np.array([r.values() for r in rows], dtype=float).reshape(-1, len(CSV_HEADER.split(",")))
        try:
            np.savetxt(target, table, delimiter=",", header=CSV_HEADER, comments="", fmt="%.10g")
        except OSError as e:
            raise OutputError(f"cannot write time series {target}: {e}") from e
        logger.info(f"📄 Time series with {len(rows)} rows written to {target}")
        return target

    def write_snapshot(self, model: "HydrofractureModel", state: "SimState", name: str) -> Path:
        """Legacy ASCII VTK file of the deformed-state fields"""
        target = self.path(name)
        mesh = model.mesh
        n_nodes = mesh.n_nodes

        points = np.column_stack([mesh.nodes, np.zeros(n_nodes)])
        displacement = np.column_stack([state.u.reshape(-1, 2), np.zeros(n_nodes)])
        pressure = np.zeros(n_nodes)
        for interface in mesh.interfaces:
            values = state.p[interface.pressure_dofs]
            pressure[interface.plus_nodes] = values
            pressure[interface.minus_nodes] = values

        sigma = model.stresses(state.u, state.eps_v)
        dev_ip = deviatoric_norm(sigma)
        dev = dev_ip.mean(axis=1)
        ice = mesh.material == MATERIAL_ICE
        tau = np.full(len(mesh.elements), np.inf)
        if model.materials.rheology == "viscoelastic":
            centroid_depth = mesh.spec.ice_thickness - mesh.nodes[mesh.elements[:, 8], 1]
            temperature = ZERO_CELSIUS + np.asarray(model.materials.temperature_at(centroid_depth))
            ice_props = model.materials.ice
            A0, Qc = ice_props.A0, ice_props.Qc
            if model.materials.override_A is not None:
                A0, Qc = model.materials.override_A, 0.0
            tau[ice] = maxwell_time(dev[ice], temperature[ice], ice_props.E, ice_props.nu,
                                    A0, Qc, ice_props.Tref, ice_props.n)
        tau = np.nan_to_num(tau, posinf=MAXWELL_TIME_SENTINEL)

        vtk_mesh = meshio.Mesh(
            points,
            [("quad9", mesh.elements)],
            point_data={"displacement": displacement, "pressure": pressure},
            cell_data={
                "deviatoric_stress": [dev_ip],
                "deviatoric_stress_mean": [dev],
                "maxwell_time": [tau],
                "material": [mesh.material.astype(np.int32)],
            },
        )
        try:
            meshio.write(target, vtk_mesh, file_format="vtk", binary=False)
        except OSError as e:
            raise OutputError(f"cannot write snapshot {target}: {e}") from e
        logger.debug(f"Snapshot at t={state.time:.1f} s written to {target}")
        return target

    def write_summary(self, summary: RunSummary, name: str = "summary.json") -> Path:
        target = self.path(name)
        try:
            target.write_text(summary.model_dump_json(indent=2))
        except OSError as e:
            raise OutputError(f"cannot write summary {target}: {e}") from e
        return target
