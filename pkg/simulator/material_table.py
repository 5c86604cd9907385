"""
Material Table
Default ice, rock and water constants and the depth-dependent creep
coefficient and tensile strength derived from the ice temperature
"""

import logging
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from channel_thm import FlowParams, ThermalParams
from constitutive import (
    ZERO_CELSIUS,
    MaterialError,
    SolidProperties,
    TemperatureProfile,
    creep_coefficient,
    tensile_strength,
)

logger = logging.getLogger(__name__)

ICE = SolidProperties(
    name="ice", E=9e9, nu=0.33, rho=910.0, A0=5e-24, Qc=150e3, n=3.0,
    k=2.0, cp=2115.0, ft0=2.0e6, fdeg=0.068e6, Gc=10.0, latent_heat=335000.0,
)
ROCK = SolidProperties(name="rock", E=20e9, nu=0.25, rho=2500.0, A0=0.0, cp=770.0)


class MaterialTable(BaseModel):
    """Everything the solver needs to know about the three materials"""

    model_config = ConfigDict(frozen=True)

    ice: SolidProperties = ICE
    rock: SolidProperties = ROCK
    flow: FlowParams = FlowParams()
    profile: TemperatureProfile = TemperatureProfile.constant(0.0, 1.0)
    rheology: Literal["elastic", "viscoelastic"] = "viscoelastic"
    override_f_t: Optional[float] = Field(default=None, gt=0)
    override_A: Optional[float] = Field(default=None, ge=0)
    p_ext: float = Field(default=1e5, ge=0)
    k_p: float = Field(default=1e6, gt=0)

    @model_validator(mode="after")
    def _consistent_gravity(self) -> "MaterialTable":
        if self.ice.rho >= self.flow.rho_w:
            raise ValueError("ice must be lighter than water")
        return self

    @property
    def thermal(self) -> ThermalParams:
        return ThermalParams(rho_i=self.ice.rho, latent_heat=self.ice.latent_heat,
                             k=self.ice.k, cp=self.ice.cp)

    @property
    def gravity(self) -> float:
        return self.flow.gravity

    def temperature_at(self, depth):
        return self.profile.temperature_at(depth)

    def creep_at(self, depth):
        """Ice creep coefficient A at the given depths (0 for elastic runs)"""
        depth = np.asarray(depth, dtype=float)
        if self.rheology == "elastic":
            return np.zeros_like(depth)
        if self.override_A is not None:
            return np.full_like(depth, self.override_A)
        T = ZERO_CELSIUS + np.asarray(self.temperature_at(depth))
        return np.asarray(creep_coefficient(T, self.ice.A0, self.ice.Qc, self.ice.Tref)) * np.ones_like(depth)

    def strength_at(self, depth) -> float:
        if self.override_f_t is not None:
            return float(self.override_f_t)
        return float(tensile_strength(self.temperature_at(depth), self.ice.ft0, self.ice.fdeg))

    def check_profile(self, thickness: float) -> None:
        if not self.profile.covers(thickness):
            raise MaterialError(f"temperature profile ends at {self.profile.depths[-1]} m, "
                                f"above the {thickness} m ice thickness")


def default_materials(**overrides) -> MaterialTable:
    """Reference constants with optional field overrides"""
    table = MaterialTable(**overrides)
    logger.debug(f"Material table: rheology={table.rheology}, f_t override={table.override_f_t}, "
                 f"A override={table.override_A}")
    return table
