"""🧪 Material table: depth-dependent creep and strength"""

import numpy as np
import pytest
from pydantic import ValidationError

from channel_thm import FlowParams
from constitutive import MaterialError, TemperatureProfile
from material_table import ICE, default_materials


def test_elastic_ice_does_not_creep():
    table = default_materials(rheology="elastic")
    assert np.all(table.creep_at(np.array([0.0, 50.0])) == 0.0)


def test_creep_follows_temperature_profile():
    profile = TemperatureProfile(depths=(0.0, 100.0), temperatures=(0.0, -10.0))
    table = default_materials(profile=profile)
    A = table.creep_at(np.array([0.0, 100.0]))
    assert A[0] == pytest.approx(5e-24)
    assert A[1] == pytest.approx(4.063e-25, rel=2e-3)


def test_creep_override_is_uniform():
    table = default_materials(override_A=1e-23)
    assert np.allclose(table.creep_at(np.array([0.0, 300.0])), 1e-23)


def test_strength_from_profile_and_override():
    profile = TemperatureProfile.constant(-10.0, 500.0)
    assert default_materials(profile=profile).strength_at(200.0) == pytest.approx(2.68e6)
    assert default_materials(profile=profile, override_f_t=0.3e6).strength_at(200.0) == pytest.approx(0.3e6)


def test_short_profile_is_rejected():
    table = default_materials(profile=TemperatureProfile.constant(-2.0, 100.0))
    table.check_profile(100.0)
    with pytest.raises(MaterialError):
        table.check_profile(300.0)


def test_ice_must_float():
    with pytest.raises(ValidationError):
        default_materials(flow=FlowParams(rho_w=900.0))


def test_thermal_constants_come_from_ice():
    thermal = default_materials().thermal
    assert thermal.rho_i == ICE.rho
    assert thermal.latent_heat == pytest.approx(335000.0)
    assert thermal.diffusivity == pytest.approx(2.0 / (910.0 * 2115.0))
