"""
🧪 Channel thermo-hydraulics: turbulent flux law, heat fluxes and the
local (q, h_melt, h) solve with its consistent tangent
"""

import math

import numpy as np
import pytest

from channel_thm import (
    FlowParams,
    ThermalParams,
    dominance_ratio,
    effective_aperture,
    effective_aperture_slope,
    fluid_flux,
    friction_factor,
    heat_flux_flow,
    heat_flux_ice,
    local_newton,
    reynolds_number,
    thermal_length,
    wall_temperature,
)

FLOW = FlowParams()
THERMAL = ThermalParams()

# --------------------------------------------------------------------------- #
# Closed-form laws                                                            #
# --------------------------------------------------------------------------- #


def test_friction_factor_at_roughness_scale():
    assert friction_factor(FLOW.k_wall, FLOW) == pytest.approx(0.143)
    assert friction_factor(8 * FLOW.k_wall, FLOW) == pytest.approx(0.0715)


def test_friction_factor_rejects_closed_channel():
    with pytest.raises(ValueError):
        friction_factor(0.0, FLOW)


def test_flux_vanishes_without_gradient():
    assert fluid_flux(0.1, 0.0, FLOW) == pytest.approx(0.0, abs=1e-15)


def test_flux_of_decimetre_channel():
    assert fluid_flux(0.1, -1000.0, FLOW) == pytest.approx(0.2455, abs=1e-4)


def test_flux_points_down_the_gradient():
    q = fluid_flux(np.array([0.05, 0.05]), np.array([-500.0, 500.0]), FLOW)
    assert q[0] > 0 > q[1]
    assert q[0] == pytest.approx(-q[1])


def test_frictional_heating():
    assert heat_flux_flow(0.0, -1000.0) == pytest.approx(0.0)
    assert heat_flux_flow(0.2455, -1000.0) == pytest.approx(245.5)


def test_conduction_into_temperate_ice_vanishes():
    assert heat_flux_ice(0.0, 3600.0, THERMAL) == pytest.approx(0.0)


def test_conduction_into_cold_ice():
    assert heat_flux_ice(-10.0, 3600.0, THERMAL) == pytest.approx(-369.0, abs=1.0)


def test_conduction_needs_positive_exposure():
    with pytest.raises(ValueError):
        heat_flux_ice(-10.0, 0.0, THERMAL)


def test_dominance_ratio_after_an_hour():
    assert dominance_ratio(0.5, 1000.0, 3600.0, -10.0, FLOW, THERMAL) == pytest.approx(9.7, rel=1e-2)


def test_dominance_ratio_small_at_fracture_onset():
    assert dominance_ratio(0.5, 1000.0, 1e-6, -10.0, FLOW, THERMAL) < 0.1
    assert math.isinf(dominance_ratio(0.5, 1000.0, 3600.0, 0.0, FLOW, THERMAL))


def test_wall_temperature_profile():
    elapsed = 3600.0
    assert wall_temperature(0.0, elapsed, -10.0, THERMAL) == pytest.approx(0.0)
    far = 20.0 * thermal_length(elapsed, THERMAL)
    assert wall_temperature(far, elapsed, -10.0, THERMAL) == pytest.approx(-10.0)


def test_reynolds_number_is_turbulent_for_channel_flow():
    assert reynolds_number(0.2455, FLOW) > 1e5


# --------------------------------------------------------------------------- #
# Local solve                                                                 #
# --------------------------------------------------------------------------- #


def test_hydrostatic_fixed_point():
    sol = local_newton(0.0, 2e-3, 1e-4, 100.0, 0.0, 2.0, FLOW, THERMAL)
    assert sol.q[0] == pytest.approx(0.0, abs=1e-15)
    assert sol.h_melt[0] == pytest.approx(1e-4)
    assert sol.h[0] == pytest.approx(2e-3 + 1e-4)


def test_freezing_without_flow():
    dt = 2.0
    sol = local_newton(0.0, 1e-3, 1e-3, 3600.0, -10.0, dt, FLOW, THERMAL)
    expected = 1e-3 + dt * heat_flux_ice(-10.0, 3600.0, THERMAL) / (THERMAL.rho_i * THERMAL.latent_heat)
    assert sol.h_melt[0] == pytest.approx(expected, abs=1e-10)
    assert sol.h_melt[0] < 1e-3


def test_melting_dominates_in_strong_flow():
    sol = local_newton(-1000.0, 0.2, 0.0, 3600.0, -1.0, 2.0, FLOW, THERMAL)
    assert sol.h_melt[0] > 0.0
    assert sol.h[0] == pytest.approx(0.2 + sol.h_melt[0])


def test_inactive_thermal_model_freezes_melt():
    sol = local_newton(-800.0, 0.05, 3e-4, 100.0, -10.0, 2.0, FLOW, THERMAL, thermal_active=False)
    assert sol.h_melt[0] == pytest.approx(3e-4, rel=1e-14)
    assert sol.j_flow[0] == 0.0
    assert sol.dhm_dG[0] == pytest.approx(0.0, abs=1e-20)
    assert sol.q[0] == pytest.approx(fluid_flux(float(effective_aperture(0.05 + 3e-4, FLOW)), -800.0, FLOW), rel=1e-10)


def test_energy_balance_closes_at_each_point():
    G = np.array([-1500.0, -300.0, 50.0])
    jump = np.array([0.05, 0.01, 0.02])
    hm_old = np.array([1e-4, 0.0, 2e-5])
    dt = 2.0
    sol = local_newton(G, jump, hm_old, 600.0, -5.0, dt, FLOW, THERMAL, tol=1e-13)
    storage = THERMAL.rho_i * THERMAL.latent_heat * (sol.h_melt - hm_old) / dt
    assert np.allclose(storage, sol.j_flow + sol.j_ice, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("thermal_active", [True, False])
def test_tangent_matches_central_differences(thermal_active):
    G, jump = np.array([-800.0, -2500.0]), np.array([0.05, 0.02])
    args = (np.array([1e-4, 0.0]), 100.0, -5.0, 2.0, FLOW, THERMAL)

    def solve(G_now, jump_now):
        return local_newton(G_now, jump_now, *args, thermal_active=thermal_active, tol=1e-13)

    base = solve(G, jump)
    dG = 1e-4 * np.abs(G)
    dj = 1e-4 * jump
    plus_G, minus_G = solve(G + dG, jump), solve(G - dG, jump)
    plus_j, minus_j = solve(G, jump + dj), solve(G, jump - dj)

    for name in ("q", "h_melt", "h"):
        short = "hm" if name == "h_melt" else name
        fd_G = (getattr(plus_G, name) - getattr(minus_G, name)) / (2 * dG)
        fd_j = (getattr(plus_j, name) - getattr(minus_j, name)) / (2 * dj)
        assert np.allclose(getattr(base, f"d{short}_dG"), fd_G, rtol=1e-6, atol=1e-14)
        assert np.allclose(getattr(base, f"d{short}_djump"), fd_j, rtol=1e-6, atol=1e-12)


def test_effective_aperture_floor():
    assert float(effective_aperture(0.0, FLOW)) == pytest.approx(0.5 * FLOW.h_min)
    assert float(effective_aperture(0.01, FLOW)) == pytest.approx(0.01, rel=1e-8)
    assert float(effective_aperture(-1.0, FLOW)) > 0.0
    h = np.array([-2e-6, 0.0, 1e-6, 3e-6])
    dh = 1e-10
    fd = (effective_aperture(h + dh, FLOW) - effective_aperture(h - dh, FLOW)) / (2 * dh)
    assert np.allclose(effective_aperture_slope(h, FLOW), fd, rtol=1e-6)


def test_flux_tangent_is_continuous_through_closure():
    jump = np.array([-0.5e-6, 0.5e-6, 1e-6, 2e-6])
    G = np.full(4, -1000.0)
    solve = lambda j: local_newton(G, j, 0.0, 100.0, 0.0, 2.0, FLOW, THERMAL, thermal_active=False)
    base = solve(jump)
    dj = 1e-9
    fd = (solve(jump + dj).q - solve(jump - dj).q) / (2 * dj)
    assert np.all(base.dq_djump > 0.0)
    assert np.allclose(base.dq_djump, fd, rtol=1e-5)
