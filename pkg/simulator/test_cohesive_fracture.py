"""🧪 Cohesive law, insertion criterion and process-zone sizing"""

import math

import numpy as np
import pytest

from cohesive_fracture import (
    CohesiveParams,
    check_propagation,
    cohesive_stiffness,
    cohesive_traction,
    dissipated_energy,
    process_zone_length,
    tip_normal_stress,
)

F_T = 0.3e6
GC = 10.0


def test_traction_at_zero_opening_is_strength():
    assert cohesive_traction(0.0, F_T, GC) == pytest.approx(F_T)


def test_traction_decays_by_e_at_critical_opening():
    params = CohesiveParams(f_t=F_T, Gc=GC)
    assert cohesive_traction(params.critical_opening, F_T, GC) == pytest.approx(F_T / math.e)


def test_stiffness_at_zero_opening():
    assert cohesive_stiffness(0.0, F_T, GC) == pytest.approx(-F_T ** 2 / GC)


@pytest.mark.parametrize("opening", [-1e-6, 0.0, 2e-5, 1e-4])
def test_stiffness_matches_finite_difference(opening):
    step = 1e-10
    fd = (cohesive_traction(opening + step, F_T, GC) - cohesive_traction(opening - step, F_T, GC)) / (2 * step)
    assert cohesive_stiffness(opening, F_T, GC) == pytest.approx(fd, rel=1e-6)


def test_traction_is_capped_under_deep_interpenetration():
    assert np.isfinite(cohesive_traction(-1.0, F_T, GC))


def test_dissipated_energy_tends_to_fracture_energy():
    assert dissipated_energy(0.0, F_T, GC) == pytest.approx(0.0)
    assert dissipated_energy(1.0, F_T, GC) == pytest.approx(GC)


def test_params_reject_skewed_frame():
    with pytest.raises(ValueError):
        CohesiveParams(f_t=F_T, normal=(1.0, 0.0), tangent=(0.6, 0.8))


def test_rotation_maps_to_tangent_normal_components():
    params = CohesiveParams(f_t=F_T, normal=(0.0, 1.0), tangent=(1.0, 0.0))
    assert np.allclose(params.rotation @ np.array([2.0, 3.0]), [2.0, 3.0])
    vertical = CohesiveParams(f_t=F_T)
    assert np.allclose(vertical.rotation @ np.array([2.0, 3.0]), [-3.0, 2.0])


# --------------------------------------------------------------------------- #
# Insertion                                                                   #
# --------------------------------------------------------------------------- #


@pytest.mark.parametrize("sigma, expected", [(F_T, False), (1.1 * F_T, True), (-1e6, False)])
def test_check_propagation_is_strict(sigma, expected):
    assert check_propagation(sigma, F_T) is expected


def test_process_zone_length():
    assert process_zone_length(9e9, 10.0, 0.2e6) == pytest.approx(2.25)
    assert process_zone_length(9e9, 10.0, 2.0e6) == pytest.approx(0.0225)


def test_tip_normal_stress_is_weighted_average():
    sigma = np.array([[1.0e5, 0.0, 0.0, 0.0], [4.0e5, -1.0e5, 0.0, 2.0e5]])
    weights = np.array([1.0, 3.0])
    assert tip_normal_stress(sigma, weights, (1.0, 0.0)) == pytest.approx((1.0e5 + 3 * 4.0e5) / 4)
    assert tip_normal_stress(sigma, weights, (0.0, 1.0)) == pytest.approx(-3.0e5 / 4)


def test_tip_normal_stress_includes_shear_on_inclined_normal():
    sigma = np.array([[0.0, 0.0, 0.0, 1.0e5]])
    n = np.array([1.0, 1.0]) / math.sqrt(2.0)
    assert tip_normal_stress(sigma, np.array([2.0]), n) == pytest.approx(1.0e5)
