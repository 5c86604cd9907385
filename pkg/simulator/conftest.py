"""Shared fixtures: a toy slab small enough to solve in well under a second."""

import pytest

from geometry_mesh import DomainSpec, build_mesh
from global_solver import HydrofractureModel, SolverSettings, initial_state
from material_table import default_materials
from constitutive import TemperatureProfile

# 20 m of ice on 10 m of rock, 40 m wide; 4 vertical path segments of 5 m, the top one a notch
TOY_SPEC = dict(
    ice_thickness=20.0,
    domain_width=40.0,
    rock_thickness=10.0,
    initial_notch_depth=5.0,
    fine_element_size=5.0,
    coarse_element_size=10.0,
    band_half_width=10.0,
)


@pytest.fixture()
def toy_spec() -> DomainSpec:
    return DomainSpec(**TOY_SPEC)


@pytest.fixture()
def toy_mesh(toy_spec):
    return build_mesh(toy_spec)


def make_model(rheology: str = "elastic", f_t: float = 0.3e6, creep_A=None, temperature: float = 0.0,
               settings: SolverSettings = None, domain: dict = None, **material_overrides) -> HydrofractureModel:
    spec = DomainSpec(**{**TOY_SPEC, **(domain or {})})
    mesh, path = build_mesh(spec)
    materials = default_materials(
        profile=TemperatureProfile.constant(temperature, spec.ice_thickness),
        rheology=rheology, override_f_t=f_t, override_A=creep_A, **material_overrides,
    )
    settings = settings or SolverSettings(dt=1.0, duration=10.0, init_dt=600.0, init_duration=0.0)
    return HydrofractureModel(mesh, path, materials, settings=settings)


@pytest.fixture()
def toy_model() -> HydrofractureModel:
    return make_model()


@pytest.fixture()
def toy_state(toy_model):
    return initial_state(toy_model)
