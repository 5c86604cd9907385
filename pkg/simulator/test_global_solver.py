"""
🧪 Global solver: Newmark integration, consistent tangent, equilibrium,
water conservation, propagation sweeps and creep initialisation
"""

import numpy as np
import pytest
from scipy import sparse

import global_solver
from channel_thm import FlowParams
from conftest import make_model
from constitutive import ConvergenceError
from global_solver import (
    PropagationError,
    SimState,
    SolverSettings,
    TimeScheme,
    advance,
    creep_initialize,
    initial_state,
    newmark_advance,
    newton_solve,
    propagation_sweep,
    run,
    solve_linear,
    static_solve,
    stationarity_drift,
)
from diagnostics import fluid_balance
from geometry_mesh import QUAD9_REFERENCE, quad_rule

# --------------------------------------------------------------------------- #
# Time integration and linear algebra                                         #
# --------------------------------------------------------------------------- #


def _oscillate(scheme: TimeScheme, steps: int, dt: float = 0.1) -> np.ndarray:
    """Unit mass on a unit spring released from u = 1"""
    u, v, a = np.ones(1), np.zeros(1), -np.ones(1)
    history = []
    for _ in range(steps):
        pred = newmark_advance(u, v, a, dt, scheme)
        # m (c_a (u - u_old) + a_base) + k u = 0
        u_new = (pred.c_a * pred.u_old - pred.a_base) / (pred.c_a + 1.0)
        v, a, u = pred.velocity(u_new), pred.acceleration(u_new), u_new
        history.append(u[0])
    return np.array(history)


def test_dissipative_newmark_never_amplifies():
    u = _oscillate(TimeScheme(), 1000)
    assert np.abs(u[-100:]).max() <= np.abs(u[:100]).max()


def test_trapezoidal_newmark_keeps_amplitude():
    u = _oscillate(TimeScheme(beta=0.25, gamma=0.5), 1000)
    assert np.abs(u[-100:]).max() == pytest.approx(1.0, abs=1e-2)


def test_unstable_newmark_parameters_are_rejected():
    with pytest.raises(ValueError):
        TimeScheme(beta=0.2, gamma=0.75)


def test_solve_linear_handles_mixed_units():
    K = sparse.csr_matrix(np.array([[1e10, 2e9, 0.0], [2e9, 5e9, 1.0], [0.0, 1.0, 1e-12]]))
    x = np.array([1e-3, -2e-3, 5e4])
    assert np.allclose(solve_linear(K, K @ x), x, rtol=1e-8)


# --------------------------------------------------------------------------- #
# Consistent tangent                                                          #
# --------------------------------------------------------------------------- #


def _trial_fields(model, state, opening=2e-3, tip_opening=2e-5, gradient=-400.0):
    """Notch open by `opening`, the cohesive segment by `tip_opening`, pressure falling with depth"""
    mesh = model.mesh
    rng = np.random.default_rng(7)
    u = rng.normal(scale=1e-6, size=mesh.n_u_dofs)
    for interface in mesh.interfaces:
        depths = mesh.ip_depths(interface)
        half = np.where(depths < 4.0, opening, tip_opening) / 2.0
        u[2 * interface.plus_nodes] += half
        u[2 * interface.minus_nodes] -= half
    depth = mesh.spec.ice_thickness - mesh.pressure_coordinates()[:, 1]
    p = (model.materials.p_ext + (model.flow.rho_w * model.materials.gravity + gradient) * depth
         + rng.normal(scale=10.0, size=mesh.n_p_dofs))
    return u, p


def test_tangent_matches_finite_differences():
    model = make_model(temperature=-1.0)
    state = initial_state(model)
    inc = model.begin_increment(state, 1.0)
    model.open_segment(state, inc, "vertical", 1, 0.3e6)
    u, p = _trial_fields(model, state)
    n_u = model.mesh.n_u_dofs

    def residual(x):
        r, _, _ = model.assemble_system(state, inc, x[:n_u], x[n_u:])
        return r

    x0 = np.concatenate([u, p])
    _, K, _ = model.assemble_system(state, inc, u, p)
    K = K.toarray()

    interface_nodes = np.unique(np.concatenate([np.r_[i.plus_nodes, i.minus_nodes] for i in model.mesh.interfaces]))
    u_cols = np.unique(np.concatenate([2 * interface_nodes, 2 * interface_nodes + 1, [0, 17, 101]]))
    p_cols = n_u + np.arange(model.mesh.n_p_dofs)
    fd = {}
    for col in np.concatenate([u_cols, p_cols]):
        step = 1e-8 if col < n_u else 1.0
        e = np.zeros_like(x0)
        e[col] = step
        fd[col] = (residual(x0 + e) - residual(x0 - e)) / (2.0 * step)

    for rows in (slice(0, n_u), slice(n_u, None)):
        for cols in (u_cols, p_cols):
            exact = K[rows][:, cols]
            approx = np.column_stack([fd[c][rows] for c in cols])
            scale = np.linalg.norm(exact)
            assert np.linalg.norm(approx - exact) <= 1e-5 * scale + 1e-12

    # channel part of the pressure block on its own, away from the inlet penalty
    inner = p_cols[p_cols != n_u + model.topology().inlet]
    exact = K[np.ix_(inner, inner)]
    approx = np.column_stack([fd[c][inner] for c in inner])
    assert np.linalg.norm(approx - exact) <= 1e-4 * np.linalg.norm(exact)


def test_undeformed_state_without_loads_is_in_equilibrium():
    model = make_model(p_ext=0.0, flow=FlowParams(gravity=0.0))
    state = initial_state(model)
    inc = model.begin_increment(state, 1.0)
    r, _, _ = model.assemble_system(state, inc, state.u, state.p)
    assert np.allclose(r, 0.0, atol=1e-12)


# --------------------------------------------------------------------------- #
# Equilibrium and time stepping                                               #
# --------------------------------------------------------------------------- #


def test_ice_column_carries_its_weight():
    model = make_model()
    state = static_solve(model, initial_state(model))
    mesh = model.mesh
    sigma = model.stresses(state.u, state.eps_v)
    wdet = model.wdet[model.element_class]
    centre_y = mesh.nodes[mesh.elements[:, 8], 1]
    width = mesh.spec.domain_width
    rho_g = model.materials.ice.rho * model.materials.gravity

    for y_cut in (5.0, 10.0, 15.0):
        above = centre_y > y_cut
        load = float(np.sum(wdet[above] * sigma[above, :, 1]))
        height = mesh.spec.ice_thickness - y_cut
        assert load == pytest.approx(-rho_g * width * height ** 2 / 2.0, rel=1e-6)


def test_static_solve_resets_the_clock():
    model = make_model()
    state = static_solve(model, initial_state(model))
    assert state.time == 0.0
    assert state.Q_total == 0.0
    assert state.thermal_active
    assert np.array_equal(state.u_reference, state.u)
    assert state.increments == 1


def test_no_driving_means_no_inflow():
    model = make_model(p_ext=0.0, flow=FlowParams(gravity=0.0))
    state = static_solve(model, initial_state(model))
    run(model, state, duration=3.0)
    assert state.Q_total == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(state.u, 0.0)
    assert model.path.opened_length("vertical") == pytest.approx(5.0)


def test_zero_creep_matches_elastic_run_bit_for_bit():
    runs = []
    for rheology in ("elastic", "viscoelastic"):
        model = make_model(rheology=rheology, creep_A=0.0)
        state = static_solve(model, initial_state(model))
        run(model, state, duration=3.0)
        runs.append(state)
    assert np.array_equal(runs[0].u, runs[1].u)
    assert np.array_equal(runs[0].p, runs[1].p)
    assert runs[0].Q_total == runs[1].Q_total


def _pressurised_run(steps=5):
    settings = SolverSettings(dt=1.0, duration=10.0, init_duration=0.0, propagate=False)
    model = make_model(temperature=-2.0, settings=settings)
    state = static_solve(model, initial_state(model))
    model.materials = model.materials.model_copy(update={"p_ext": 3e5})
    run(model, state, duration=float(steps))
    return model, state


def test_injected_water_is_accounted_for():
    model, state = _pressurised_run()
    balance = fluid_balance(model, state)
    assert state.Q_total > 0.0
    assert balance.accounted == pytest.approx(balance.injected, rel=1e-8)


def test_inlet_flux_matches_penalty_pressure():
    model, state = _pressurised_run()
    inlet = model.topology().inlet
    penalty_flux = model.materials.k_p * (model.materials.p_ext - state.p[inlet])
    assert state.q_inlet == pytest.approx(penalty_flux, rel=1e-2, abs=1e-8)


def test_energy_tallies_close():
    _, state = _pressurised_run()
    assert state.E_phase == pytest.approx(state.E_conduction - state.E_friction,
                                          rel=1e-8, abs=1e-6 * max(state.E_conduction, 1.0))
    assert state.E_conduction > 0.0


def test_snapshot_is_read_only():
    model = make_model()
    state = static_solve(model, initial_state(model))
    frozen = state.snapshot()
    with pytest.raises(ValueError):
        frozen.u[0] = 1.0
    state.u[0] = 1.0
    assert frozen.u[0] != 1.0


# --------------------------------------------------------------------------- #
# Propagation                                                                 #
# --------------------------------------------------------------------------- #


def _ready_for_propagation(**kwargs):
    model = make_model(**kwargs)
    state = static_solve(model, initial_state(model))
    state.propagation_enabled = True
    return model, state


def test_tip_stress_uses_integration_points_next_to_the_vertex():
    model = make_model()
    points, _ = quad_rule()
    assert np.array_equal(np.sign(points[model.node_ip]), QUAD9_REFERENCE)
    assert len(set(model.node_ip.tolist())) == 9


def test_compressive_tips_insert_nothing():
    model, state = _ready_for_propagation()
    model.tip_stress = lambda inc, segment: -1e6
    inc = model.begin_increment(state, 1.0)
    newton_solve(model, state, inc)
    assert propagation_sweep(model, state, inc) == 0
    assert len(model.mesh.interfaces) == 1


def test_overstressed_tip_opens_one_segment():
    model, state = _ready_for_propagation()
    model.tip_stress = lambda inc, segment: 1e9 if segment.index == 1 else -1.0
    advance(model, state, 1.0)

    assert model.path.opened_length("vertical") == pytest.approx(10.0)
    assert len(state.h_melt) == model.mesh.n_ips == 6
    assert len(state.p) == model.mesh.n_p_dofs
    assert np.all(state.t0[3:] == 0.0)
    assert model.mesh.area() == pytest.approx(1200.0, rel=1e-12)


def _fail_once_after_insertion(monkeypatch):
    """Newton fails on its second call, the re-solve after the first insertion"""
    calls = {"n": 0}

    def solve(model, state, inc):
        calls["n"] += 1
        if calls["n"] == 2:
            raise ConvergenceError("forced failure")
        return newton_solve(model, state, inc)

    monkeypatch.setattr(global_solver, "newton_solve", solve)
    return calls


def test_failed_insertion_is_rolled_back_before_halving(monkeypatch):
    model, state = _ready_for_propagation()
    model.tip_stress = lambda inc, segment: 1e9 if segment.index == 1 else -1.0
    calls = _fail_once_after_insertion(monkeypatch)
    advance(model, state, 1.0)

    assert calls["n"] > 2
    assert state.time == pytest.approx(1.0)
    assert len(model.mesh.interfaces) == 2
    assert model.path.opened_length("vertical") == pytest.approx(10.0)
    assert len(state.h_melt) == model.mesh.n_ips == 6
    assert len(state.p) == model.mesh.n_p_dofs
    assert len(state.u) == model.mesh.n_u_dofs


def test_failed_insertion_without_halvings_leaves_the_mesh_untouched(monkeypatch):
    model, state = _ready_for_propagation(settings=SolverSettings(dt=1.0, duration=10.0, init_duration=0.0,
                                                                  max_halvings=0))
    model.tip_stress = lambda inc, segment: 1e9 if segment.index == 1 else -1.0
    n_u = model.mesh.n_u_dofs
    _fail_once_after_insertion(monkeypatch)
    with pytest.raises(ConvergenceError):
        advance(model, state, 1.0)

    assert len(model.mesh.interfaces) == 1
    assert model.path.opened_length("vertical") == pytest.approx(5.0)
    assert model.mesh.n_u_dofs == len(state.u) == n_u
    assert len(state.h_melt) == model.mesh.n_ips == 3
    assert state.time == 0.0


def test_runaway_insertion_is_reported():
    model, state = _ready_for_propagation(settings=SolverSettings(dt=1.0, duration=10.0, init_duration=0.0,
                                                                  max_insertions=1))
    model.tip_stress = lambda inc, segment: 1e9
    with pytest.raises(PropagationError):
        advance(model, state, 1.0)


# --------------------------------------------------------------------------- #
# Creep initialisation                                                        #
# --------------------------------------------------------------------------- #


def test_creep_initialisation_relaxes_ice_only():
    settings = SolverSettings(dt=1.0, duration=10.0, init_dt=600.0, init_duration=1200.0)
    model = make_model(rheology="viscoelastic", settings=settings)
    state = creep_initialize(model, initial_state(model))

    rock = model.mesh.material == 1
    assert np.abs(state.eps_v[~rock]).max() > 0.0
    assert np.array_equal(state.eps_v[rock], np.zeros_like(state.eps_v[rock]))
    assert state.time == 0.0
    assert state.Q_total == 0.0
    assert np.all(state.t0 == 0.0)
    assert state.thermal_active and state.propagation_enabled
    assert len(model.mesh.interfaces) == 1


def test_stationarity_is_judged_over_ten_increments():
    creeping = [1e6 * (1.0 + 0.002 * k) for k in range(20)]
    assert abs(creeping[-1] - creeping[-2]) / creeping[-1] < 1e-2
    assert stationarity_drift(creeping) > 1e-2
    settled = [1e6] * 5 + [1.001e6] * 15
    assert stationarity_drift(settled) == 0.0
    assert stationarity_drift([2e6, 1e6]) == pytest.approx(1.0)
    assert stationarity_drift([1e6]) == 0.0


# --------------------------------------------------------------------------- #
# Observers                                                                   #
# --------------------------------------------------------------------------- #


class _Counter:
    def __init__(self, stride):
        self.stride = stride
        self.times = []

    def __call__(self, model, state):
        self.times.append(state.time)


def test_snapshots_are_taken_only_when_an_observer_is_due(monkeypatch):
    model = make_model(settings=SolverSettings(dt=1.0, duration=6.0, init_duration=0.0))
    state = static_solve(model, initial_state(model))
    taken = []
    original = SimState.snapshot
    monkeypatch.setattr(SimState, "snapshot", lambda self: taken.append(self.time) or original(self))
    every_third, every_second = _Counter(3), _Counter(2)
    run(model, state, [every_third, every_second])

    assert every_third.times == pytest.approx([3.0, 6.0])
    assert every_second.times == pytest.approx([2.0, 4.0, 6.0])
    assert taken == pytest.approx([2.0, 3.0, 4.0, 6.0])
