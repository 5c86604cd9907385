"""
Global Solver
Monolithic Newton solve of ice momentum and fracture mass balance with
Newmark time stepping, crack propagation sweeps and creep initialisation
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import sparse
from scipy.sparse.linalg import splu

from channel_thm import LocalSolution, effective_aperture, effective_aperture_slope, local_newton
from cohesive_fracture import check_propagation, cohesive_stiffness, cohesive_traction, tip_normal_stress
from constitutive import (
    ConvergenceError,
    deviatoric_norm,
    plane_strain_stiffness,
    update_viscous_strain,
)
from geometry_mesh import (
    MATERIAL_ROCK,
    QUAD9_REFERENCE,
    CrackPath,
    InterfaceElement,
    Mesh,
    PathSegment,
    eval_basis,
    insert_interface,
    quad_rule,
)
from material_table import MaterialTable

logger = logging.getLogger(__name__)

# d N_j / d r of the 3-node line evaluated at its own nodes r_k = -1, 0, 1 (rows k)
_LINE3_NODAL_SLOPES = np.array([
    [-1.5, 2.0, -0.5],
    [-0.5, 0.0, 0.5],
    [0.5, -2.0, 1.5],
])


class PropagationError(RuntimeError):
    """Crack insertion ran away within a single increment"""


class TimeScheme(BaseModel):
    """Newmark parameters for displacement, backward-Euler weight for pressure and melt"""

    model_config = ConfigDict(frozen=True)

    beta: float = Field(default=0.4, gt=0)
    gamma: float = Field(default=0.75, gt=0)
    alpha: float = Field(default=1.0, gt=0, le=1)

    @model_validator(mode="after")
    def _unconditionally_stable(self) -> "TimeScheme":
        if not (0.5 <= self.gamma <= 2.0 * self.beta):
            raise ValueError(f"Newmark parameters need 1/2 <= gamma <= 2 beta "
                             f"(beta={self.beta}, gamma={self.gamma})")
        return self


class SolverSettings(BaseModel):
    """Step sizes and tolerances of the time loop"""

    dt: float = Field(default=2.0, gt=0)
    duration: float = Field(default=3600.0, gt=0)
    init_dt: float = Field(default=600.0, gt=0)
    init_duration: float = Field(default=86400.0, ge=0)
    energy_tolerance: float = Field(default=1e-8, gt=0)
    energy_floor: float = Field(default=1e-4, ge=0)
    max_iterations: int = Field(default=25, ge=1)
    max_halvings: int = Field(default=3, ge=0)
    max_insertions: int = Field(default=500, ge=1)
    line_search: bool = True
    line_search_max: int = Field(default=3, ge=1)
    line_search_ratio: float = Field(default=0.8, gt=0, lt=1)
    propagate: bool = True


@dataclass
class NewmarkPredictor:
    """v and a of the new step as affine functions of the new displacement"""

    u_old: np.ndarray
    c_v: float
    v_base: np.ndarray
    c_a: float
    a_base: np.ndarray

    def velocity(self, u: np.ndarray) -> np.ndarray:
        return self.v_base + self.c_v * (u - self.u_old)

    def acceleration(self, u: np.ndarray) -> np.ndarray:
        return self.a_base + self.c_a * (u - self.u_old)


def newmark_advance(u_old: np.ndarray, v_old: np.ndarray, a_old: np.ndarray, dt: float,
                    scheme: TimeScheme) -> NewmarkPredictor:
    beta, gamma = scheme.beta, scheme.gamma
    c_a = 1.0 / (beta * dt * dt)
    a_base = -v_old / (beta * dt) - (0.5 / beta - 1.0) * a_old
    v_base = v_old + dt * (1.0 - gamma) * a_old + dt * gamma * a_base
    return NewmarkPredictor(u_old=u_old.copy(), c_v=gamma / (beta * dt), v_base=v_base, c_a=c_a, a_base=a_base)


@dataclass
class SimState:
    """Converged fields at the end of the last increment"""

    u: np.ndarray
    v: np.ndarray
    a: np.ndarray
    p: np.ndarray
    p_dot: np.ndarray
    eps_v: np.ndarray
    # per interface integration point
    h_melt: np.ndarray
    t0: np.ndarray
    q: np.ndarray
    h: np.ndarray
    jump: np.ndarray
    T_inf: np.ndarray
    time: float = 0.0
    Q_total: float = 0.0
    q_inlet: float = 0.0
    E_friction: float = 0.0
    E_conduction: float = 0.0
    E_phase: float = 0.0
    V_storage: float = 0.0
    thermal_active: bool = True
    propagation_enabled: bool = True
    increments: int = 0
    newton_iterations: int = 0
    u_reference: Optional[np.ndarray] = None
    crack_volume_reference: float = 0.0
    melt_volume_reference: float = 0.0

    def snapshot(self) -> "SimState":
        """Deep copy with read-only arrays"""
        frozen = copy.deepcopy(self)
        for value in vars(frozen).values():
            if isinstance(value, np.ndarray):
                value.flags.writeable = False
        return frozen


@dataclass
class Increment:
    """Trial quantities of the increment being solved"""

    dt: float
    t_start: float
    t_end: float
    predictor: NewmarkPredictor
    eps_v: np.ndarray
    visc_forces: np.ndarray
    u: np.ndarray
    p: np.ndarray
    inertia: bool = True
    local: Optional[LocalSolution] = None
    jump: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    q_inlet: float = 0.0
    iterations: int = 0
    history: List[float] = field(default_factory=list)


@dataclass
class _Topology:
    revision: int
    dofs: np.ndarray
    K_el: sparse.csr_matrix
    M: sparse.csr_matrix
    f_grav: np.ndarray
    free: np.ndarray
    plus: np.ndarray
    minus: np.ndarray
    pd: np.ndarray
    normal: np.ndarray
    weights: np.ndarray
    slopes: np.ndarray
    g_s: np.ndarray
    cohesive: np.ndarray
    f_t: np.ndarray
    inlet: int
    bulk_cache: dict = field(default_factory=dict)


def solve_linear(K: sparse.spmatrix, rhs: np.ndarray) -> np.ndarray:
    """Sparse LU on a row- and column-equilibrated copy of K"""
    K = K.tocsr()
    row = np.asarray(abs(K).max(axis=1).toarray()).ravel()
    if np.any(row == 0.0):
        raise ConvergenceError("tangent matrix has empty rows")
    Kr = sparse.diags(1.0 / row) @ K
    col = np.asarray(abs(Kr).max(axis=0).toarray()).ravel()
    if np.any(col == 0.0):
        raise ConvergenceError("tangent matrix has empty columns")
    Ks = (Kr @ sparse.diags(1.0 / col)).tocsc()
    try:
        lu = splu(Ks)
    except RuntimeError as e:
        raise ConvergenceError(f"singular tangent matrix: {e}") from e
    return lu.solve(rhs / row) / col


class HydrofractureModel:
    """Discrete model of the slab: element operators, interfaces and the time integrator"""

    def __init__(self, mesh: Mesh, path: CrackPath, materials: MaterialTable,
                 scheme: Optional[TimeScheme] = None, settings: Optional[SolverSettings] = None):
        self.mesh = mesh
        self.path = path
        self.materials = materials
        self.scheme = scheme or TimeScheme()
        self.settings = settings or SolverSettings()
        self.flow = materials.flow
        self.thermal = materials.thermal
        self.glen_n = materials.ice.n
        self._topology: Optional[_Topology] = None
        self._setup_elements()

    # ------------------------------------------------------------------
    # bulk element operators
    # ------------------------------------------------------------------

    def _setup_elements(self) -> None:
        mesh = self.mesh
        points, weights = quad_rule()
        basis = [eval_basis("quad9", pt) for pt in points]
        N_ref = np.array([b[0] for b in basis])
        dN_ref = np.array([b[1] for b in basis])

        coords = mesh.nodes[mesh.elements]
        relative = (coords - coords[:, :1, :]).reshape(len(coords), -1)
        key = np.column_stack([np.round(relative, 6), mesh.material])
        _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
        self.element_class = inverse.ravel()
        rep = coords[first]

        J = np.einsum("gna,cnb->cgab", dN_ref, rep)
        detJ = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        if np.any(detJ <= 0):
            raise ValueError("element with non-positive Jacobian")
        self.dNdx = np.einsum("gna,cgba->cgnb", dN_ref, np.linalg.inv(J))
        self.wdet = detJ * weights
        # integration point closest to each of the nine element nodes
        self.node_ip = np.argmin(np.linalg.norm(QUAD9_REFERENCE[:, None, :] - points[None], axis=2), axis=1)

        solids = [self.materials.ice, self.materials.rock]
        D_mat = np.array([plane_strain_stiffness(s.E, s.nu) for s in solids])
        rho_mat = np.array([s.rho for s in solids])
        class_material = mesh.material[first]
        D_c = D_mat[class_material]
        rho_c = rho_mat[class_material]

        n_c = len(first)
        B = np.zeros((n_c, len(points), 4, 18))
        B[:, :, 0, 0::2] = self.dNdx[..., 0]
        B[:, :, 1, 1::2] = self.dNdx[..., 1]
        B[:, :, 3, 0::2] = self.dNdx[..., 1]
        B[:, :, 3, 1::2] = self.dNdx[..., 0]
        Nmat = np.zeros((len(points), 2, 18))
        Nmat[:, 0, 0::2] = N_ref
        Nmat[:, 1, 1::2] = N_ref
        gravity = np.array([0.0, -self.materials.gravity])

        self.Ke = np.einsum("cgia,cij,cgjb,cg->cab", B, D_c, B, self.wdet)
        self.Me = rho_c[:, None, None] * np.einsum("gia,gib,cg->cab", Nmat, Nmat, self.wdet)
        self.Fg = rho_c[:, None] * np.einsum("gia,i,cg->ca", Nmat, gravity, self.wdet)
        self.element_D = D_c[self.element_class]

        ip_xy = np.einsum("gn,enb->egb", N_ref, coords)
        depth = mesh.spec.ice_thickness - ip_xy[..., 1]
        A = np.asarray(self.materials.creep_at(depth), dtype=float)
        self.ip_A = np.where((mesh.material == MATERIAL_ROCK)[:, None], 0.0, A)
        logger.info(f"Element operators: {n_c} distinct element shapes for {len(coords)} elements")

    def strains(self, u: np.ndarray, elements: Optional[np.ndarray] = None) -> np.ndarray:
        """Voigt strains (n_el, 9, 4) at the Gauss points"""
        idx = np.arange(len(self.mesh.elements)) if elements is None else np.asarray(elements)
        dNdx = self.dNdx[self.element_class[idx]]
        ue = u.reshape(-1, 2)[self.mesh.elements[idx]]
        grad = np.einsum("egna,enb->egba", dNdx, ue)
        eps = np.zeros(grad.shape[:2] + (4,))
        eps[..., 0] = grad[..., 0, 0]
        eps[..., 1] = grad[..., 1, 1]
        eps[..., 3] = grad[..., 0, 1] + grad[..., 1, 0]
        return eps

    def stresses(self, u: np.ndarray, eps_v: np.ndarray, elements: Optional[np.ndarray] = None) -> np.ndarray:
        idx = np.arange(len(self.mesh.elements)) if elements is None else np.asarray(elements)
        elastic = self.strains(u, idx) - eps_v[idx]
        return np.einsum("eij,egj->egi", self.element_D[idx], elastic)

    def element_forces(self, sigma: np.ndarray) -> np.ndarray:
        """Integrated B^T sigma of every element, (n_el, 18)"""
        dNdx = self.dNdx[self.element_class]
        sw = sigma * self.wdet[self.element_class][..., None]
        forces = np.empty((len(sigma), 18))
        forces[:, 0::2] = (np.einsum("egn,eg->en", dNdx[..., 0], sw[..., 0])
                           + np.einsum("egn,eg->en", dNdx[..., 1], sw[..., 3]))
        forces[:, 1::2] = (np.einsum("egn,eg->en", dNdx[..., 1], sw[..., 1])
                           + np.einsum("egn,eg->en", dNdx[..., 0], sw[..., 3]))
        return forces

    # ------------------------------------------------------------------
    # topology-dependent data
    # ------------------------------------------------------------------

    def topology(self) -> _Topology:
        mesh = self.mesh
        if self._topology is not None and self._topology.revision == mesh.revision:
            return self._topology

        n = mesh.n_dofs
        n_u = mesh.n_u_dofs
        dofs = mesh.element_dofs()
        cls = self.element_class
        rows = np.broadcast_to(dofs[:, :, None], dofs.shape + (18,)).ravel()
        cols = np.broadcast_to(dofs[:, None, :], dofs.shape[:1] + (18, 18)).ravel()
        K_el = sparse.coo_matrix((self.Ke[cls].ravel(), (rows, cols)), shape=(n, n)).tocsr()
        M = sparse.coo_matrix((self.Me[cls].ravel(), (rows, cols)), shape=(n, n)).tocsr()
        f_grav = np.bincount(dofs.ravel(), weights=self.Fg[cls].ravel(), minlength=n_u)

        fixed = np.concatenate([mesh.fixed_dofs(), np.zeros(mesh.n_p_dofs, dtype=bool)])
        interfaces = mesh.interfaces
        normal = np.array([i.segment.normal for i in interfaces]).reshape(-1, 2)
        tangent = np.array([i.segment.tangent for i in interfaces]).reshape(-1, 2)
        lengths = np.array([i.segment.length for i in interfaces])
        inlet = mesh.pressure_index[self.path.arms["vertical"][0].nodes[0]]

        self._topology = _Topology(
            revision=mesh.revision, dofs=dofs, K_el=K_el, M=M, f_grav=f_grav,
            free=np.flatnonzero(~fixed),
            plus=np.array([i.plus_nodes for i in interfaces]).reshape(-1, 3),
            minus=np.array([i.minus_nodes for i in interfaces]).reshape(-1, 3),
            pd=np.array([i.pressure_dofs for i in interfaces]).reshape(-1, 3),
            normal=normal,
            weights=np.array([i.weights for i in interfaces]).reshape(-1, 3),
            slopes=_LINE3_NODAL_SLOPES[None, :, :] * (2.0 / lengths)[:, None, None],
            g_s=tangent @ np.array([0.0, -self.materials.gravity]),
            cohesive=np.array([i.cohesive for i in interfaces], dtype=bool),
            f_t=np.array([i.f_t if i.cohesive else 1.0 for i in interfaces]),
            inlet=inlet,
        )
        return self._topology

    def _bulk_tangent(self, topo: _Topology, c_a: float) -> sparse.csr_matrix:
        if c_a not in topo.bulk_cache:
            topo.bulk_cache.clear()
            topo.bulk_cache[c_a] = (topo.K_el + c_a * topo.M).tocsr()
        return topo.bulk_cache[c_a]

    # ------------------------------------------------------------------
    # fracture channel
    # ------------------------------------------------------------------

    def channel_terms(self, state: SimState, inc: Increment, u: np.ndarray, p: np.ndarray) -> dict:
        """Jump, effective gradient and converged local channel solution at all IPs"""
        topo = self.topology()
        n_i = len(topo.plus)
        u2 = u.reshape(-1, 2)
        jump = np.einsum("ikd,id->ik", u2[topo.plus] - u2[topo.minus], topo.normal)
        pe = p[topo.pd]
        G = np.einsum("ikj,ij->ik", topo.slopes, pe) - self.flow.rho_w * topo.g_s[:, None]
        elapsed = inc.t_end - state.t0
        local = local_newton(
            G.ravel(), jump.ravel(), state.h_melt, elapsed, state.T_inf, inc.dt,
            self.flow, self.thermal, thermal_active=state.thermal_active,
        )
        shape = (n_i, 3)
        h_store = effective_aperture(local.h, self.flow).reshape(shape)
        dp = pe - state.p[topo.pd]
        beta_m = 1.0 - self.thermal.rho_i / self.flow.rho_w
        dt = inc.dt
        source = ((jump - state.jump.reshape(shape)) / dt
                  + beta_m * (local.h_melt.reshape(shape) - state.h_melt.reshape(shape)) / dt
                  + h_store * dp / (self.flow.K_w * dt))
        return {"jump": jump, "pe": pe, "G": G, "local": local, "h_store": h_store, "dp": dp, "source": source}

    # ------------------------------------------------------------------
    # residual and tangent
    # ------------------------------------------------------------------

    def assemble_system(self, state: SimState, inc: Increment, u: np.ndarray,
                        p: np.ndarray) -> Tuple[np.ndarray, sparse.csr_matrix, dict]:
        """Residual r(u, p) and its consistent tangent over all dofs"""
        mesh = self.mesh
        topo = self.topology()
        n_u, n = mesh.n_u_dofs, mesh.n_dofs
        pred = inc.predictor
        c_a = pred.c_a if inc.inertia else 0.0

        U = np.concatenate([u, np.zeros(mesh.n_p_dofs)])
        r = topo.K_el @ U
        if inc.inertia:
            r = r + topo.M @ np.concatenate([pred.acceleration(u), np.zeros(mesh.n_p_dofs)])
        r[:n_u] -= topo.f_grav
        r[:n_u] -= np.bincount(topo.dofs.ravel(), weights=inc.visc_forces.ravel(), minlength=n_u)

        terms = self.channel_terms(state, inc, u, p)
        local: LocalSolution = terms["local"]
        n_i = len(topo.plus)
        shape = (n_i, 3)
        w = topo.weights
        nrm = topo.normal
        slopes = topo.slopes
        jump, pe = terms["jump"], terms["pe"]
        flow = self.flow
        dt = inc.dt

        # cohesive closing traction and fluid pressure on both faces
        coh = topo.cohesive[:, None]
        ft = topo.f_t[:, None]
        Gc = self.materials.ice.Gc
        traction = np.where(coh, cohesive_traction(jump, ft, Gc), 0.0)
        stiffness = np.where(coh, cohesive_stiffness(jump, ft, Gc), 0.0)
        face = (w * (pe - traction))[..., None] * nrm[:, None, :]
        r_u2 = np.zeros((mesh.n_nodes, 2))
        np.add.at(r_u2, topo.plus, -face)
        np.add.at(r_u2, topo.minus, face)
        r[:n_u] += r_u2.ravel()

        # mass balance of the fracture fluid
        q = local.q.reshape(shape)
        r_pe = w * terms["source"] - np.einsum("ik,ikj->ij", w * q, slopes)
        r[n_u:] += np.bincount(topo.pd.ravel(), weights=r_pe.ravel(), minlength=mesh.n_p_dofs)
        inlet = n_u + topo.inlet
        r[inlet] -= self.materials.k_p * (self.materials.p_ext - p[topo.inlet])
        q_inlet = float(np.sum(w * terms["source"]))

        # tangent
        floor_slope = effective_aperture_slope(local.h, flow).reshape(shape)
        beta_m = 1.0 - self.thermal.rho_i / flow.rho_w
        stor = terms["dp"] / (flow.K_w * dt)
        dS_dG = (beta_m / dt * local.dhm_dG.reshape(shape)
                 + stor * floor_slope * local.dh_dG.reshape(shape))
        dS_dj = (1.0 / dt + beta_m / dt * local.dhm_djump.reshape(shape)
                 + stor * floor_slope * local.dh_djump.reshape(shape))
        dS_dp = terms["h_store"] / (flow.K_w * dt)
        dq_dG = local.dq_dG.reshape(shape)
        dq_dj = local.dq_djump.reshape(shape)

        side_dofs = [2 * topo.plus[..., None] + np.arange(2), 2 * topo.minus[..., None] + np.arange(2)]
        signs = (1.0, -1.0)
        pg = n_u + topo.pd
        nn = np.einsum("id,ie->ide", nrm, nrm)
        rows: List[np.ndarray] = []
        cols: List[np.ndarray] = []
        vals: List[np.ndarray] = []

        def add(r_idx, c_idx, v):
            r_idx, c_idx, v = np.broadcast_arrays(r_idx, c_idx, v)
            rows.append(r_idx.ravel())
            cols.append(c_idx.ravel())
            vals.append(v.ravel())

        for sa, da in zip(signs, side_dofs):
            for sb, db in zip(signs, side_dofs):
                add(da[..., :, None], db[..., None, :], sa * sb * (w * stiffness)[..., None, None] * nn[:, None])
            add(da, pg[..., None], -sa * w[..., None] * nrm[:, None, :])
            add(pg[..., None], da, sa * (w * dS_dj)[..., None] * nrm[:, None, :])
            add(pg[:, :, None, None], da[:, None, :, :],
                -sa * np.einsum("ik,ikj,id->ijkd", w * dq_dj, slopes, nrm))

        add(pg, pg, w * dS_dp)
        add(pg[:, :, None], pg[:, None, :], (w * dS_dG)[..., None] * slopes)
        add(pg[:, :, None], pg[:, None, :], -np.einsum("ik,ikj,ikm->ijm", w * dq_dG, slopes, slopes))
        add(np.array([inlet]), np.array([inlet]), np.array([self.materials.k_p]))

        K_if = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(n, n)).tocsr()
        K = self._bulk_tangent(topo, c_a) + K_if
        terms["q_inlet"] = q_inlet
        return r, K, terms

    # ------------------------------------------------------------------
    # increments
    # ------------------------------------------------------------------

    def begin_increment(self, state: SimState, dt: float, inertia: bool = True) -> Increment:
        eps = self.strains(state.u)
        if np.any(self.ip_A > 0):
            eps_v = update_viscous_strain(eps, state.eps_v, self.element_D[:, None], self.ip_A, self.glen_n, dt)
        else:
            eps_v = state.eps_v.copy()
        sigma_v = np.einsum("eij,egj->egi", self.element_D, eps_v)
        return Increment(
            dt=dt, t_start=state.time, t_end=state.time + dt,
            predictor=newmark_advance(state.u, state.v, state.a, dt, self.scheme),
            eps_v=eps_v, visc_forces=self.element_forces(sigma_v),
            u=state.u.copy(), p=state.p.copy(), inertia=inertia,
        )

    def tip_stress(self, inc: Increment, segment: PathSegment) -> float:
        """
        Normal stress across the candidate segment at its start vertex: the
        area-weighted average of the integration point nearest that vertex in
        each adjacent bulk element.
        """
        node = segment.nodes[0]
        elements = self.mesh.elements_around(node)
        gauss = self.node_ip[[self.mesh.local_position(e, node) for e in elements]]
        rows = np.arange(len(elements))
        sigma = self.stresses(inc.u, inc.eps_v, elements)[rows, gauss]
        weights = self.wdet[self.element_class[elements], gauss]
        return tip_normal_stress(sigma, weights, np.asarray(segment.normal))

    def segment_strength(self, segment: PathSegment) -> float:
        return self.materials.strength_at(segment.depth)

    def hydrostatic_pressure(self, node: int) -> float:
        depth = self.mesh.spec.ice_thickness - self.mesh.nodes[node, 1]
        return self.materials.p_ext + self.flow.rho_w * self.materials.gravity * depth

    def ip_temperatures(self, interface: InterfaceElement) -> np.ndarray:
        return np.asarray(self.materials.temperature_at(self.mesh.ip_depths(interface)), dtype=float)

    def open_segment(self, state: SimState, inc: Increment, arm: str, index: int, f_t: float) -> InterfaceElement:
        """Insert an interface and extend committed and trial fields onto the new dofs"""
        interface = insert_interface(self.mesh, self.path, arm, index, inc.t_start, f_t)
        if interface.duplicated:
            new, src = np.array(interface.duplicated).T
            for name in ("u", "v", "a"):
                values = getattr(state, name).reshape(-1, 2)
                setattr(state, name, np.concatenate([values, values[src]]).ravel())
            trial = inc.u.reshape(-1, 2)
            inc.u = np.concatenate([trial, trial[src]]).ravel()
        for index_p, source in interface.new_pressure:
            node = next(n for n, i in self.mesh.pressure_index.items() if i == index_p)
            value = state.p[source] if source is not None else self.hydrostatic_pressure(node)
            trial_value = inc.p[source] if source is not None else value
            state.p = np.append(state.p, value)
            state.p_dot = np.append(state.p_dot, 0.0)
            inc.p = np.append(inc.p, trial_value)
        state.h_melt = np.append(state.h_melt, np.zeros(3))
        state.t0 = np.append(state.t0, np.full(3, interface.t0))
        state.q = np.append(state.q, np.zeros(3))
        state.h = np.append(state.h, np.zeros(3))
        state.jump = np.append(state.jump, np.zeros(3))
        state.T_inf = np.append(state.T_inf, self.ip_temperatures(interface))
        inc.predictor = newmark_advance(state.u, state.v, state.a, inc.dt, self.scheme)
        return interface

    def checkpoint(self, state: SimState) -> tuple:
        return copy.deepcopy((self.mesh, self.path, state))

    def rollback(self, state: SimState, saved: tuple) -> None:
        """Restore mesh, path and state from a checkpoint; the state is updated in place"""
        mesh, path, old = saved
        self.mesh, self.path = mesh, path
        self._topology = None
        vars(state).update(vars(old))

    def commit(self, state: SimState, inc: Increment) -> None:
        topo = self.topology()
        local = inc.local
        w = topo.weights.ravel()
        dt = inc.dt
        h_store = effective_aperture(local.h, self.flow)
        dp = (inc.p[topo.pd] - state.p[topo.pd]).ravel()

        if inc.inertia:
            state.v = inc.predictor.velocity(inc.u)
            state.a = inc.predictor.acceleration(inc.u)
        else:
            state.v = np.zeros_like(inc.u)
            state.a = np.zeros_like(inc.u)
        state.p_dot = (inc.p - state.p) / dt
        state.V_storage += float(np.sum(w * h_store * dp) / self.flow.K_w)
        if state.thermal_active:
            state.E_friction += float(np.sum(w * local.j_flow) * dt)
            state.E_conduction += float(np.sum(w * -local.j_ice) * dt)
            state.E_phase -= float(np.sum(w * (local.h_melt - state.h_melt))
                                   * self.thermal.rho_i * self.thermal.latent_heat)
        state.u = inc.u
        state.p = inc.p
        state.eps_v = inc.eps_v
        state.h_melt = local.h_melt
        state.q = local.q
        state.h = local.h
        state.jump = inc.jump.ravel()
        state.q_inlet = inc.q_inlet
        state.Q_total += inc.q_inlet * dt
        state.time = inc.t_end
        state.increments += 1
        state.newton_iterations = inc.iterations


def initial_state(model: HydrofractureModel) -> SimState:
    """Undeformed slab with a hydrostatic column in the notch"""
    mesh = model.mesh
    n_ips = mesh.n_ips
    p = np.zeros(mesh.n_p_dofs)
    for node, index in mesh.pressure_index.items():
        p[index] = model.hydrostatic_pressure(node)
    T_inf = np.concatenate([model.ip_temperatures(i) for i in mesh.interfaces]) if mesh.interfaces else np.zeros(0)
    return SimState(
        u=np.zeros(mesh.n_u_dofs), v=np.zeros(mesh.n_u_dofs), a=np.zeros(mesh.n_u_dofs),
        p=p, p_dot=np.zeros_like(p), eps_v=np.zeros((len(mesh.elements), 9, 4)),
        h_melt=np.zeros(n_ips), t0=np.zeros(n_ips), q=np.zeros(n_ips), h=np.zeros(n_ips),
        jump=np.zeros(n_ips), T_inf=T_inf,
    )


def _line_search(model: HydrofractureModel, state: SimState, inc: Increment, r: np.ndarray,
                 du: np.ndarray) -> Tuple[float, Optional[tuple]]:
    """
    Secant search for the root of s(alpha) = du . r(x + alpha du).

    Accepts the full step when |s(1)| <= ratio |s(0)|. A trial point where the
    local channel solve fails counts as a bad step and halves alpha. Returns the
    step length and the assembly at it (None if that point could not be assembled).
    """
    settings = model.settings
    free = model.topology().free
    n_u = model.mesh.n_u_dofs
    s0 = float(du[free] @ r[free])
    alpha_prev, s_prev = 0.0, s0
    alpha = 1.0
    trial = None
    for attempt in range(settings.line_search_max + 1):
        try:
            trial = model.assemble_system(state, inc, inc.u + alpha * du[:n_u], inc.p + alpha * du[n_u:])
        except ConvergenceError:
            trial, s = None, np.inf
        else:
            s = float(du[free] @ trial[0][free])
        if (trial is not None and abs(s) <= settings.line_search_ratio * abs(s0)) \
                or attempt == settings.line_search_max:
            break
        if trial is None or not np.isfinite(s) or s == s_prev:
            guess = 0.5 * alpha
        else:
            guess = alpha - s * (alpha - alpha_prev) / (s - s_prev)
            alpha_prev, s_prev = alpha, s
        alpha = float(np.clip(guess, 0.1, 1.0))
    if alpha < 1.0:
        logger.debug(f"Line search step {alpha:.3f}")
    return alpha, trial


def newton_solve(model: HydrofractureModel, state: SimState, inc: Increment) -> int:
    """
    Drive the increment to equilibrium.

    Returns the iteration index at which the energy norm |r . du| fell below
    max(tol * first, floor); a linear problem converges at iteration 1.
    Steps that do not reduce the directional residual are shortened by a
    secant line search.
    """
    settings = model.settings
    history: List[float] = []
    first = None
    assembled = None
    for iteration in range(settings.max_iterations + 1):
        r, K, _ = assembled if assembled is not None else model.assemble_system(state, inc, inc.u, inc.p)
        assembled = None
        topo = model.topology()
        free = topo.free
        du_free = solve_linear(K[free][:, free], -r[free])
        energy = abs(float(r[free] @ du_free))
        if not np.isfinite(energy):
            raise ConvergenceError("non-finite residual in Newton iteration", history)
        history.append(energy)
        if first is None:
            first = energy

        du = np.zeros(model.mesh.n_dofs)
        du[free] = du_free
        n_u = model.mesh.n_u_dofs
        converged = energy <= max(settings.energy_tolerance * first, settings.energy_floor) and \
            (iteration > 0 or energy <= settings.energy_floor)
        step = 1.0
        if settings.line_search and not converged:
            step, assembled = _line_search(model, state, inc, r, du)
        inc.u = inc.u + step * du[:n_u]
        inc.p = inc.p + step * du[n_u:]

        if converged:
            terms = model.channel_terms(state, inc, inc.u, inc.p)
            inc.local = terms["local"]
            inc.jump = terms["jump"]
            inc.G = terms["G"]
            w = topo.weights
            inc.q_inlet = float(np.sum(w * terms["source"]))
            inc.iterations = iteration
            inc.history = history
            logger.debug(f"Newton converged in {iteration} iterations (energy {energy:.3e})")
            return iteration
    raise ConvergenceError(
        f"Newton did not converge in {settings.max_iterations} iterations "
        f"(t={inc.t_end:.1f} s, dt={inc.dt:g} s)", history)


def propagation_sweep(model: HydrofractureModel, state: SimState, inc: Increment) -> int:
    """Open segments one at a time, re-solving after each, until no tip is overstressed"""
    inserted = 0
    while True:
        hit = None
        for arm, index in model.path.active_tips():
            segment = model.path.arms[arm][index]
            sigma_n = model.tip_stress(inc, segment)
            f_t = model.segment_strength(segment)
            if check_propagation(sigma_n, f_t):
                hit = (arm, index, f_t, sigma_n)
                break
        if hit is None:
            return inserted
        if inserted >= model.settings.max_insertions:
            raise PropagationError(f"more than {model.settings.max_insertions} insertions "
                                   f"in the increment ending at t={inc.t_end:.1f} s")
        arm, index, f_t, sigma_n = hit
        model.open_segment(state, inc, arm, index, f_t)
        if arm == "vertical" and model.path.reached_bed:
            logger.info(f"✅ Crevasse reached the bed at t={inc.t_end:.1f} s")
        logger.debug(f"Tip stress {sigma_n / 1e6:.3f} MPa > {f_t / 1e6:.3f} MPa on {arm} segment {index}")
        newton_solve(model, state, inc)
        inserted += 1


def advance(model: HydrofractureModel, state: SimState, dt: float, halvings: int = 0,
            inertia: bool = True) -> None:
    """
    One increment; halves the step on non-convergence up to the configured limit.
    Segments opened during a failed attempt are rolled back with the state.
    """
    saved = model.checkpoint(state) if state.propagation_enabled else None
    try:
        inc = model.begin_increment(state, dt, inertia=inertia)
        newton_solve(model, state, inc)
        if state.propagation_enabled:
            propagation_sweep(model, state, inc)
        model.commit(state, inc)
    except ConvergenceError as e:
        if saved is not None:
            model.rollback(state, saved)
        if halvings >= model.settings.max_halvings:
            raise
        logger.warning(f"⚠️ Step of {dt:g} s at t={state.time:.1f} s failed ({e}); halving")
        advance(model, state, 0.5 * dt, halvings + 1, inertia)
        advance(model, state, 0.5 * dt, halvings + 1, inertia)


def _start_propagation(model: HydrofractureModel, state: SimState) -> None:
    state.time = 0.0
    state.t0[:] = 0.0
    state.thermal_active = True
    state.propagation_enabled = model.settings.propagate
    state.Q_total = state.q_inlet = 0.0
    state.E_friction = state.E_conduction = state.E_phase = state.V_storage = 0.0
    state.u_reference = state.u.copy()
    w = model.topology().weights.ravel()
    state.crack_volume_reference = float(np.sum(w * state.jump))
    state.melt_volume_reference = float(np.sum(w * state.h_melt))


def static_solve(model: HydrofractureModel, state: SimState) -> SimState:
    """Gravity equilibrium without inertia, thermal model or propagation"""
    state.thermal_active = False
    state.propagation_enabled = False
    state.time = -model.settings.init_dt
    advance(model, state, model.settings.init_dt, inertia=False)
    _start_propagation(model, state)
    return state


STATIONARY_WINDOW = 10


def stationarity_drift(peaks: Sequence[float], window: int = STATIONARY_WINDOW) -> float:
    """Relative change of the peak deviatoric stress over the last `window` increments"""
    if len(peaks) < 2:
        return 0.0
    reference = peaks[-window - 1] if len(peaks) > window else peaks[0]
    return abs(peaks[-1] - reference) / max(abs(peaks[-1]), 1.0)


def creep_initialize(model: HydrofractureModel, state: SimState) -> SimState:
    """
    Let gravity-driven creep relax the slab before water is admitted.

    Propagation is disabled and melt is frozen; the clock is reset so the
    propagation phase starts at t = 0.
    """
    settings = model.settings
    if settings.init_duration <= 0:
        return static_solve(model, state)
    steps = max(1, round(settings.init_duration / settings.init_dt))
    state.thermal_active = False
    state.propagation_enabled = False
    state.time = -steps * settings.init_dt
    peak = []
    for _ in range(steps):
        advance(model, state, settings.init_dt)
        peak.append(float(deviatoric_norm(model.stresses(state.u, state.eps_v)).max()))
    drift = stationarity_drift(peak)
    if drift > 1e-2:
        logger.warning(f"⚠️ Stress not yet stationary after creep initialisation "
                       f"(change over the last {STATIONARY_WINDOW} steps {drift:.1%})")
    logger.info(f"✅ Creep initialisation done: {steps} steps of {settings.init_dt:g} s, "
                f"peak deviatoric stress {peak[-1] / 1e6:.3f} MPa")
    _start_propagation(model, state)
    return state


Observer = Callable[[HydrofractureModel, SimState], None]


def run(model: HydrofractureModel, state: SimState, observers: Sequence[Observer] = (),
        duration: Optional[float] = None) -> SimState:
    """
    March the propagation phase. Observers get a read-only snapshot every
    `stride` steps (their own attribute, default 1); no snapshot is taken on
    steps where none is due.
    """
    settings = model.settings
    duration = settings.duration if duration is None else duration
    steps = round(duration / settings.dt)
    logger.info(f"🚀 Propagation phase: {steps} steps of {settings.dt:g} s")
    for step in range(steps):
        advance(model, state, settings.dt)
        due = [o for o in observers if (step + 1) % getattr(o, "stride", 1) == 0]
        if due:
            snapshot = state.snapshot()
            for observer in due:
                observer(model, snapshot)
        if (step + 1) % max(1, steps // 10) == 0:
            logger.info(f"t={state.time:.0f} s: depth {model.path.opened_length('vertical'):.1f} m, "
                        f"arms {model.path.opened_length('left'):.1f}/{model.path.opened_length('right'):.1f} m, "
                        f"Q={state.Q_total:.2f} m3/m")
    return state
