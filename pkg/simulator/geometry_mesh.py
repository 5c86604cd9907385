"""
Geometry and Mesh
Graded quadratic mesh of the ice slab on rock, the predefined T-shaped crack
path and on-the-fly insertion of interface elements by node duplication
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)

MATERIAL_ICE = 0
MATERIAL_ROCK = 1

# 9-node Lagrangian quad: corners counter-clockwise, then edge mid-nodes, then centre
QUAD9_REFERENCE = np.array([
    [-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0],
    [0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, 0.0],
])
QUAD9_EDGES = ((0, 4, 1), (1, 5, 2), (2, 6, 3), (3, 7, 0))
LINE3_REFERENCE = np.array([-1.0, 0.0, 1.0])

GAUSS_POINTS_1D = np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
GAUSS_WEIGHTS_1D = np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])
# nodal (Newton-Cotes) rule on the 3-node line, reference length 2
NEWTON_COTES_WEIGHTS = np.array([1.0 / 3.0, 4.0 / 3.0, 1.0 / 3.0])

ARMS = ("vertical", "left", "right")


class MeshError(ValueError):
    """Inconsistent domain description or illegal mesh operation"""


class DomainSpec(BaseModel):
    """Dimensions (m) and element sizes of the ice-on-rock domain"""

    model_config = ConfigDict(frozen=True)

    ice_thickness: float = Field(default=980.0, gt=0)
    domain_width: float = Field(default=6000.0, gt=0)
    rock_thickness: float = Field(default=200.0, gt=0)
    initial_notch_depth: float = Field(default=30.0, gt=0)
    fine_element_size: float = Field(default=2.5, gt=0)
    coarse_element_size: float = Field(default=20.0, gt=0)
    growth_ratio: float = Field(default=1.2, gt=1)
    band_half_width: Optional[float] = Field(default=None, gt=0)
    arm_extent: Optional[float] = Field(default=None, gt=0)

    @property
    def band(self) -> float:
        """Half-width of the uniformly fine band around the crack path"""
        return self.band_half_width if self.band_half_width is not None else 3.0 * self.fine_element_size

    @property
    def arm_span(self) -> float:
        """Reach of each horizontal arm from the axis, a whole number of fine elements; the whole bed by default"""
        half = self.domain_width / 2.0
        reach = half if self.arm_extent is None else min(self.arm_extent, half)
        return self.fine_element_size * math.floor(reach / self.fine_element_size + 1e-9)


def _tiles(length: float, size: float) -> bool:
    count = round(length / size)
    return count >= 1 and abs(count * size - length) <= 1e-9 * length


def check_domain(spec: DomainSpec) -> None:
    """Raise MeshError when the sizes cannot produce the crack path"""
    if spec.initial_notch_depth >= spec.ice_thickness:
        raise MeshError(f"notch depth {spec.initial_notch_depth} m must be below the ice thickness "
                        f"{spec.ice_thickness} m")
    h = spec.fine_element_size
    if not _tiles(spec.ice_thickness, h):
        raise MeshError(f"fine element size {h} m does not tile the ice thickness {spec.ice_thickness} m")
    if not _tiles(spec.initial_notch_depth, h):
        raise MeshError(f"fine element size {h} m does not tile the notch depth {spec.initial_notch_depth} m")
    if spec.coarse_element_size < h:
        raise MeshError("coarse element size must not be smaller than the fine one")
    if spec.domain_width / 2.0 < h:
        raise MeshError("domain is narrower than two fine elements")
    if spec.arm_extent is not None and spec.arm_extent < h:
        raise MeshError(f"arm extent {spec.arm_extent} m is shorter than one fine element")


def _graded_offsets(length: float, fine: float, coarse: float, fine_end: float, ratio: float) -> np.ndarray:
    """Offsets 0..length: fine up to fine_end, then geometric growth capped at coarse"""
    offsets = [0.0]
    size = fine
    tol = 1e-9 * length
    while offsets[-1] < length - tol:
        if offsets[-1] >= fine_end - tol:
            size = min(size * ratio, coarse)
        offsets.append(offsets[-1] + size)
    offsets[-1] = length
    # a sliver left over at the far end of the graded zone is merged, or split evenly when merging exceeds coarse
    if len(offsets) > 2 and offsets[-2] > fine_end + tol and \
            offsets[-1] - offsets[-2] < 0.5 * (offsets[-2] - offsets[-3]):
        merged = offsets[-1] - offsets[-3]
        if merged <= coarse * (1.0 + 1e-12):
            offsets.pop(-2)
        else:
            offsets[-2] = offsets[-3] + 0.5 * merged
    return np.asarray(offsets)


def eval_basis(kind: str, local: np.ndarray, coords: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Shape functions and derivatives of a quad9 or line3 element at one point.

    Derivatives are with respect to the reference coordinates, or to x/y
    (arc length for line3) when element coordinates are given.
    """
    local = np.atleast_1d(np.asarray(local, dtype=float))
    if np.any(np.abs(local) > 1.0 + 1e-12):
        raise MeshError(f"point {local} lies outside the reference element")

    def lagrange(r: float) -> Tuple[np.ndarray, np.ndarray]:
        values = np.array([0.5 * r * (r - 1.0), 1.0 - r * r, 0.5 * r * (r + 1.0)])
        slopes = np.array([r - 0.5, -2.0 * r, r + 0.5])
        return values, slopes

    if kind == "line3":
        N, dN = lagrange(float(local[0]))
        dN = dN[:, None]
        if coords is not None:
            coords = np.asarray(coords, dtype=float)
            ds = np.linalg.norm(dN[:, 0] @ coords)
            dN = dN / ds
        return N, dN

    if kind != "quad9":
        raise MeshError(f"unknown element type '{kind}'")
    Lr, dLr = lagrange(float(local[0]))
    Ls, dLs = lagrange(float(local[1]))
    index = (QUAD9_REFERENCE + 1.0).astype(int)  # -1, 0, 1 -> 0, 1, 2
    N = Lr[index[:, 0]] * Ls[index[:, 1]]
    dN = np.stack([dLr[index[:, 0]] * Ls[index[:, 1]], Lr[index[:, 0]] * dLs[index[:, 1]]], axis=1)
    if coords is not None:
        J = dN.T @ np.asarray(coords, dtype=float)
        if np.linalg.det(J) <= 0:
            raise MeshError("element has a non-positive Jacobian")
        dN = dN @ np.linalg.inv(J).T
    return N, dN


def quad_rule() -> Tuple[np.ndarray, np.ndarray]:
    """3x3 Gauss points (9, 2) and weights (9,)"""
    r, s = np.meshgrid(GAUSS_POINTS_1D, GAUSS_POINTS_1D, indexing="ij")
    wr, ws = np.meshgrid(GAUSS_WEIGHTS_1D, GAUSS_WEIGHTS_1D, indexing="ij")
    return np.stack([r.ravel(), s.ravel()], axis=1), (wr * ws).ravel()


class SegmentStatus(Enum):
    INTACT = "intact"
    NOTCH = "notch"
    COHESIVE = "cohesive"


@dataclass
class PathSegment:
    """One element edge on the predefined crack path"""

    arm: str
    index: int
    nodes: Tuple[int, int, int]  # original ids of start, mid and end vertex
    plus_element: int
    minus_element: int
    normal: Tuple[float, float]
    tangent: Tuple[float, float]
    length: float
    depth: float  # of the mid vertex below the ice surface
    status: SegmentStatus = SegmentStatus.INTACT

    @property
    def opened(self) -> bool:
        return self.status is not SegmentStatus.INTACT


@dataclass
class CrackPath:
    """Vertical arm from the surface to the bed plus left and right arms along the bed"""

    arms: Dict[str, List[PathSegment]]

    def next_index(self, arm: str) -> Optional[int]:
        for segment in self.arms[arm]:
            if not segment.opened:
                return segment.index
        return None

    @property
    def reached_bed(self) -> bool:
        return self.next_index("vertical") is None

    def active_tips(self) -> List[Tuple[str, int]]:
        """Candidate segments in checking order"""
        if not self.reached_bed:
            return [("vertical", self.next_index("vertical"))]
        tips = []
        for arm in ("left", "right"):
            index = self.next_index(arm)
            if index is not None:
                tips.append((arm, index))
        return tips

    def opened_length(self, arm: str) -> float:
        return float(sum(s.length for s in self.arms[arm] if s.opened))

    def tip_segment(self, arm: str) -> Optional[PathSegment]:
        """Last opened segment of an arm"""
        opened = [s for s in self.arms[arm] if s.opened]
        return opened[-1] if opened else None


@dataclass
class InterfaceElement:
    """Zero-thickness 6-node element on an opened path segment with 3 pressure nodes"""

    segment: PathSegment
    plus_nodes: np.ndarray
    minus_nodes: np.ndarray
    pressure_dofs: np.ndarray
    ip_offset: int
    t0: float
    f_t: float = 0.0
    plus_positions: Tuple[int, int, int] = (0, 0, 0)
    minus_positions: Tuple[int, int, int] = (0, 0, 0)
    duplicated: List[Tuple[int, int]] = field(default_factory=list)
    new_pressure: List[Tuple[int, Optional[int]]] = field(default_factory=list)

    @property
    def cohesive(self) -> bool:
        return self.segment.status is SegmentStatus.COHESIVE

    @property
    def weights(self) -> np.ndarray:
        return 0.5 * self.segment.length * NEWTON_COTES_WEIGHTS


class Mesh:
    """Structured quad9 mesh whose connectivity changes as the crack opens"""

    def __init__(self, spec: DomainSpec, x_lines: np.ndarray, y_lines: np.ndarray, bed_row: int):
        self.spec = spec
        self.x_lines = x_lines
        self.y_lines = y_lines
        self.bed_row = bed_row
        self.nx = len(x_lines) - 1
        self.ny = len(y_lines) - 1
        self.row_size = 2 * self.nx + 1

        xs = np.empty(2 * self.nx + 1)
        xs[0::2] = x_lines
        xs[1::2] = 0.5 * (x_lines[:-1] + x_lines[1:])
        ys = np.empty(2 * self.ny + 1)
        ys[0::2] = y_lines
        ys[1::2] = 0.5 * (y_lines[:-1] + y_lines[1:])
        X, Y = np.meshgrid(xs, ys)
        self.nodes = np.stack([X.ravel(), Y.ravel()], axis=1)
        self.origin = np.arange(len(self.nodes))

        ex, ey = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        i0 = (2 * ex.ravel())[:, None]
        j0 = (2 * ey.ravel())[:, None]
        di = np.array([0, 2, 2, 0, 1, 2, 1, 0, 1])
        dj = np.array([0, 0, 2, 2, 0, 1, 2, 1, 1])
        self.elements = (j0 + dj) * self.row_size + (i0 + di)
        self._original_elements = self.elements.copy()
        self.material = np.where(ey.ravel() < bed_row, MATERIAL_ROCK, MATERIAL_ICE)

        self.interfaces: List[InterfaceElement] = []
        self.pressure_index: Dict[int, int] = {}
        self.cracked_edges: set = set()
        self.revision = 0
        self._around_cache: Dict[int, np.ndarray] = {}

    def node_id(self, i: int, j: int) -> int:
        return j * self.row_size + i

    def element_id(self, ex: int, ey: int) -> int:
        return ey * self.nx + ex

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_u_dofs(self) -> int:
        return 2 * self.n_nodes

    @property
    def n_p_dofs(self) -> int:
        return len(self.pressure_index)

    @property
    def n_dofs(self) -> int:
        return self.n_u_dofs + self.n_p_dofs

    @property
    def n_ips(self) -> int:
        return 3 * len(self.interfaces)

    def elements_around(self, original_node: int) -> np.ndarray:
        """Elements that contained the original node before any duplication"""
        if original_node not in self._around_cache:
            hits = np.flatnonzero((self._original_elements == original_node).any(axis=1))
            self._around_cache[original_node] = hits
        return self._around_cache[original_node]

    def local_position(self, element: int, original_node: int) -> int:
        return int(np.flatnonzero(self._original_elements[element] == original_node)[0])

    def element_dofs(self) -> np.ndarray:
        """(n_elements, 18) displacement dofs ordered x0, y0, x1, y1, ..."""
        dofs = np.empty((len(self.elements), 18), dtype=np.int64)
        dofs[:, 0::2] = 2 * self.elements
        dofs[:, 1::2] = 2 * self.elements + 1
        return dofs

    def fixed_dofs(self) -> np.ndarray:
        """Boolean mask: u_y on the bottom edge, u_x on both lateral edges"""
        tol = 1e-9 * max(self.spec.domain_width, 1.0)
        mask = np.zeros(self.n_u_dofs, dtype=bool)
        x, y = self.nodes[:, 0], self.nodes[:, 1]
        mask[1::2] = np.abs(y - self.y_lines[0]) < tol
        mask[0::2] = (np.abs(x - self.x_lines[0]) < tol) | (np.abs(x - self.x_lines[-1]) < tol)
        return mask

    def surface_node(self, x: float) -> int:
        """Original node on the ice surface nearest to x"""
        top = np.arange(self.row_size) + (2 * self.ny) * self.row_size
        return int(top[np.argmin(np.abs(self.nodes[top, 0] - x))])

    def element_jacobians(self, local: np.ndarray) -> np.ndarray:
        """det J of every element at a reference point"""
        _, dN = eval_basis("quad9", local)
        coords = self.nodes[self.elements]
        J = np.einsum("na,enb->eab", dN, coords)
        return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]

    def area(self) -> float:
        points, weights = quad_rule()
        return float(sum(w * self.element_jacobians(p).sum() for p, w in zip(points, weights)))

    def ip_depths(self, interface: InterfaceElement) -> np.ndarray:
        """Depth below the surface of the three nodal integration points"""
        coords = self.nodes[list(interface.segment.nodes)]
        return self.spec.ice_thickness - coords[:, 1]

    def pressure_coordinates(self) -> np.ndarray:
        coords = np.zeros((self.n_p_dofs, 2))
        for node, index in self.pressure_index.items():
            coords[index] = self.nodes[node]
        return coords

    def split_node(self, original_node: int) -> List[Tuple[int, int]]:
        """
        Give every group of elements connected around the node through
        uncracked edges its own copy of the node.

        Returns (new node, node it was copied from) pairs.
        """
        around = self.elements_around(original_node)
        parent = {int(e): int(e) for e in around}

        def find(e: int) -> int:
            while parent[e] != e:
                parent[e] = parent[parent[e]]
                e = parent[e]
            return e

        for e in around:
            conn = self._original_elements[e]
            for a, m, b in QUAD9_EDGES:
                edge = (conn[a], conn[m], conn[b])
                if original_node not in edge or conn[m] in self.cracked_edges:
                    continue
                for other in self.elements_around(int(conn[m])):
                    if int(other) in parent:
                        parent[find(int(other))] = find(int(e))

        groups: Dict[int, List[int]] = {}
        for e in parent:
            groups.setdefault(find(e), []).append(e)

        created = []
        used = set()
        for group in sorted(groups.values(), key=min):
            positions = [self.local_position(e, original_node) for e in group]
            current = int(self.elements[group[0], positions[0]])
            if current not in used:
                used.add(current)
                continue
            new = self.n_nodes
            self.nodes = np.vstack([self.nodes, self.nodes[original_node]])
            self.origin = np.append(self.origin, original_node)
            for e, pos in zip(group, positions):
                self.elements[e, pos] = new
            used.add(new)
            created.append((new, current))
        return created

    def refresh_interfaces(self) -> None:
        for interface in self.interfaces:
            seg = interface.segment
            interface.plus_nodes = self.elements[seg.plus_element, list(interface.plus_positions)].copy()
            interface.minus_nodes = self.elements[seg.minus_element, list(interface.minus_positions)].copy()


def _build_path(mesh: Mesh) -> CrackPath:
    spec = mesh.spec
    ix0 = int(np.flatnonzero(np.abs(mesh.x_lines) < 1e-9 * spec.domain_width)[0])
    jb = mesh.bed_row
    n_notch = round(spec.initial_notch_depth / spec.fine_element_size)

    vertical = []
    for k, ey in enumerate(range(mesh.ny - 1, jb - 1, -1)):
        jt = 2 * (ey + 1)
        top = mesh.y_lines[ey + 1]
        bottom = mesh.y_lines[ey]
        vertical.append(PathSegment(
            arm="vertical", index=k,
            nodes=(mesh.node_id(2 * ix0, jt), mesh.node_id(2 * ix0, jt - 1), mesh.node_id(2 * ix0, jt - 2)),
            plus_element=mesh.element_id(ix0, ey), minus_element=mesh.element_id(ix0 - 1, ey),
            normal=(1.0, 0.0), tangent=(0.0, -1.0), length=float(top - bottom),
            depth=float(spec.ice_thickness - 0.5 * (top + bottom)),
            status=SegmentStatus.NOTCH if k < n_notch else SegmentStatus.INTACT,
        ))

    jrow = 2 * jb
    right = []
    reach = spec.arm_span * (1.0 + 1e-9)
    columns = [ex for ex in range(ix0, mesh.nx) if mesh.x_lines[ex + 1] <= reach]
    for k, ex in enumerate(columns):
        right.append(PathSegment(
            arm="right", index=k,
            nodes=(mesh.node_id(2 * ex, jrow), mesh.node_id(2 * ex + 1, jrow), mesh.node_id(2 * ex + 2, jrow)),
            plus_element=mesh.element_id(ex, jb), minus_element=mesh.element_id(ex, jb - 1),
            normal=(0.0, 1.0), tangent=(1.0, 0.0),
            length=float(mesh.x_lines[ex + 1] - mesh.x_lines[ex]), depth=spec.ice_thickness,
        ))
    left = []
    columns = [ex for ex in range(ix0 - 1, -1, -1) if mesh.x_lines[ex] >= -reach]
    for k, ex in enumerate(columns):
        left.append(PathSegment(
            arm="left", index=k,
            nodes=(mesh.node_id(2 * ex + 2, jrow), mesh.node_id(2 * ex + 1, jrow), mesh.node_id(2 * ex, jrow)),
            plus_element=mesh.element_id(ex, jb), minus_element=mesh.element_id(ex, jb - 1),
            normal=(0.0, 1.0), tangent=(-1.0, 0.0),
            length=float(mesh.x_lines[ex + 1] - mesh.x_lines[ex]), depth=spec.ice_thickness,
        ))
    return CrackPath(arms={"vertical": vertical, "left": left, "right": right})


def _open_segment(mesh: Mesh, segment: PathSegment, time_now: float, f_t: float) -> InterfaceElement:
    mesh.cracked_edges.add(segment.nodes[1])
    duplicated = []
    for node in segment.nodes:
        duplicated.extend(mesh.split_node(node))

    source = mesh.pressure_index.get(segment.nodes[0])
    new_pressure = []
    for node in segment.nodes:
        if node not in mesh.pressure_index:
            index = mesh.n_p_dofs
            mesh.pressure_index[node] = index
            new_pressure.append((index, source))

    interface = InterfaceElement(
        segment=segment,
        plus_nodes=np.zeros(3, dtype=np.int64), minus_nodes=np.zeros(3, dtype=np.int64),
        pressure_dofs=np.array([mesh.pressure_index[n] for n in segment.nodes]),
        ip_offset=mesh.n_ips, t0=time_now, f_t=f_t,
        plus_positions=tuple(mesh.local_position(segment.plus_element, n) for n in segment.nodes),
        minus_positions=tuple(mesh.local_position(segment.minus_element, n) for n in segment.nodes),
        duplicated=duplicated, new_pressure=new_pressure,
    )
    mesh.interfaces.append(interface)
    mesh.refresh_interfaces()
    mesh.revision += 1
    return interface


def build_mesh(spec: DomainSpec) -> Tuple[Mesh, CrackPath]:
    """Mesh the domain, lay out the crack path and open the initial notch"""
    check_domain(spec)
    h = spec.fine_element_size
    half = _graded_offsets(spec.domain_width / 2.0, h, spec.coarse_element_size,
                           max(spec.band, spec.arm_span), spec.growth_ratio)
    x_lines = np.concatenate([-half[::-1], half[1:]])
    rock = _graded_offsets(spec.rock_thickness, h, spec.coarse_element_size, spec.band, spec.growth_ratio)
    ice = np.linspace(0.0, spec.ice_thickness, round(spec.ice_thickness / h) + 1)
    y_lines = np.concatenate([-rock[::-1], ice[1:]])

    mesh = Mesh(spec, x_lines, y_lines, bed_row=len(rock) - 1)
    if np.any(mesh.element_jacobians(np.zeros(2)) <= 0):
        raise MeshError("mesh contains inverted elements")
    path = _build_path(mesh)

    for segment in path.arms["vertical"]:
        if segment.status is SegmentStatus.NOTCH:
            _open_segment(mesh, segment, time_now=0.0, f_t=0.0)

    logger.info(f"✅ Mesh ready: {len(mesh.elements)} elements, {mesh.n_nodes} nodes, "
                f"{len(path.arms['vertical'])} vertical and "
                f"{len(path.arms['left']) + len(path.arms['right'])} horizontal path segments")
    return mesh, path


def insert_interface(mesh: Mesh, path: CrackPath, arm: str, index: int, time_now: float,
                     f_t: float) -> InterfaceElement:
    """
    Open the next intact segment of an arm.

    The returned element lists the duplicated nodes and new pressure nodes
    with their sources so that field values can be copied onto them.
    """
    if arm not in path.arms:
        raise MeshError(f"unknown crack arm '{arm}'")
    if index != path.next_index(arm):
        raise MeshError(f"segment {index} of the {arm} arm is not the next intact one")
    if arm != "vertical" and not path.reached_bed:
        raise MeshError("horizontal cracking starts only once the vertical crack reaches the bed")
    segment = path.arms[arm][index]
    segment.status = SegmentStatus.COHESIVE
    interface = _open_segment(mesh, segment, time_now, f_t)
    logger.debug(f"Opened {arm} segment {index} at t={time_now:.1f} s "
                 f"(+{len(interface.duplicated)} nodes, +{len(interface.new_pressure)} pressure dofs)")
    return interface


def dump_mesh(mesh: Mesh, stem: Union[str, Path]) -> Tuple[Path, Path]:
    """Write node and element tables next to each other"""
    stem = Path(stem)
    node_file = stem.with_name(stem.name + "_nodes.txt")
    element_file = stem.with_name(stem.name + "_elements.txt")
    node_table = np.column_stack([np.arange(mesh.n_nodes), mesh.nodes])
    np.savetxt(node_file, node_table, fmt=["%d", "%.6f", "%.6f"], header="id x_m y_m")
    element_table = np.column_stack([np.arange(len(mesh.elements)), mesh.elements, mesh.material])
    np.savetxt(element_file, element_table, fmt="%d",
               header="id " + " ".join(f"n{i}" for i in range(9)) + " material")
    return node_file, element_file
