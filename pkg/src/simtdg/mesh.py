"""Tetrahedral meshes: box generation, TetGen import, connectivity, geometry.

Meshes are face-conforming collections of tets with positive orientation;
elements read in with negative signed volume are repaired by swapping two
vertices.  Connectivity matches interior faces through their sorted global
vertex triple and records how the two local vertex orders line up, which
later drives the node pairing at glued faces.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .refelem import FACE_AREAS, FACE_UNIT_NORMALS, FACE_VERTEX_IDS, NUM_FACES

#: All six orderings of three face corners, indexed by permutation id.
VERTEX_PERMUTATIONS = tuple(itertools.permutations(range(3)))

DEFAULT_BOUNDARY_TAG = "pec"


class MeshFormatError(ValueError):
    """Malformed mesh file content."""


class NonConformingMeshError(ValueError):
    """A face is shared by more than two elements."""


@dataclass
class Mesh:
    vertices: np.ndarray           # (V, 3) float64
    elements: np.ndarray           # (K, 4) int64
    boundary_tags: dict = field(default_factory=dict)  # sorted vertex triple -> tag

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.elements = np.asarray(self.elements, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must have shape (V, 3)")
        if self.elements.ndim != 2 or self.elements.shape[1] != 4:
            raise ValueError("elements must have shape (K, 4)")
        if self.elements.size and (
            self.elements.min() < 0 or self.elements.max() >= len(self.vertices)
        ):
            raise ValueError("element vertex index out of range")
        self._fix_orientation()

    def _fix_orientation(self):
        v = self.vertices
        e = self.elements
        d1 = v[e[:, 1]] - v[e[:, 0]]
        d2 = v[e[:, 2]] - v[e[:, 0]]
        d3 = v[e[:, 3]] - v[e[:, 0]]
        signed = np.einsum("ki,ki->k", np.cross(d1, d2), d3)
        flip = signed < 0.0
        if flip.any():
            e[flip, 2], e[flip, 3] = e[flip, 3].copy(), e[flip, 2].copy()

    @property
    def num_elements(self) -> int:
        return len(self.elements)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    def element_volumes(self) -> np.ndarray:
        v = self.vertices
        e = self.elements
        d1 = v[e[:, 1]] - v[e[:, 0]]
        d2 = v[e[:, 2]] - v[e[:, 0]]
        d3 = v[e[:, 3]] - v[e[:, 0]]
        return np.einsum("ki,ki->k", np.cross(d1, d2), d3) / 6.0

    def face_vertex_triple(self, k: int, f: int) -> tuple:
        ids = self.elements[k]
        return tuple(int(ids[c]) for c in FACE_VERTEX_IDS[f])


def generate_box_mesh(extent, cells) -> Mesh:
    """Box [0,ex] x [0,ey] x [0,ez] cut into cells, each split into 6 tets.

    Every cell is split the same way (all tets share the cell's main
    diagonal), so faces of neighboring cells match up.
    """
    extent = tuple(float(x) for x in extent)
    cells = tuple(int(c) for c in cells)
    if any(x <= 0.0 for x in extent):
        raise ValueError(f"extents must be positive, got {extent}")
    if any(c < 1 for c in cells):
        raise ValueError(f"cell counts must be >= 1, got {cells}")

    nx, ny, nz = cells
    xs = [np.linspace(0.0, extent[d], cells[d] + 1) for d in range(3)]

    def vid(ix, iy, iz):
        return (ix * (ny + 1) + iy) * (nz + 1) + iz

    verts = np.empty(((nx + 1) * (ny + 1) * (nz + 1), 3))
    for ix in range(nx + 1):
        for iy in range(ny + 1):
            for iz in range(nz + 1):
                verts[vid(ix, iy, iz)] = (xs[0][ix], xs[1][iy], xs[2][iz])

    axes = (np.array([1, 0, 0]), np.array([0, 1, 0]), np.array([0, 0, 1]))
    elements = []
    for ix in range(nx):
        for iy in range(ny):
            for iz in range(nz):
                base = np.array([ix, iy, iz])
                for perm in sorted(itertools.permutations(range(3))):
                    corner = base.copy()
                    tet = [vid(*corner)]
                    for axis in perm:
                        corner = corner + axes[axis]
                        tet.append(vid(*corner))
                    elements.append(tet)

    mesh = Mesh(verts, np.array(elements, dtype=np.int64))

    counts = {}
    for k in range(mesh.num_elements):
        for f in range(NUM_FACES):
            key = tuple(sorted(mesh.face_vertex_triple(k, f)))
            counts[key] = counts.get(key, 0) + 1
    mesh.boundary_tags = {key: DEFAULT_BOUNDARY_TAG for key, c in counts.items() if c == 1}
    return mesh


# ---------------------------------------------------------------------------
# TetGen ASCII import


def _tokenize(text) -> list[list[str]]:
    if isinstance(text, bytes):
        text = text.decode("ascii")
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line.split())
    return lines


def read_tetgen(node_text, ele_text) -> Mesh:
    """Build a mesh from TetGen ``.node`` / ``.ele`` file contents.

    0- or 1-based indexing is detected from the first point's index; the
    element file must use the same base.
    """
    node_lines = _tokenize(node_text)
    if not node_lines:
        raise MeshFormatError("empty .node content")
    header = node_lines[0]
    if len(header) < 2:
        raise MeshFormatError(".node header needs at least point count and dimension")
    try:
        n_points = int(header[0])
        dim = int(header[1])
    except ValueError as exc:
        raise MeshFormatError(f"bad .node header: {header}") from exc
    if dim != 3:
        raise MeshFormatError(f".node dimension must be 3, got {dim}")
    if len(node_lines) - 1 < n_points:
        raise MeshFormatError(f".node lists {len(node_lines) - 1} points, header says {n_points}")

    try:
        base = int(node_lines[1][0])
    except (IndexError, ValueError) as exc:
        raise MeshFormatError("bad first point record") from exc
    if base not in (0, 1):
        raise MeshFormatError(f"point indices must start at 0 or 1, got {base}")

    verts = np.full((n_points, 3), np.nan)
    for row in node_lines[1:1 + n_points]:
        if len(row) < 4:
            raise MeshFormatError(f"point record too short: {row}")
        try:
            idx = int(row[0]) - base
            xyz = [float(v) for v in row[1:4]]
        except ValueError as exc:
            raise MeshFormatError(f"bad point record: {row}") from exc
        if not 0 <= idx < n_points:
            raise MeshFormatError(f"point index {idx + base} out of range")
        verts[idx] = xyz
    if np.isnan(verts).any():
        raise MeshFormatError("duplicate or missing point indices")

    ele_lines = _tokenize(ele_text)
    if not ele_lines:
        raise MeshFormatError("empty .ele content")
    header = ele_lines[0]
    if len(header) < 2:
        raise MeshFormatError(".ele header needs element count and nodes per element")
    try:
        n_elems = int(header[0])
        nodes_per = int(header[1])
    except ValueError as exc:
        raise MeshFormatError(f"bad .ele header: {header}") from exc
    if nodes_per != 4:
        raise MeshFormatError(f"only 4-node tetrahedra supported, got {nodes_per}")
    if len(ele_lines) - 1 < n_elems:
        raise MeshFormatError(f".ele lists {len(ele_lines) - 1} elements, header says {n_elems}")

    elems = np.zeros((n_elems, 4), dtype=np.int64)
    seen = np.zeros(n_elems, dtype=bool)
    for row in ele_lines[1:1 + n_elems]:
        if len(row) < 5:
            raise MeshFormatError(f"element record too short: {row}")
        try:
            idx = int(row[0]) - base
            vids = [int(v) - base for v in row[1:5]]
        except ValueError as exc:
            raise MeshFormatError(f"bad element record: {row}") from exc
        if not 0 <= idx < n_elems:
            raise MeshFormatError(f"element index {idx + base} out of range")
        if any(not 0 <= v < n_points for v in vids):
            raise MeshFormatError(f"vertex index out of range in element {idx + base}")
        elems[idx] = vids
        seen[idx] = True
    if not seen.all():
        raise MeshFormatError("duplicate or missing element indices")

    return Mesh(verts, elems)


# ---------------------------------------------------------------------------
# Face connectivity


@dataclass
class FaceConnectivity:
    """Matched interior face pairs plus tagged boundary faces.

    ``perm_id`` indexes VERTEX_PERMUTATIONS: the plus face's corner at
    position ``perm[j]`` is the same global vertex as the minus face's
    corner ``j``.
    """

    elem_minus: np.ndarray
    face_minus: np.ndarray
    elem_plus: np.ndarray
    face_plus: np.ndarray
    perm_id: np.ndarray
    bnd_elem: np.ndarray
    bnd_face: np.ndarray
    bnd_tag_id: np.ndarray
    tags: tuple

    @property
    def num_interior(self) -> int:
        return len(self.elem_minus)

    @property
    def num_boundary(self) -> int:
        return len(self.bnd_elem)


def build_connectivity(mesh: Mesh, default_tag: str = DEFAULT_BOUNDARY_TAG) -> FaceConnectivity:
    by_key: dict = {}
    for k in range(mesh.num_elements):
        for f in range(NUM_FACES):
            triple = mesh.face_vertex_triple(k, f)
            key = tuple(sorted(triple))
            by_key.setdefault(key, []).append((k, f, triple))

    interior = []
    boundary = []
    tags = []
    tag_ids = {}
    for key, entries in by_key.items():
        if len(entries) > 2:
            owners = [(k, f) for k, f, _ in entries]
            raise NonConformingMeshError(f"face {key} shared by elements {owners}")
        if len(entries) == 2:
            (km, fm, tm), (kp, fp, tp) = sorted(entries[:2])
            perm = tuple(tp.index(v) for v in tm)
            interior.append((km, fm, kp, fp, VERTEX_PERMUTATIONS.index(perm)))
        else:
            k, f, _ = entries[0]
            tag = mesh.boundary_tags.get(key, default_tag)
            if tag not in tag_ids:
                tag_ids[tag] = len(tags)
                tags.append(tag)
            boundary.append((k, f, tag_ids[tag]))

    interior.sort()
    boundary.sort()
    arr = np.array(interior, dtype=np.int64).reshape(-1, 5)
    brr = np.array(boundary, dtype=np.int64).reshape(-1, 3)
    return FaceConnectivity(
        elem_minus=arr[:, 0], face_minus=arr[:, 1],
        elem_plus=arr[:, 2], face_plus=arr[:, 3], perm_id=arr[:, 4],
        bnd_elem=brr[:, 0], bnd_face=brr[:, 1], bnd_tag_id=brr[:, 2],
        tags=tuple(tags),
    )


# ---------------------------------------------------------------------------
# Affine geometry


@dataclass
class GeometricFactors:
    jacobians: np.ndarray       # (K, 3, 3) forward map d(x)/d(r), columns per r-direction
    det_jacobians: np.ndarray   # (K,)
    inv_jacobians: np.ndarray   # (K, 3, 3) rows are dr_mu/dx
    normals: np.ndarray         # (K, 4, 3) outward unit normals
    face_jacobians: np.ndarray  # (K, 4) global face area / reference face area


def compute_geometry(mesh: Mesh, elem=None) -> GeometricFactors:
    """Per-element affine map data; ``elem`` is accepted for API symmetry."""
    v = mesh.vertices
    e = mesh.elements
    k_total = mesh.num_elements

    dxdr = np.empty((k_total, 3, 3))
    for mu in range(3):
        dxdr[:, :, mu] = (v[e[:, mu + 1]] - v[e[:, 0]]) / 2.0

    det = np.linalg.det(dxdr)
    scale = np.abs(dxdr).max(axis=(1, 2)) ** 3 + 1e-300
    if (det <= 1e-12 * scale).any():
        bad = int(np.argmin(det / scale))
        raise ValueError(f"element {bad} is degenerate (volume ~ 0)")
    drdx = np.linalg.inv(dxdr)

    normals = np.einsum("fm,kmn->kfn", FACE_UNIT_NORMALS, drdx)
    normals /= np.linalg.norm(normals, axis=2, keepdims=True)

    face_jac = np.empty((k_total, NUM_FACES))
    for f, corners in enumerate(FACE_VERTEX_IDS):
        a = v[e[:, corners[0]]]
        b = v[e[:, corners[1]]]
        c = v[e[:, corners[2]]]
        area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        face_jac[:, f] = area / FACE_AREAS[f]

    return GeometricFactors(
        jacobians=dxdr,
        det_jacobians=det,
        inv_jacobians=drdx,
        normals=normals,
        face_jacobians=face_jac,
    )


def map_nodes(mesh: Mesh, elem) -> np.ndarray:
    """Physical coordinates of every interpolation node, (K, Np, 3)."""
    v = mesh.vertices
    e = mesh.elements
    lam = np.empty((elem.num_nodes, 4))
    r, s, t = elem.nodes.T
    lam[:, 0] = -(1.0 + r + s + t) / 2.0
    lam[:, 1] = (1.0 + r) / 2.0
    lam[:, 2] = (1.0 + s) / 2.0
    lam[:, 3] = (1.0 + t) / 2.0
    return np.einsum("pc,kcd->kpd", lam, v[e])


def element_inradii(mesh: Mesh, geometry: GeometricFactors) -> np.ndarray:
    """Radius of each element's inscribed sphere, 3V / (surface area)."""
    volumes = geometry.det_jacobians * (4.0 / 3.0)
    areas = (geometry.face_jacobians * FACE_AREAS).sum(axis=1)
    return 3.0 * volumes / areas
