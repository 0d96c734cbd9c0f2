"""Reference implementations of the Maxwell DG operator.

Two independent formulations of the same semidiscrete operator:

* ``ReferenceMaxwellOperator`` -- a vectorized element-major evaluation
  (index maps for face states, dense local matrix products).  Fast enough
  to drive full simulations.
* ``dense_global_operator`` -- the operator assembled explicitly as one
  (6 K Np)^2 matrix from local blocks.  Small meshes only; this is the
  ground truth the kernel pipeline is checked against.

Both use the true-measure face mass matrices and the face-area ratios
from the geometry, with no shared code path into the device kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..maxwell import Material, VACUUM, pec_boundary, upwind_flux
from ..mesh import (
    VERTEX_PERMUTATIONS,
    FaceConnectivity,
    Mesh,
    build_connectivity,
    compute_geometry,
    map_nodes,
)
from ..refelem import FACE_AREAS, NUM_FACES, ReferenceElement, face_node_permutation

N_FIELDS = 6


@dataclass
class ReferenceMaxwellOperator:
    mesh: Mesh
    elem: ReferenceElement
    material: Material
    connectivity: FaceConnectivity
    geometry: object
    nodes: np.ndarray          # (K, Np, 3)
    vmap_minus: np.ndarray     # (K, 4, Nfp) flat indices into (K * Np)
    vmap_plus: np.ndarray      # (K, 4, Nfp)
    is_boundary: np.ndarray    # (K, 4) bool
    normals: np.ndarray        # (K, 4, 3)
    face_areas_global: np.ndarray  # (K, 4)

    def face_states(self, state: np.ndarray):
        """(u_minus, u_plus, normals) per face node; boundary side mirrored."""
        u = np.asarray(state).reshape(N_FIELDS, -1)
        u_minus = u[:, self.vmap_minus]
        u_plus = u[:, self.vmap_plus]
        nrm = np.moveaxis(self.normals, -1, 0)[:, :, :, None]  # (3, K, 4, 1)
        mirrored = pec_boundary(u_minus, np.broadcast_to(nrm, (3,) + u_minus.shape[1:]))
        u_plus = np.where(self.is_boundary[None, :, :, None], mirrored, u_plus)
        return u_minus, u_plus, nrm

    def rhs(self, state: np.ndarray) -> np.ndarray:
        """Semidiscrete right-hand side, natural layout (6, K, Np)."""
        elem, geo = self.elem, self.geometry
        k_total = self.mesh.num_elements
        n_p, n_fp = elem.num_nodes, elem.num_face_nodes
        u = np.asarray(state).reshape(N_FIELDS, k_total, n_p)

        # volume term: global curls from reference derivatives
        local = np.einsum("mij,fkj->mfki", elem.diff, u)
        grad = np.einsum("kmn,mfki->nfki", geo.inv_jacobians, local)
        curl_e = np.stack([
            grad[1, 2] - grad[2, 1],
            grad[2, 0] - grad[0, 2],
            grad[0, 1] - grad[1, 0],
        ])
        curl_h = np.stack([
            grad[1, 5] - grad[2, 4],
            grad[2, 3] - grad[0, 5],
            grad[0, 4] - grad[1, 3],
        ])

        # surface term: lifted upwind flux of the facial jumps
        u_minus, u_plus, nrm = self.face_states(u)
        bracket = upwind_flux(u_minus, u_plus, nrm, self.material)
        area_ratio = self.face_areas_global / FACE_AREAS[None, :]
        scaled = bracket * area_ratio[None, :, :, None]
        lifted = np.einsum(
            "ij,fkj->fki", elem.lift, scaled.reshape(N_FIELDS, k_total, NUM_FACES * n_fp)
        )
        lifted /= geo.det_jacobians[None, :, None]

        out = np.empty_like(u)
        out[0:3] = (curl_h + lifted[0:3]) / self.material.permittivity
        out[3:6] = (-curl_e + lifted[3:6]) / self.material.permeability
        return out


def build_reference_operator(
    mesh: Mesh,
    elem: ReferenceElement,
    material: Material = VACUUM,
    connectivity: FaceConnectivity | None = None,
) -> ReferenceMaxwellOperator:
    if connectivity is None:
        connectivity = build_connectivity(mesh)
    geo = compute_geometry(mesh, elem)
    nodes = map_nodes(mesh, elem)
    k_total = mesh.num_elements
    n_p, n_fp = elem.num_nodes, elem.num_face_nodes

    vmap_minus = np.empty((k_total, NUM_FACES, n_fp), dtype=np.int64)
    for f in range(NUM_FACES):
        vmap_minus[:, f, :] = np.arange(k_total)[:, None] * n_p + elem.face_nodes[f][None, :]
    vmap_plus = vmap_minus.copy()
    is_boundary = np.zeros((k_total, NUM_FACES), dtype=bool)

    for i in range(connectivity.num_interior):
        km, fm = int(connectivity.elem_minus[i]), int(connectivity.face_minus[i])
        kp, fp = int(connectivity.elem_plus[i]), int(connectivity.face_plus[i])
        perm = VERTEX_PERMUTATIONS[int(connectivity.perm_id[i])]
        sigma = face_node_permutation(elem, fm, fp, perm)
        vmap_plus[km, fm] = kp * n_p + elem.face_nodes[fp][sigma]
        sigma_inv = np.argsort(sigma)
        vmap_plus[kp, fp] = km * n_p + elem.face_nodes[fm][sigma_inv]

    for i in range(connectivity.num_boundary):
        k, f = int(connectivity.bnd_elem[i]), int(connectivity.bnd_face[i])
        is_boundary[k, f] = True

    return ReferenceMaxwellOperator(
        mesh=mesh,
        elem=elem,
        material=material,
        connectivity=connectivity,
        geometry=geo,
        nodes=nodes,
        vmap_minus=vmap_minus,
        vmap_plus=vmap_plus,
        is_boundary=is_boundary,
        normals=geo.normals,
        face_areas_global=geo.face_jacobians * FACE_AREAS,
    )


# ---------------------------------------------------------------------------
# Stage-level oracles (used to gate tuned kernels and unit-test stages)


def diff_stage(op: ReferenceMaxwellOperator, u_natural: np.ndarray) -> np.ndarray:
    """Global x/y/z derivatives of one scalar field, (3, K, Np)."""
    local = np.einsum("mij,kj->mki", op.elem.diff, u_natural)
    return np.einsum("kmn,mki->nki", op.geometry.inv_jacobians, local)


def lift_stage(op: ReferenceMaxwellOperator, flux_natural: np.ndarray) -> np.ndarray:
    """Jacobian-scaled lift of stacked face values, (K, Np).

    ``flux_natural`` holds, per element, the four faces' values already
    multiplied by (physical face area / 2), the same normalization the
    gather stage produces.
    """
    elem = op.elem
    n_fp = elem.num_face_nodes
    scale = np.repeat(2.0 / FACE_AREAS, n_fp)
    lifted = np.einsum("ij,kj->ki", elem.lift, flux_natural * scale[None, :])
    return lifted / op.geometry.det_jacobians[:, None]


def gather_stage(op: ReferenceMaxwellOperator, state: np.ndarray) -> np.ndarray:
    """Loop-based flux extraction, (6, K, 4*Nfp): area/2-scaled upwind bracket.

    Deliberately scalar per face node; this is the brute-force oracle.
    """
    elem = op.elem
    k_total = op.mesh.num_elements
    n_fp = elem.num_face_nodes
    u = np.asarray(state).reshape(N_FIELDS, k_total * elem.num_nodes)
    out = np.zeros((N_FIELDS, k_total, NUM_FACES * n_fp))
    for k in range(k_total):
        for f in range(NUM_FACES):
            n = op.normals[k, f]
            area = op.face_areas_global[k, f]
            for i in range(n_fp):
                um = u[:, op.vmap_minus[k, f, i]]
                if op.is_boundary[k, f]:
                    up = pec_boundary(um, n)
                else:
                    up = u[:, op.vmap_plus[k, f, i]]
                out[:, k, f * n_fp + i] = (area / 2.0) * upwind_flux(um, up, n, op.material)
    return out


# ---------------------------------------------------------------------------
# Dense global matrix


def _cross_matrix(n: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -n[2], n[1]],
        [n[2], 0.0, -n[0]],
        [-n[1], n[0], 0.0],
    ])


def upwind_jump_matrix(normal: np.ndarray, material: Material) -> np.ndarray:
    """6x6 matrix B with flux_bracket = B @ (u_plus - u_minus)."""
    ncross = _cross_matrix(np.asarray(normal))
    z = material.impedance
    y = material.admittance
    b = np.zeros((6, 6))
    b[0:3, 0:3] = -(ncross @ ncross) / (2.0 * z)
    b[0:3, 3:6] = ncross / 2.0
    b[3:6, 0:3] = -ncross / 2.0
    b[3:6, 3:6] = -(ncross @ ncross) / (2.0 * y)
    return b


def pec_mirror_matrix(normal: np.ndarray) -> np.ndarray:
    n = np.asarray(normal)
    outer = np.outer(n, n)
    m = np.zeros((6, 6))
    m[0:3, 0:3] = -np.eye(3) + 2.0 * outer
    m[3:6, 3:6] = np.eye(3) - 2.0 * outer
    return m


def dense_global_operator(
    mesh: Mesh,
    elem: ReferenceElement,
    material: Material = VACUUM,
    connectivity: FaceConnectivity | None = None,
) -> np.ndarray:
    """The full semidiscrete operator as a dense matrix.

    Row/column index is (field * K + element) * Np + node.  Assembled
    directly from reference matrices and face coupling blocks; quadratic
    memory, suitable for small meshes only.
    """
    if connectivity is None:
        connectivity = build_connectivity(mesh)
    geo = compute_geometry(mesh, elem)
    k_total = mesh.num_elements
    n_p, n_fp = elem.num_nodes, elem.num_face_nodes
    size = N_FIELDS * k_total * n_p
    a = np.zeros((size, size))

    eps, mu = material.permittivity, material.permeability
    inv_weight = np.array([eps] * 3 + [mu] * 3)

    def rows(field, k):
        start = (field * k_total + k) * n_p
        return slice(start, start + n_p)

    # volume curls: E rows get +curl H / eps, H rows get -curl E / mu
    for k in range(k_total):
        d_global = np.einsum("mn,mij->nij", geo.inv_jacobians[k], elem.diff)
        curl_terms = (
            (0, 5, 1, 1.0), (0, 4, 2, -1.0),
            (1, 3, 2, 1.0), (1, 5, 0, -1.0),
            (2, 4, 0, 1.0), (2, 3, 1, -1.0),
            (3, 2, 1, -1.0), (3, 1, 2, 1.0),
            (4, 0, 2, -1.0), (4, 2, 0, 1.0),
            (5, 1, 0, -1.0), (5, 0, 1, 1.0),
        )
        for (out_f, in_f, axis, sign) in curl_terms:
            a[rows(out_f, k), rows(in_f, k)] += (sign / inv_weight[out_f]) * d_global[axis]

    def add_face_coupling(k, f, other_k, col_nodes, state_matrix):
        lift_block = elem.lift[:, f * n_fp:(f + 1) * n_fp]
        alpha = geo.face_jacobians[k, f] / geo.det_jacobians[k]
        row0 = np.arange(n_p)
        for c_out in range(N_FIELDS):
            row_idx = (c_out * k_total + k) * n_p + row0
            for c_in in range(N_FIELDS):
                coef = state_matrix[c_out, c_in] * alpha / inv_weight[c_out]
                if coef == 0.0:
                    continue
                col_idx = (c_in * k_total + other_k) * n_p + col_nodes
                a[np.ix_(row_idx, col_idx)] += coef * lift_block

    for i in range(connectivity.num_interior):
        km, fm = int(connectivity.elem_minus[i]), int(connectivity.face_minus[i])
        kp, fp = int(connectivity.elem_plus[i]), int(connectivity.face_plus[i])
        perm = VERTEX_PERMUTATIONS[int(connectivity.perm_id[i])]
        sigma = face_node_permutation(elem, fm, fp, perm)
        sigma_inv = np.argsort(sigma)
        sides = (
            (km, fm, kp, elem.face_nodes[fm], elem.face_nodes[fp][sigma]),
            (kp, fp, km, elem.face_nodes[fp], elem.face_nodes[fm][sigma_inv]),
        )
        for (k, f, other, own_nodes, opp_nodes) in sides:
            b = upwind_jump_matrix(geo.normals[k, f], material)
            add_face_coupling(k, f, k, own_nodes, -b)
            add_face_coupling(k, f, other, opp_nodes, b)

    for i in range(connectivity.num_boundary):
        k, f = int(connectivity.bnd_elem[i]), int(connectivity.bnd_face[i])
        nrm = geo.normals[k, f]
        b = upwind_jump_matrix(nrm, material)
        coupling = b @ (pec_mirror_matrix(nrm) - np.eye(6))
        add_face_coupling(k, f, k, elem.face_nodes[f], coupling)

    return a


def apply_dense(a: np.ndarray, state: np.ndarray) -> np.ndarray:
    arr = np.asarray(state)
    return (a @ arr.reshape(-1)).reshape(arr.shape)
