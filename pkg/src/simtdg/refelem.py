"""Reference tetrahedron: interpolation nodes and local operator matrices.

Everything is built on the bi-unit tetrahedron

    I = { (r, s, t) : r, s, t >= -1,  r + s + t <= -1 }

with vertices (-1,-1,-1), (1,-1,-1), (-1,1,-1), (-1,-1,1).  Matrices are
assembled through a Vandermonde matrix V of an orthonormal modal basis
(Jacobi-polynomial products on collapsed coordinates), so the nodal mass
matrix is M = (V V^T)^{-1} without any quadrature error.  Face mass
matrices use the true surface measure of each face; the slanted face
therefore carries its sqrt(3) area factor itself rather than hiding it in
a geometric scaling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import eval_jacobi

REFERENCE_VERTICES = np.array(
    [
        [-1.0, -1.0, -1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ]
)

#: Local vertex ids spanning each of the four faces.
FACE_VERTEX_IDS = ((0, 1, 2), (0, 1, 3), (1, 2, 3), (0, 2, 3))

_SQRT3 = math.sqrt(3.0)

#: Outward unit normals of the reference faces.
FACE_UNIT_NORMALS = np.array(
    [
        [0.0, 0.0, -1.0],
        [0.0, -1.0, 0.0],
        [1.0 / _SQRT3, 1.0 / _SQRT3, 1.0 / _SQRT3],
        [-1.0, 0.0, 0.0],
    ]
)

#: True areas of the reference faces (the slanted face is larger).
FACE_AREAS = np.array([2.0, 2.0, 2.0 * _SQRT3, 2.0])

NUM_FACES = 4

_FACE_NODE_TOL = 1e-8
_MAX_ORDER = 9

# Empirically optimized blending exponents for the node warp, indexed by order.
_WARP_ALPHA = {
    1: 0.0, 2: 0.0, 3: 0.0, 4: 0.1002, 5: 1.1332, 6: 1.5608, 7: 1.3413,
    8: 1.2577, 9: 1.1603, 10: 1.10153, 11: 0.6080, 12: 0.4523, 13: 0.8856,
    14: 0.8717, 15: 0.9655,
}


def simplex_node_count(order: int) -> tuple[int, int]:
    """Node counts (volume, per face) of the degree-``order`` tet element."""
    if order < 1:
        raise ValueError(f"polynomial order must be >= 1, got {order}")
    n = int(order)
    return (n + 1) * (n + 2) * (n + 3) // 6, (n + 1) * (n + 2) // 2


# ---------------------------------------------------------------------------
# Orthonormal Jacobi polynomials


def _jacobi_norm(n: int, alpha: float, beta: float) -> float:
    # L2 norm of the classical Jacobi polynomial on [-1, 1] with its weight.
    ln = (
        (alpha + beta + 1.0) * math.log(2.0)
        + math.lgamma(n + alpha + 1.0)
        + math.lgamma(n + beta + 1.0)
        - math.log(2.0 * n + alpha + beta + 1.0)
        - math.lgamma(n + alpha + beta + 1.0)
        - math.lgamma(n + 1.0)
    )
    return math.exp(0.5 * ln)


def _jacobi(x, alpha: float, beta: float, n: int):
    return eval_jacobi(n, alpha, beta, x) / _jacobi_norm(n, alpha, beta)


def _jacobi_deriv(x, alpha: float, beta: float, n: int):
    if n == 0:
        return np.zeros_like(np.asarray(x, dtype=float))
    return math.sqrt(n * (n + alpha + beta + 1.0)) * _jacobi(x, alpha + 1.0, beta + 1.0, n - 1)


# ---------------------------------------------------------------------------
# Modal basis on collapsed coordinates


def _collapse_tet(nodes: np.ndarray):
    r, s, t = nodes[:, 0], nodes[:, 1], nodes[:, 2]
    st = s + t
    a = np.where(np.abs(st) > 1e-14, -2.0 * (1.0 + r) / np.where(np.abs(st) > 1e-14, st, 1.0) - 1.0, -1.0)
    omt = 1.0 - t
    b = np.where(np.abs(omt) > 1e-14, 2.0 * (1.0 + s) / np.where(np.abs(omt) > 1e-14, omt, 1.0) - 1.0, -1.0)
    return a, b, t


def _tet_mode_indices(order: int):
    return [
        (i, j, k)
        for i in range(order + 1)
        for j in range(order - i + 1)
        for k in range(order - i - j + 1)
    ]


def _tet_mode(a, b, c, i: int, j: int, k: int):
    return (
        2.0
        * math.sqrt(2.0)
        * _jacobi(a, 0, 0, i)
        * _jacobi(b, 2 * i + 1, 0, j)
        * (1.0 - b) ** i
        * _jacobi(c, 2 * (i + j) + 2, 0, k)
        * (1.0 - c) ** (i + j)
    )


def _tet_mode_grad(a, b, c, i: int, j: int, k: int):
    fa, dfa = _jacobi(a, 0, 0, i), _jacobi_deriv(a, 0, 0, i)
    gb, dgb = _jacobi(b, 2 * i + 1, 0, j), _jacobi_deriv(b, 2 * i + 1, 0, j)
    hc, dhc = _jacobi(c, 2 * (i + j) + 2, 0, k), _jacobi_deriv(c, 2 * (i + j) + 2, 0, k)

    dr = dfa * gb * hc
    if i > 0:
        dr = dr * (0.5 * (1.0 - b)) ** (i - 1)
    if i + j > 0:
        dr = dr * (0.5 * (1.0 - c)) ** (i + j - 1)

    ds = 0.5 * (1.0 + a) * dr
    tmp = dgb * (0.5 * (1.0 - b)) ** i
    if i > 0:
        tmp = tmp + (-0.5 * i) * gb * (0.5 * (1.0 - b)) ** (i - 1)
    if i + j > 0:
        tmp = tmp * (0.5 * (1.0 - c)) ** (i + j - 1)
    tmp = fa * tmp * hc
    ds = ds + tmp

    dt = 0.5 * (1.0 + a) * dr + 0.5 * (1.0 + b) * tmp
    tmp2 = dhc * (0.5 * (1.0 - c)) ** (i + j)
    if i + j > 0:
        tmp2 = tmp2 - 0.5 * (i + j) * hc * (0.5 * (1.0 - c)) ** (i + j - 1)
    tmp2 = fa * gb * tmp2 * (0.5 * (1.0 - b)) ** i
    dt = dt + tmp2

    scale = 2.0 ** (2 * i + j + 1.5)
    return dr * scale, ds * scale, dt * scale


def vandermonde(order: int, nodes: np.ndarray) -> np.ndarray:
    """Modal Vandermonde matrix V[p, m] = phi_m(node_p)."""
    a, b, c = _collapse_tet(nodes)
    cols = [_tet_mode(a, b, c, i, j, k) for (i, j, k) in _tet_mode_indices(order)]
    return np.column_stack(cols)


def grad_vandermonde(order: int, nodes: np.ndarray) -> np.ndarray:
    """Derivative Vandermonde matrices, shape (3, n_nodes, n_modes)."""
    a, b, c = _collapse_tet(nodes)
    n = len(nodes)
    modes = _tet_mode_indices(order)
    out = np.zeros((3, n, len(modes)))
    for m, (i, j, k) in enumerate(modes):
        dr, ds, dt = _tet_mode_grad(a, b, c, i, j, k)
        out[0, :, m] = dr
        out[1, :, m] = ds
        out[2, :, m] = dt
    return out


def _collapse_tri(rs: np.ndarray):
    r, s = rs[:, 0], rs[:, 1]
    oms = 1.0 - s
    a = np.where(np.abs(oms) > 1e-14, 2.0 * (1.0 + r) / np.where(np.abs(oms) > 1e-14, oms, 1.0) - 1.0, -1.0)
    return a, s


def triangle_vandermonde(order: int, rs: np.ndarray) -> np.ndarray:
    """Vandermonde of the orthonormal modal basis on the bi-unit triangle."""
    a, b = _collapse_tri(rs)
    cols = []
    for i in range(order + 1):
        for j in range(order - i + 1):
            cols.append(
                math.sqrt(2.0)
                * _jacobi(a, 0, 0, i)
                * _jacobi(b, 2 * i + 1, 0, j)
                * (1.0 - b) ** i
            )
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# Interpolation nodes


def _gauss_lobatto(p: int) -> np.ndarray:
    if p == 1:
        return np.array([-1.0, 1.0])
    from scipy.special import roots_jacobi

    interior, _ = roots_jacobi(p - 1, 1.0, 1.0)
    return np.concatenate(([-1.0], interior, [1.0]))


def _edge_warp(p: int, xout: np.ndarray) -> np.ndarray:
    # 1D warp: distance between equispaced and Gauss-Lobatto distributions,
    # interpolated to the evaluation points with deflated end roots.
    gl = -_gauss_lobatto(p)
    xeq = np.array([1.0 - 2.0 * i / p for i in range(p + 1)])
    warp = np.zeros_like(xout)
    for i in range(p + 1):
        d = np.full_like(xout, gl[i] - xeq[i])
        for j in range(1, p):
            if j != i:
                d = d * (xout - xeq[j]) / (xeq[i] - xeq[j])
        if i != 0:
            d = -d / (xeq[i] - xeq[0])
        if i != p:
            d = d / (xeq[i] - xeq[p])
        warp = warp + d
    return warp


def _face_shift(p: int, alpha: float, lb, lc, ld):
    # Tangential warp of one face, expressed in the equilateral triangle's
    # two in-plane directions.
    blend1 = lc * ld
    blend2 = lb * ld
    blend3 = lb * lc

    wf1 = 4.0 * _edge_warp(p, ld - lc)
    wf2 = 4.0 * _edge_warp(p, lb - ld)
    wf3 = 4.0 * _edge_warp(p, lc - lb)

    warp1 = blend1 * wf1 * (1.0 + (alpha * lb) ** 2)
    warp2 = blend2 * wf2 * (1.0 + (alpha * lc) ** 2)
    warp3 = blend3 * wf3 * (1.0 + (alpha * ld) ** 2)

    wx = warp1 + math.cos(2.0 * math.pi / 3.0) * warp2 + math.cos(4.0 * math.pi / 3.0) * warp3
    wy = math.sin(2.0 * math.pi / 3.0) * warp2 + math.sin(4.0 * math.pi / 3.0) * warp3
    return wx, wy


def _equidistant_nodes(order: int) -> np.ndarray:
    pts = []
    n = order
    for nn in range(n + 1):
        for mm in range(n + 1 - nn):
            for qq in range(n + 1 - nn - mm):
                pts.append((-1.0 + 2.0 * qq / n, -1.0 + 2.0 * mm / n, -1.0 + 2.0 * nn / n))
    return np.array(pts)


def warp_blend_nodes(order: int) -> np.ndarray:
    """Optimized interpolation nodes on the reference tetrahedron.

    Equidistant nodes are shifted tangentially on each face by a blend of
    1D Gauss-Lobatto warps; for orders <= 2 the shift vanishes and the
    nodes are plain vertices / edge midpoints.
    """
    n = order
    alpha = _WARP_ALPHA.get(n, 1.0)
    rst = _equidistant_nodes(n)
    r, s, t = rst[:, 0], rst[:, 1], rst[:, 2]

    l1 = (1.0 + t) / 2.0
    l2 = (1.0 + s) / 2.0
    l3 = -(1.0 + r + s + t) / 2.0
    l4 = (1.0 + r) / 2.0

    v1 = np.array([-1.0, -1.0 / math.sqrt(3.0), -1.0 / math.sqrt(6.0)])
    v2 = np.array([1.0, -1.0 / math.sqrt(3.0), -1.0 / math.sqrt(6.0)])
    v3 = np.array([0.0, 2.0 / math.sqrt(3.0), -1.0 / math.sqrt(6.0)])
    v4 = np.array([0.0, 0.0, 3.0 / math.sqrt(6.0)])

    tan1 = [v2 - v1, v2 - v1, v3 - v2, v3 - v1]
    tan2 = [
        v3 - 0.5 * (v1 + v2),
        v4 - 0.5 * (v1 + v2),
        v4 - 0.5 * (v2 + v3),
        v4 - 0.5 * (v1 + v3),
    ]
    tan1 = [v / np.linalg.norm(v) for v in tan1]
    tan2 = [v / np.linalg.norm(v) for v in tan2]

    xyz = np.outer(l3, v1) + np.outer(l4, v2) + np.outer(l2, v3) + np.outer(l1, v4)
    shift = np.zeros_like(xyz)
    tol = 1e-10

    face_bary = [(l1, l2, l3, l4), (l2, l1, l3, l4), (l3, l1, l4, l2), (l4, l1, l3, l2)]
    for face, (la, lb, lc, ld) in enumerate(face_bary):
        w1, w2 = _face_shift(n, alpha, lb, lc, ld)

        blend = lb * lc * ld
        denom = (lb + 0.5 * la) * (lc + 0.5 * la) * (ld + 0.5 * la)
        ok = denom > tol
        blend = np.where(ok, (1.0 + (alpha * la) ** 2) * blend / np.where(ok, denom, 1.0), blend)

        shift = shift + (blend * w1)[:, None] * tan1[face] + (blend * w2)[:, None] * tan2[face]

        on_face = (la < tol) & (((lb > tol).astype(int) + (lc > tol) + (ld > tol)) < 3)
        shift[on_face] = (
            w1[on_face, None] * tan1[face] + w2[on_face, None] * tan2[face]
        )

    xyz = xyz + shift

    # Map the equilateral tetrahedron back to reference coordinates.
    a_mat = 0.5 * np.stack([v2 - v1, v3 - v1, v4 - v1], axis=1)
    rhs = (xyz - 0.5 * (v2 + v3 + v4 - v1)).T
    return np.linalg.solve(a_mat, rhs).T


# ---------------------------------------------------------------------------
# Element assembly


@dataclass
class ReferenceElement:
    """Nodes and local matrices of one polynomial order.

    All arrays are read-only; instances may be shared freely across threads.
    """

    order: int
    num_nodes: int
    num_face_nodes: int
    num_faces: int
    nodes: np.ndarray          # (Np, 3)
    vandermonde: np.ndarray    # (Np, Np)
    inv_vandermonde: np.ndarray
    mass: np.ndarray           # (Np, Np)
    stiffness: np.ndarray      # (3, Np, Np)
    diff: np.ndarray           # (3, Np, Np)
    face_mass: np.ndarray      # (4, Nfp, Nfp), true surface measure
    lift: np.ndarray           # (Np, 4*Nfp)
    face_nodes: np.ndarray     # (4, Nfp) volume-node ids, lexicographic order
    face_barycentrics: np.ndarray  # (4, Nfp, 3) w.r.t. FACE_VERTEX_IDS order


def _face_plane_residuals(nodes: np.ndarray) -> np.ndarray:
    r, s, t = nodes[:, 0], nodes[:, 1], nodes[:, 2]
    return np.stack([np.abs(t + 1.0), np.abs(s + 1.0), np.abs(r + s + t + 1.0), np.abs(r + 1.0)])


def build_reference_element(order: int) -> ReferenceElement:
    """Construct nodes and all local matrices for one order."""
    if not 1 <= order <= _MAX_ORDER:
        raise ValueError(f"order must be in 1..{_MAX_ORDER}, got {order}")

    n_p, n_fp = simplex_node_count(order)
    nodes = warp_blend_nodes(order)
    if len(nodes) != n_p:
        raise AssertionError("node construction produced a wrong count")

    v = vandermonde(order, nodes)
    cond = np.linalg.cond(v)
    if cond > 1e12:
        raise ValueError(f"Vandermonde matrix numerically singular (cond={cond:.3g})")
    v_inv = np.linalg.inv(v)
    mass = v_inv.T @ v_inv

    gv = grad_vandermonde(order, nodes)
    diff = np.stack([gv[mu] @ v_inv for mu in range(3)])
    stiffness = np.stack([mass @ diff[mu] for mu in range(3)])

    residuals = _face_plane_residuals(nodes)
    face_nodes = np.zeros((NUM_FACES, n_fp), dtype=np.int64)
    face_bary = np.zeros((NUM_FACES, n_fp, 3))
    face_mass = np.zeros((NUM_FACES, n_fp, n_fp))

    for f in range(NUM_FACES):
        idx = np.flatnonzero(residuals[f] < _FACE_NODE_TOL)
        if len(idx) != n_fp:
            raise AssertionError(f"face {f}: found {len(idx)} nodes, expected {n_fp}")
        pts = np.round(nodes[idx], 10)
        order_lex = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
        idx = idx[order_lex]
        face_nodes[f] = idx

        corners = REFERENCE_VERTICES[list(FACE_VERTEX_IDS[f])]
        edges = np.stack([corners[1] - corners[0], corners[2] - corners[0]], axis=1)
        uv, *_ = np.linalg.lstsq(edges, (nodes[idx] - corners[0]).T, rcond=None)
        u, w = uv[0], uv[1]
        face_bary[f, :, 0] = 1.0 - u - w
        face_bary[f, :, 1] = u
        face_bary[f, :, 2] = w

        # Mass matrix in the face's own parameterization: map the face to the
        # bi-unit triangle through its corners, then rescale by the measure.
        tri_rs = np.column_stack([2.0 * u - 1.0, 2.0 * w - 1.0])
        v2 = triangle_vandermonde(order, tri_rs)
        mass_std = np.linalg.inv(v2 @ v2.T)
        face_mass[f] = (FACE_AREAS[f] / 2.0) * mass_std

    elem = ReferenceElement(
        order=order,
        num_nodes=n_p,
        num_face_nodes=n_fp,
        num_faces=NUM_FACES,
        nodes=nodes,
        vandermonde=v,
        inv_vandermonde=v_inv,
        mass=mass,
        stiffness=stiffness,
        diff=diff,
        face_mass=face_mass,
        lift=np.zeros((n_p, NUM_FACES * n_fp)),
        face_nodes=face_nodes,
        face_barycentrics=face_bary,
    )
    elem.lift = build_lifting_matrix(elem)
    for arr in (elem.nodes, elem.vandermonde, elem.inv_vandermonde, elem.mass,
                elem.stiffness, elem.diff, elem.face_mass, elem.lift,
                elem.face_nodes, elem.face_barycentrics):
        arr.setflags(write=False)
    return elem


def build_lifting_matrix(elem: ReferenceElement) -> np.ndarray:
    """Lifting matrix: inverse mass applied to the embedded face masses.

    Column block f holds the face-f mass matrix placed at that face's
    volume-node rows; the product with the inverse volume mass turns facial
    values into volume contributions.
    """
    n_p, n_fp = elem.num_nodes, elem.num_face_nodes
    embed = np.zeros((n_p, NUM_FACES * n_fp))
    for f in range(NUM_FACES):
        embed[elem.face_nodes[f], f * n_fp:(f + 1) * n_fp] += elem.face_mass[f]
    return elem.vandermonde @ (elem.vandermonde.T @ embed)


def face_node_permutation(
    elem: ReferenceElement, face_minus: int, face_plus: int, vertex_perm: tuple[int, int, int]
) -> np.ndarray:
    """Node pairing between two glued faces.

    ``vertex_perm[j]`` is the corner position on the plus face matching
    corner ``j`` of the minus face.  Returns ``sigma`` with
    ``face_nodes[face_plus][sigma[i]]`` geometrically coincident with
    ``face_nodes[face_minus][i]`` once both faces are mapped onto the same
    physical triangle.
    """
    bm = np.round(elem.face_barycentrics[face_minus], 9)
    bp = np.round(elem.face_barycentrics[face_plus], 9)
    lookup = {tuple(bp[j, list(vertex_perm)]): j for j in range(elem.num_face_nodes)}
    try:
        perm = np.array([lookup[tuple(bm[i])] for i in range(elem.num_face_nodes)], dtype=np.int64)
    except KeyError as exc:
        raise ValueError("face node sets do not match under the given vertex pairing") from exc
    return perm
