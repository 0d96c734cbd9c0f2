"""Element-local device kernels: flux lifting and local differentiation.

All kernels are one-thread-per-output over the padded microblock layout.
Lifting and the field-in-shared differentiation buffer the field data in
shared memory and stream the matrix through the texture path; the
matrix-in-shared differentiation variants buffer the (odd-strided) matrix
instead.  The segmented variant loads only a half-warp-aligned row window
per block, wrapping rows cyclically, which keeps every matrix access
conflict-free at the cost of some redundant field fetches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..device import Device, KernelConfig, MemStats
from ..layout import LayoutPlan
from ..refelem import FACE_AREAS, NUM_FACES, ReferenceElement


class StrategyUnavailableError(ValueError):
    """The requested kernel strategy cannot run at this order."""


@dataclass
class ElementTables:
    """Per-mesh constant arrays the local kernels stream through textures."""

    lift_matrix: np.ndarray     # (Np * 4*Nfp,) row-major, face blocks rescaled
    diff_matrix: np.ndarray     # (Np * 3*Np,) the three matrices side by side
    coefficients: np.ndarray    # (microblocks * slots * 9,) dr_mu/dx_nu per slot
    inv_jacobians: np.ndarray   # (microblocks * slots,)
    num_nodes: int
    num_face_nodes: int


def build_element_tables(elem: ReferenceElement, geometry, layout: LayoutPlan) -> ElementTables:
    n_p, n_fp = elem.num_nodes, elem.num_face_nodes

    # Fold the per-face reference-area normalization into the lift operand:
    # gathered face values carry (physical area / 2), so each face block is
    # rescaled by 2 / (reference face area).
    lift_scaled = elem.lift.copy()
    for f in range(NUM_FACES):
        lift_scaled[:, f * n_fp:(f + 1) * n_fp] *= 2.0 / FACE_AREAS[f]

    diff_cat = np.concatenate([elem.diff[mu] for mu in range(3)], axis=1)

    slots = layout.num_microblocks * layout.microblock_size
    coeff = np.zeros((slots, 3, 3))
    inv_j = np.zeros(slots)
    for old_k in range(layout.num_elements):
        slot = layout.microblock_of[old_k] * layout.microblock_size + layout.slot_of[old_k]
        # rows nu, cols mu: global derivative nu sums dr_mu/dx_nu * d_mu
        coeff[slot] = geometry.inv_jacobians[old_k].T
        inv_j[slot] = 1.0 / geometry.det_jacobians[old_k]

    return ElementTables(
        lift_matrix=np.ascontiguousarray(lift_scaled).reshape(-1),
        diff_matrix=np.ascontiguousarray(diff_cat).reshape(-1),
        coefficients=coeff.reshape(-1),
        inv_jacobians=inv_j,
        num_nodes=n_p,
        num_face_nodes=n_fp,
    )


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


# ---------------------------------------------------------------------------
# Flux lifting (field-in-shared)


def plan_lift_launch(layout: LayoutPlan, config: KernelConfig, device: Device,
                     variant: str = "improved"):
    """Grid/block shape and shared budget for a lift launch; validates limits."""
    wp, wi = config.parallel, config.inline
    if config.sequential != 1:
        raise ValueError("lifting has no preparation work to amortize; sequential must be 1")
    n_pm = layout.node_stride
    threads = wp * n_pm
    if threads > device.spec.max_block_threads:
        raise ValueError(f"lift block of {threads} threads exceeds the device limit")
    shared = wp * wi * layout.face_stride
    if shared > device.spec.shared_words:
        raise ValueError(f"lift needs {shared} shared words, device has {device.spec.shared_words}")
    grid = (_ceil_div(layout.num_microblocks, wp * wi), 1)
    if variant == "improved":
        block = (16, wp, n_pm // 16)
    elif variant == "conventional":
        block = (n_pm, wp, 1)
    else:
        raise ValueError(f"unknown lift variant {variant!r}")
    return grid, block, shared


def flux_lift(
    device: Device,
    face_values: np.ndarray,
    tables: ElementTables,
    layout: LayoutPlan,
    config: KernelConfig,
    variant: str = "improved",
    trace=None,
) -> tuple[np.ndarray, MemStats]:
    """Apply the per-element lifting matrix to gathered face values.

    ``variant`` picks the thread numbering: "improved" groups each warp
    over aligned output columns of the parallel work units so conflicting
    half-warps share warps; "conventional" numbers threads along the
    microblock first.  Both produce identical numbers.
    """
    grid, block, shared = plan_lift_launch(layout, config, device, variant)
    wp, wi = config.parallel, config.inline
    n_p = tables.num_nodes
    n_pm, n_fm = layout.node_stride, layout.face_stride
    n_m = layout.num_microblocks
    k_m = layout.microblock_size
    n_face_vals = NUM_FACES * tables.num_face_nodes
    out = np.zeros(layout.field_length)
    fetch_batches = _ceil_div(n_fm, n_pm)

    def kernel(ctx):
        if variant == "improved":
            dof = ctx.tx + 16 * ctx.tz
        else:
            dof = ctx.tx
        lane = ctx.ty
        m_base = (ctx.bx * wp + lane) * wi

        buf = ctx.shared.alloc(wp * wi * n_fm)

        for b in range(fetch_batches):
            src = b * n_pm + dof
            in_range = src < n_fm
            for j in range(wi):
                mb = m_base + j
                mask = in_range & (mb < n_m)
                vals = ctx.g["f"].read(mb * n_fm + src, mask=mask, label="lift_fetch")
                ctx.shared.write(buf + (lane * wi + j) * n_fm + src, vals, mask=mask,
                                 label="lift_stage")
        ctx.barrier()

        live = dof < k_m * n_p
        e = np.minimum(dof // n_p, k_m - 1)
        row = dof - e * n_p
        acc = [np.zeros(ctx.nthreads) for _ in range(wi)]
        for n in range(n_face_vals):
            lv = ctx.t["lift"].read(row * n_face_vals + n, mask=live, label="lift_matrix")
            for j in range(wi):
                mask = live & (m_base + j < n_m)
                sv = ctx.shared.read(buf + (lane * wi + j) * n_fm + e * n_face_vals + n,
                                     mask=mask, label="lift_field")
                acc[j] = acc[j] + lv * sv
        for j in range(wi):
            mb = m_base + j
            mask = live & (mb < n_m)
            ij = ctx.t["invj"].read(mb * k_m + e, mask=mask, label="lift_invj")
            ctx.g["out"].write(mb * n_pm + dof, ij * acc[j], mask=mask, label="lift_store")

    stats = device.launch(
        grid, block, kernel,
        global_arrays={"f": np.asarray(face_values, dtype=np.float64), "out": out},
        texture_arrays={"lift": tables.lift_matrix, "invj": tables.inv_jacobians},
        shared_words=shared, trace=trace,
    )
    return out, stats


# ---------------------------------------------------------------------------
# Local differentiation


def _diff_store(ctx, tables, layout, m_base, wi, dof, live, acc, label):
    """Combine reference-direction derivatives into global ones and store."""
    n_m = layout.num_microblocks
    k_m = layout.microblock_size
    n_p = tables.num_nodes
    e = np.minimum(dof // n_p, k_m - 1)
    for j in range(wi):
        mb = m_base + j
        mask = live & (mb < n_m)
        slot = mb * k_m + e
        for nu in range(3):
            total = np.zeros(ctx.nthreads)
            for mu in range(3):
                c = ctx.t["coef"].read(slot * 9 + nu * 3 + mu, mask=mask, label="diff_coef")
                total = total + c * acc[mu][j]
            ctx.g[f"out{nu}"].write(mb * layout.node_stride + dof, total, mask=mask,
                                    label="diff_store")


def plan_diff_segmented_launch(layout: LayoutPlan, config: KernelConfig, device: Device):
    wp, wi, ws = config.parallel, config.inline, config.sequential
    n_r = config.segment_rows or 16
    if n_r % 16 != 0 or n_r < 16:
        raise ValueError("segment_rows must be a positive multiple of 16")
    n_p = layout.num_nodes
    stride = 3 * n_p + (1 - (3 * n_p) % 2)  # pad to an odd row stride
    shared = n_r * stride
    if shared > device.spec.shared_words:
        raise StrategyUnavailableError(
            f"segmented matrix needs {shared} shared words for order with "
            f"{n_p} nodes; available {device.spec.shared_words} (orders above "
            "six do not fit)"
        )
    threads = n_r * wp
    if threads > device.spec.max_block_threads:
        raise ValueError(f"diff block of {threads} threads exceeds the device limit")
    grid = (_ceil_div(layout.node_stride, n_r), _ceil_div(layout.num_microblocks, wp * wi * ws))
    return grid, (n_r, wp, 1), shared, stride, n_r


def local_diff_segmented(
    device: Device,
    field: np.ndarray,
    tables: ElementTables,
    layout: LayoutPlan,
    config: KernelConfig,
    trace=None,
) -> tuple[np.ndarray, MemStats]:
    """Global derivatives with a row-segmented matrix in shared memory.

    Each block owns ``segment_rows`` output rows of a microblock; the
    matrix rows it loads wrap cyclically so a segment never straddles the
    matrix end, keeping the odd-strided access conflict-free.
    """
    grid, block, shared, stride, n_r = plan_diff_segmented_launch(layout, config, device)
    wp, wi, ws = config.parallel, config.inline, config.sequential
    n_p = tables.num_nodes
    n_pm = layout.node_stride
    n_m = layout.num_microblocks
    k_m = layout.microblock_size
    width = 3 * n_p
    outs = [np.zeros(layout.field_length) for _ in range(3)]

    def kernel(ctx):
        buf = ctx.shared.alloc(n_r * stride)
        total = n_r * width
        for start in range(0, total, ctx.nthreads):
            flat = start + ctx.lin
            mask = flat < total
            seg_row = flat // width
            col = flat - seg_row * width
            mat_row = (ctx.bx * n_r + seg_row) % n_p
            vals = ctx.t["diff"].read(mat_row * width + col, mask=mask, label="diff_matrix_load")
            ctx.shared.write(buf + seg_row * stride + col, vals, mask=mask,
                             label="diff_matrix_stage")
        ctx.barrier()

        dof = ctx.bx * n_r + ctx.tx
        live = dof < k_m * n_p
        e = np.minimum(dof // n_p, k_m - 1)
        for s in range(ws):
            m_base = ((ctx.by * ws + s) * wp + ctx.ty) * wi
            acc = [[np.zeros(ctx.nthreads) for _ in range(wi)] for _ in range(3)]
            for n in range(n_p):
                uvals = []
                for j in range(wi):
                    mask = live & (m_base + j < n_m)
                    uvals.append(ctx.t["u"].read((m_base + j) * n_pm + e * n_p + n,
                                                 mask=mask, label="diff_field"))
                for mu in range(3):
                    dv = ctx.shared.read(buf + ctx.tx * stride + mu * n_p + n,
                                         mask=live, label="diff_matrix")
                    for j in range(wi):
                        acc[mu][j] = acc[mu][j] + dv * uvals[j]
            _diff_store(ctx, tables, layout, m_base, wi, dof, live, acc, "diff")

    stats = device.launch(
        grid, block, kernel,
        global_arrays={f"out{nu}": outs[nu] for nu in range(3)},
        texture_arrays={"u": np.asarray(field, dtype=np.float64),
                        "diff": tables.diff_matrix, "coef": tables.coefficients},
        shared_words=shared, trace=trace,
    )
    return np.stack(outs), stats


def plan_diff_full_matrix_launch(layout: LayoutPlan, config: KernelConfig, device: Device):
    wp = config.parallel
    n_p = layout.num_nodes
    stride = 3 * n_p + (1 - (3 * n_p) % 2)
    shared = n_p * stride
    if shared > device.spec.shared_words:
        raise StrategyUnavailableError(
            f"full matrix needs {shared} shared words; available {device.spec.shared_words}"
        )
    threads = layout.node_stride * wp
    if threads > device.spec.max_block_threads:
        raise ValueError(f"diff block of {threads} threads exceeds the device limit")
    grid = (_ceil_div(layout.num_microblocks, wp * config.inline * config.sequential), 1)
    return grid, (layout.node_stride, wp, 1), shared, stride


def local_diff_matrix_full(
    device: Device,
    field: np.ndarray,
    tables: ElementTables,
    layout: LayoutPlan,
    config: KernelConfig,
    trace=None,
) -> tuple[np.ndarray, MemStats]:
    """Whole odd-strided matrix in shared memory, one thread per output.

    Half-warps that straddle an element boundary inside a microblock wrap
    from the matrix end back to its start and collide on banks; kept as
    the baseline the segmented variant is measured against.
    """
    grid, block, shared, stride = plan_diff_full_matrix_launch(layout, config, device)
    wp, wi, ws = config.parallel, config.inline, config.sequential
    n_p = tables.num_nodes
    n_pm = layout.node_stride
    n_m = layout.num_microblocks
    k_m = layout.microblock_size
    width = 3 * n_p
    outs = [np.zeros(layout.field_length) for _ in range(3)]

    def kernel(ctx):
        buf = ctx.shared.alloc(n_p * stride)
        total = n_p * width
        for start in range(0, total, ctx.nthreads):
            flat = start + ctx.lin
            mask = flat < total
            mat_row = flat // width
            col = flat - mat_row * width
            vals = ctx.t["diff"].read(mat_row * width + col, mask=mask, label="diff_matrix_load")
            ctx.shared.write(buf + mat_row * stride + col, vals, mask=mask,
                             label="diff_matrix_stage")
        ctx.barrier()

        dof = ctx.tx
        live = dof < k_m * n_p
        e = np.minimum(dof // n_p, k_m - 1)
        row = dof - e * n_p
        for s in range(ws):
            m_base = ((ctx.bx * ws + s) * wp + ctx.ty) * wi
            acc = [[np.zeros(ctx.nthreads) for _ in range(wi)] for _ in range(3)]
            for n in range(n_p):
                uvals = []
                for j in range(wi):
                    mask = live & (m_base + j < n_m)
                    uvals.append(ctx.t["u"].read((m_base + j) * n_pm + e * n_p + n,
                                                 mask=mask, label="diff_field"))
                for mu in range(3):
                    dv = ctx.shared.read(buf + row * stride + mu * n_p + n,
                                         mask=live, label="diff_matrix")
                    for j in range(wi):
                        acc[mu][j] = acc[mu][j] + dv * uvals[j]
            _diff_store(ctx, tables, layout, m_base, wi, dof, live, acc, "diff")

    stats = device.launch(
        grid, block, kernel,
        global_arrays={f"out{nu}": outs[nu] for nu in range(3)},
        texture_arrays={"u": np.asarray(field, dtype=np.float64),
                        "diff": tables.diff_matrix, "coef": tables.coefficients},
        shared_words=shared, trace=trace,
    )
    return np.stack(outs), stats


def plan_diff_field_shared_launch(layout: LayoutPlan, config: KernelConfig, device: Device):
    wp, wi = config.parallel, config.inline
    if config.sequential != 1:
        raise ValueError("field-in-shared differentiation uses sequential = 1")
    n_pm = layout.node_stride
    threads = wp * n_pm
    if threads > device.spec.max_block_threads:
        raise ValueError(f"diff block of {threads} threads exceeds the device limit")
    shared = wp * wi * n_pm
    if shared > device.spec.shared_words:
        raise ValueError(f"diff needs {shared} shared words, device has {device.spec.shared_words}")
    grid = (_ceil_div(layout.num_microblocks, wp * wi), 1)
    return grid, (16, wp, n_pm // 16), shared


def local_diff_field_shared(
    device: Device,
    field: np.ndarray,
    tables: ElementTables,
    layout: LayoutPlan,
    config: KernelConfig,
    trace=None,
) -> tuple[np.ndarray, MemStats]:
    """Global derivatives with the field in shared memory; works at any order.

    Same structure as lifting, with the three derivative matrices streamed
    through the texture path; the built-in factor of three plays the role
    of extra inline work.
    """
    grid, block, shared = plan_diff_field_shared_launch(layout, config, device)
    wp, wi = config.parallel, config.inline
    n_p = tables.num_nodes
    n_pm = layout.node_stride
    n_m = layout.num_microblocks
    k_m = layout.microblock_size
    width = 3 * n_p
    outs = [np.zeros(layout.field_length) for _ in range(3)]

    def kernel(ctx):
        dof = ctx.tx + 16 * ctx.tz
        lane = ctx.ty
        m_base = (ctx.bx * wp + lane) * wi
        buf = ctx.shared.alloc(wp * wi * n_pm)

        for j in range(wi):
            mb = m_base + j
            mask = mb < n_m
            vals = ctx.g["u"].read(mb * n_pm + dof, mask=mask, label="diff_fetch")
            ctx.shared.write(buf + (lane * wi + j) * n_pm + dof, vals, mask=mask,
                             label="diff_stage")
        ctx.barrier()

        live = dof < k_m * n_p
        e = np.minimum(dof // n_p, k_m - 1)
        row = dof - e * n_p
        acc = [[np.zeros(ctx.nthreads) for _ in range(wi)] for _ in range(3)]
        for n in range(n_p):
            dvs = [ctx.t["diff"].read(row * width + mu * n_p + n, mask=live,
                                      label="diff_matrix")
                   for mu in range(3)]
            for j in range(wi):
                mask = live & (m_base + j < n_m)
                sv = ctx.shared.read(buf + (lane * wi + j) * n_pm + e * n_p + n,
                                     mask=mask, label="diff_field")
                for mu in range(3):
                    acc[mu][j] = acc[mu][j] + dvs[mu] * sv
        _diff_store(ctx, tables, layout, m_base, wi, dof, live, acc, "diff")

    stats = device.launch(
        grid, block, kernel,
        global_arrays={"u": np.asarray(field, dtype=np.float64),
                       **{f"out{nu}": outs[nu] for nu in range(3)}},
        texture_arrays={"diff": tables.diff_matrix, "coef": tables.coefficients},
        shared_words=shared, trace=trace,
    )
    return np.stack(outs), stats
