"""Flux extraction: walk face-pair descriptors, write gathered fluxes.

One thread block per gather block.  Threads are arranged (face node,
descriptor lane); each lane strides through the block's descriptor array,
which is ordered so the descriptor's kind is implicit in its position:
pairs interior to the block first (these compute and store both sides,
the second through a write permutation and the flipped normal), then
single-sided pairs whose partner element lives elsewhere, then boundary
faces closed by the boundary function.  Results are staged in shared
memory in the face-value layout and flushed contiguously at the end.
"""

from __future__ import annotations

import numpy as np

from ..device import Device, MemStats
from ..layout import DESCRIPTOR_WORDS, GatherPlan, LayoutPlan


def plan_gather_launch(layout: LayoutPlan, plan: GatherPlan, parallel: int, device: Device):
    n_fp = layout.num_face_nodes
    threads = n_fp * parallel
    if threads > device.spec.max_block_threads:
        raise ValueError(f"gather block of {threads} threads exceeds the device limit")
    max_desc = max((b.num_descriptors for b in plan.blocks), default=0)
    shared = plan.num_fields * plan.max_block_microblocks * layout.face_stride \
        + max_desc * DESCRIPTOR_WORDS
    if shared > device.spec.shared_words:
        raise ValueError(
            f"gather needs {shared} shared words (buffer + descriptors), "
            f"device has {device.spec.shared_words}"
        )
    return (len(plan.blocks), 1), (n_fp, parallel, 1), shared


def _descriptor_words(block) -> np.ndarray:
    """Flat numeric image of the descriptor array as it sits in memory."""
    d = block.num_descriptors
    words = np.zeros((d, DESCRIPTOR_WORDS))
    words[:, 0] = block.fetch_base_minus
    words[:, 1] = block.fetch_list_minus
    words[:, 2] = block.fetch_base_plus
    words[:, 3] = block.fetch_list_plus
    words[:, 4] = block.store_base_minus
    words[:, 5] = block.store_base_plus
    words[:, 6] = block.store_list_plus
    words[:, 7] = block.face_jacobian
    words[:, 8:11] = block.normal
    words[:, 11] = block.boundary_tag
    return words.reshape(-1)


def flux_gather(
    device: Device,
    fields: np.ndarray,
    layout: LayoutPlan,
    plan: GatherPlan,
    flux_fn,
    bc_fn,
    parallel: int = 1,
    block_order=None,
    trace=None,
) -> tuple[np.ndarray, MemStats]:
    """Gather surface fluxes for all fields at once.

    ``flux_fn(u_minus, u_plus, normal)`` evaluates the normal flux
    difference for stacked fields of shape (n_fields, lanes);
    ``bc_fn(u_minus, normal, tags)`` produces the exterior state at tagged
    boundary faces.  Returns the padded face-value vectors, one per field.
    """
    n_fields = plan.num_fields
    fields = np.asarray(fields, dtype=np.float64).reshape(n_fields, -1)
    if fields.shape[1] != layout.field_length:
        raise ValueError("field array does not match the layout")
    grid, block_dims, shared = plan_gather_launch(layout, plan, parallel, device)
    n_fp = layout.num_face_nodes
    n_fm = layout.face_stride

    out = np.zeros((n_fields, layout.flux_length))
    fetch_flat = np.concatenate(plan.fetch_lists).astype(np.float64)
    fetch_off = np.cumsum([0] + [len(a) for a in plan.fetch_lists])[:-1]
    store_flat = (np.concatenate(plan.store_lists).astype(np.float64)
                  if plan.store_lists else np.zeros(1))
    store_off = np.cumsum([0] + [len(a) for a in plan.store_lists])[:-1] \
        if plan.store_lists else np.array([0])
    desc_images = [_descriptor_words(b) for b in plan.blocks]
    desc_starts = np.cumsum([0] + [len(im) for im in desc_images])

    def kernel(ctx):
        block = plan.blocks[ctx.bx]
        n_desc = block.num_descriptors
        field_stride = plan.max_block_microblocks * n_fm
        span = block.microblock_count * n_fm

        sbuf = ctx.shared.alloc(n_fields * field_stride)
        sdesc = ctx.shared.alloc(max(n_desc, 1) * DESCRIPTOR_WORDS)

        # stage descriptors, then zero the write buffer (padding and empty
        # element slots must flush as zeros)
        n_words = n_desc * DESCRIPTOR_WORDS
        for start in range(0, n_words, ctx.nthreads):
            flat = start + ctx.lin
            mask = flat < n_words
            vals = ctx.g["desc"].read(desc_starts[ctx.bx] + flat, mask=mask,
                                      label="descriptor_load")
            ctx.shared.write(sdesc + flat, vals, mask=mask, label="descriptor_stage")
        for c in range(n_fields):
            for start in range(0, span, ctx.nthreads):
                flat = start + ctx.lin
                ctx.shared.write(sbuf + c * field_stride + flat, 0.0,
                                 mask=flat < span, label="buffer_zero")
        ctx.barrier()

        tx, lane = ctx.tx, ctx.ty
        intra_end = block.num_intra
        inter_end = block.num_intra + block.num_inter

        def desc_word(e_idx, word, mask):
            return ctx.shared.read(sdesc + e_idx * DESCRIPTOR_WORDS + word, mask=mask,
                                   label="descriptor_read")

        def fetch_side(e_idx, mask, base_word, list_word):
            base = desc_word(e_idx, base_word, mask).astype(np.int64)
            list_nr = desc_word(e_idx, list_word, mask).astype(np.int64)
            offs = ctx.t["J"].read(fetch_off[np.minimum(list_nr, len(fetch_off) - 1)] + tx,
                                   mask=mask, label="fetch_index").astype(np.int64)
            u = np.empty((n_fields, ctx.nthreads))
            for c in range(n_fields):
                u[c] = ctx.t[f"u{c}"].read(base + offs, mask=mask, label="field_fetch")
            return u

        def read_geometry(e_idx, mask):
            fj = desc_word(e_idx, 7, mask)
            normal = np.stack([desc_word(e_idx, 8 + d, mask) for d in range(3)])
            return fj, normal

        n_lanes = block_dims[1]
        phases = ((0, intra_end), (intra_end, inter_end), (inter_end, n_desc))
        for phase, (lo, hi) in enumerate(phases):
            count = hi - lo
            for it in range(-(-count // n_lanes) if count else 0):
                e_idx = lo + it * n_lanes + lane
                mask = e_idx < hi
                e_safe = np.minimum(e_idx, max(n_desc - 1, 0))
                u_m = fetch_side(e_safe, mask, 0, 1)
                fj, normal = read_geometry(e_safe, mask)
                if phase < 2:
                    u_p = fetch_side(e_safe, mask, 2, 3)
                else:
                    tag = desc_word(e_safe, 11, mask).astype(np.int64)
                    u_p = bc_fn(u_m, normal, tag)
                vals = flux_fn(u_m, u_p, normal) * fj[None, :]
                if phase == 0:
                    vals_back = flux_fn(u_p, u_m, -normal) * fj[None, :]
                    sbase_p = desc_word(e_safe, 5, mask).astype(np.int64)
                    list_nr = desc_word(e_safe, 6, mask).astype(np.int64)
                    pos = ctx.t["j_store"].read(
                        store_off[np.minimum(list_nr, len(store_off) - 1)] + tx,
                        mask=mask, label="store_index").astype(np.int64)
                # minus-side store goes to the natural face ordering
                sbase_m = desc_word(e_safe, 4, mask).astype(np.int64)
                for c in range(n_fields):
                    ctx.shared.write(sbuf + c * field_stride + sbase_m + tx,
                                     vals[c], mask=mask, label="flux_store")
                    if phase == 0:
                        ctx.shared.write(sbuf + c * field_stride + sbase_p + pos,
                                         vals_back[c], mask=mask,
                                         label="flux_store_permuted")
        ctx.barrier()

        flush_base = block.microblock_start * n_fm
        for c in range(n_fields):
            for start in range(0, span, ctx.nthreads):
                flat = start + ctx.lin
                mask = flat < span
                vals = ctx.shared.read(sbuf + c * field_stride + flat,
                                       mask=mask, label="flux_flush_read")
                ctx.g[f"f{c}"].write(flush_base + flat, vals, mask=mask, label="flux_flush")

    globals_ = {f"f{c}": out[c] for c in range(n_fields)}
    globals_["desc"] = np.concatenate(desc_images) if desc_images else np.zeros(1)
    textures = {f"u{c}": fields[c] for c in range(n_fields)}
    textures["J"] = fetch_flat
    textures["j_store"] = store_flat

    stats = device.launch(grid, block_dims, kernel, global_arrays=globals_,
                          texture_arrays=textures, shared_words=shared,
                          block_order=block_order, trace=trace)
    return out, stats
