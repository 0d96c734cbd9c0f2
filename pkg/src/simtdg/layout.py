"""Memory layout planning: microblocks, element renumbering, face-pair plans.

Elements are packed ``microblock_size`` at a time and each microblock is
padded to a multiple of the half-warp width, trading a little wasted space
for aligned access.  The mesh is partitioned into blocks of neighboring
elements; each block's faces become an ordered descriptor array (pairs
interior to the block first, then faces whose partner lives in another
block, then boundary faces) that the flux-extraction kernel walks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import VERTEX_PERMUTATIONS, FaceConnectivity, Mesh
from .refelem import FACE_AREAS, NUM_FACES, ReferenceElement, face_node_permutation

HALF_WARP = 16

#: 32-bit words needed to store one face-pair descriptor.
DESCRIPTOR_WORDS = 12


class DescriptorBudgetError(RuntimeError):
    """A gather block needs more face-pair descriptors than fit the budget."""


def ceil_to(value: int, granularity: int) -> int:
    return -(-int(value) // int(granularity)) * int(granularity)


def choose_microblock_size(
    num_nodes: int, warp_size: int = 32, waste_cap: float = 0.05
) -> tuple[int, int]:
    """Smallest element count per microblock with padding waste below the cap.

    Padding rounds ``num_nodes * count`` up to a multiple of half the warp
    size.  The search stops at 256 elements and falls back to the
    minimal-waste count in range if the cap is unreachable.
    """
    if num_nodes < 1:
        raise ValueError("num_nodes must be >= 1")
    if not 0.0 < waste_cap < 1.0:
        raise ValueError("waste_cap must be in (0, 1)")
    gran = warp_size // 2
    best = None
    for count in range(1, 257):
        padded = ceil_to(num_nodes * count, gran)
        waste = (padded - num_nodes * count) / padded
        if best is None or waste < best[0]:
            best = (waste, count, padded)
        if waste < waste_cap:
            return count, padded
    return best[1], best[2]


def greedy_partition(mesh: Mesh, max_block_size: int, connectivity: FaceConnectivity | None = None):
    """Partition elements into connected blocks of at most ``max_block_size``.

    Breadth-first agglomeration: repeatedly absorb the queued candidate
    sharing the most faces with the growing block, reseed from the queue
    front when a block fills up.  Deterministic: ties pick the earliest
    queued candidate, fresh seeds pick the lowest remaining element id.
    """
    if max_block_size < 1:
        raise ValueError("max_block_size must be >= 1")
    if connectivity is None:
        from .mesh import build_connectivity

        connectivity = build_connectivity(mesh)

    neighbors: list[list[int]] = [[] for _ in range(mesh.num_elements)]
    for km, kp in zip(connectivity.elem_minus, connectivity.elem_plus):
        neighbors[int(km)].append(int(kp))
        neighbors[int(kp)].append(int(km))

    remaining = set(range(mesh.num_elements))
    partition: list[list[int]] = []
    next_seed: int | None = None

    while remaining:
        if next_seed is not None and next_seed in remaining:
            queue = [next_seed]
        else:
            queue = [min(remaining)]
        next_seed = None
        block: list[int] = []
        block_set: set[int] = set()

        while True:
            # pop the candidate sharing the most faces with the block
            best_i = 0
            best_count = -1
            for i, cand in enumerate(queue):
                count = sum(1 for nb in neighbors[cand] if nb in block_set)
                if count > best_count:
                    best_i, best_count = i, count
            elem = queue.pop(best_i)

            if elem in remaining:
                remaining.discard(elem)
                block.append(elem)
                block_set.add(elem)
                if len(block) == max_block_size:
                    if queue:
                        next_seed = queue[0]
                    break
                queue.extend(neighbors[elem])
            if not queue:
                if not remaining:
                    break
                queue.append(min(remaining))
        partition.append(block)

    return partition


@dataclass
class LayoutPlan:
    """Element numbering and padded strides for one mesh and order."""

    microblock_size: int          # elements per microblock
    node_stride: int              # padded volume values per microblock
    face_stride: int              # padded face values per microblock
    num_microblocks: int
    warp_size: int
    num_nodes: int                # volume nodes per element
    num_face_nodes: int
    partition: tuple              # tuple of tuples of original element ids
    new_to_old: np.ndarray        # (K,)
    old_to_new: np.ndarray        # (K,)
    microblock_of: np.ndarray     # (K,) by original element id
    slot_of: np.ndarray           # (K,)
    block_microblock_start: np.ndarray  # per partition block
    block_microblock_count: np.ndarray
    microblock_fill: np.ndarray   # (num_microblocks,) occupied slots

    @property
    def num_elements(self) -> int:
        return len(self.new_to_old)

    @property
    def field_length(self) -> int:
        return self.num_microblocks * self.node_stride

    @property
    def flux_length(self) -> int:
        return self.num_microblocks * self.face_stride

    def node_base(self, old_elem: int) -> int:
        return int(
            self.microblock_of[old_elem] * self.node_stride
            + self.slot_of[old_elem] * self.num_nodes
        )

    def face_base(self, old_elem: int) -> int:
        return int(
            self.microblock_of[old_elem] * self.face_stride
            + self.slot_of[old_elem] * NUM_FACES * self.num_face_nodes
        )

    def node_scatter(self) -> np.ndarray:
        """Flat padded index of node p of original element k, shape (K, Np)."""
        base = self.microblock_of * self.node_stride + self.slot_of * self.num_nodes
        return base[:, None] + np.arange(self.num_nodes)[None, :]

    def padding_mask(self) -> np.ndarray:
        """True at padded-layout positions that hold real data."""
        mask = np.zeros(self.field_length, dtype=bool)
        mask[self.node_scatter().ravel()] = True
        return mask

    def flux_padding_mask(self) -> np.ndarray:
        span = NUM_FACES * self.num_face_nodes
        base = self.microblock_of * self.face_stride + self.slot_of * span
        idx = base[:, None] + np.arange(span)[None, :]
        mask = np.zeros(self.flux_length, dtype=bool)
        mask[idx.ravel()] = True
        return mask


def build_layout_plan(
    mesh: Mesh,
    elem: ReferenceElement,
    partition,
    microblock_size: int | None = None,
    warp_size: int = 32,
    waste_cap: float = 0.05,
) -> LayoutPlan:
    """Renumber elements block by block and fix the padded strides.

    Each partition block starts on a fresh microblock; trailing slots of a
    block's last microblock stay empty (zero-filled by the field helpers).
    """
    n_p, n_fp = elem.num_nodes, elem.num_face_nodes
    if microblock_size is None:
        microblock_size, node_stride = choose_microblock_size(n_p, warp_size, waste_cap)
    else:
        node_stride = ceil_to(n_p * microblock_size, warp_size // 2)
    face_stride = ceil_to(NUM_FACES * n_fp * microblock_size, warp_size // 2)

    k_total = mesh.num_elements
    seen = np.zeros(k_total, dtype=bool)
    new_to_old = np.empty(k_total, dtype=np.int64)
    old_to_new = np.empty(k_total, dtype=np.int64)
    microblock_of = np.empty(k_total, dtype=np.int64)
    slot_of = np.empty(k_total, dtype=np.int64)
    starts = []
    counts = []
    fills = []

    new_id = 0
    mb = 0
    for block in partition:
        starts.append(mb)
        for j, old in enumerate(block):
            old = int(old)
            if seen[old]:
                raise ValueError(f"element {old} appears in more than one block")
            seen[old] = True
            new_to_old[new_id] = old
            old_to_new[old] = new_id
            microblock_of[old] = mb + j // microblock_size
            slot_of[old] = j % microblock_size
            new_id += 1
        n_mb = -(-len(block) // microblock_size) if block else 0
        counts.append(n_mb)
        for j in range(n_mb):
            used = min(microblock_size, len(block) - j * microblock_size)
            fills.append(used)
        mb += n_mb
    if not seen.all():
        missing = int(np.flatnonzero(~seen)[0])
        raise ValueError(f"element {missing} is not covered by the partition")

    return LayoutPlan(
        microblock_size=microblock_size,
        node_stride=node_stride,
        face_stride=face_stride,
        num_microblocks=mb,
        warp_size=warp_size,
        num_nodes=n_p,
        num_face_nodes=n_fp,
        partition=tuple(tuple(int(e) for e in b) for b in partition),
        new_to_old=new_to_old,
        old_to_new=old_to_new,
        microblock_of=microblock_of,
        slot_of=slot_of,
        block_microblock_start=np.array(starts, dtype=np.int64),
        block_microblock_count=np.array(counts, dtype=np.int64),
        microblock_fill=np.array(fills, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Face-pair descriptors


@dataclass
class FacePairDescriptor:
    """Everything the flux kernel needs for one face (or glued face pair).

    ``store_base`` values are relative to the owning block's output range.
    ``face_jacobian`` is the physical face area over the area of the bi-unit
    triangle, which is the same constant for both sides of a glued pair.
    """

    fetch_base_minus: int
    fetch_list_minus: int
    fetch_base_plus: int
    fetch_list_plus: int
    store_base_minus: int
    store_base_plus: int
    store_list_plus: int
    face_jacobian: float
    normal: np.ndarray
    boundary_tag: int  # -1 for interior descriptors


@dataclass
class GatherBlock:
    """One flux-extraction work unit: a few microblocks plus descriptors."""

    index: int
    microblock_start: int
    microblock_count: int
    num_intra: int
    num_inter: int
    num_boundary: int
    # struct-of-arrays view of the ordered descriptor list
    fetch_base_minus: np.ndarray
    fetch_list_minus: np.ndarray
    fetch_base_plus: np.ndarray
    fetch_list_plus: np.ndarray
    store_base_minus: np.ndarray
    store_base_plus: np.ndarray
    store_list_plus: np.ndarray
    face_jacobian: np.ndarray
    normal: np.ndarray            # (D, 3)
    boundary_tag: np.ndarray

    @property
    def num_descriptors(self) -> int:
        return len(self.fetch_base_minus)


@dataclass
class GatherPlan:
    blocks: list
    fetch_lists: list            # arrays of volume-node offsets, length Nfp each
    store_lists: list            # arrays of facial positions, length Nfp each
    max_block_microblocks: int
    descriptor_budget: int
    num_fields: int
    tags: tuple

    @property
    def num_descriptors(self) -> int:
        return sum(b.num_descriptors for b in self.blocks)


def build_gather_plan(
    mesh: Mesh,
    connectivity: FaceConnectivity,
    layout: LayoutPlan,
    elem: ReferenceElement,
    max_block_microblocks: int | None = None,
    descriptor_budget: int | None = None,
    num_fields: int = 6,
    shared_words: int = 4096,
) -> GatherPlan:
    """Build the per-block descriptor arrays driving flux extraction.

    A glued pair whose elements share a block is handled by one descriptor
    writing both sides; pairs straddling blocks get one descriptor per
    side; boundary faces get one.  Exceeding the descriptor budget (default:
    whatever fits the emulated shared memory next to the write buffer)
    raises and names the offending block.
    """
    n_fp = elem.num_face_nodes
    n_blocks = len(layout.partition)

    block_of = np.empty(layout.num_elements, dtype=np.int64)
    for b, members in enumerate(layout.partition):
        for old in members:
            block_of[old] = b

    if max_block_microblocks is None:
        max_block_microblocks = int(layout.block_microblock_count.max()) if n_blocks else 1
    if int(layout.block_microblock_count.max(initial=0)) > max_block_microblocks:
        raise ValueError("partition block exceeds max_block_microblocks microblocks")

    if descriptor_budget is None:
        buffer_words = num_fields * max_block_microblocks * layout.face_stride
        descriptor_budget = (shared_words - buffer_words) // DESCRIPTOR_WORDS
        if descriptor_budget < 1:
            raise DescriptorBudgetError(
                f"write buffer ({buffer_words} words) leaves no room for descriptors"
            )

    fetch_ids: dict = {}
    fetch_lists: list = []
    store_ids: dict = {}
    store_lists: list = []

    def fetch_id(arr) -> int:
        key = tuple(int(x) for x in arr)
        if key not in fetch_ids:
            fetch_ids[key] = len(fetch_lists)
            fetch_lists.append(np.asarray(arr, dtype=np.int64))
        return fetch_ids[key]

    def store_id(arr) -> int:
        key = tuple(int(x) for x in arr)
        if key not in store_ids:
            store_ids[key] = len(store_lists)
            store_lists.append(np.asarray(arr, dtype=np.int64))
        return store_ids[key]

    natural = [fetch_id(elem.face_nodes[f]) for f in range(NUM_FACES)]

    per_block: list[dict] = [
        {"intra": [], "inter": [], "boundary": []} for _ in range(n_blocks)
    ]
    covered = np.zeros((layout.num_elements, NUM_FACES), dtype=np.int64)

    geo = _face_geometry(mesh)

    def rel_store(old_k: int, f: int, block: int) -> int:
        return layout.face_base(old_k) + f * n_fp - int(
            layout.block_microblock_start[block] * layout.face_stride
        )

    for i in range(connectivity.num_interior):
        km, fm = int(connectivity.elem_minus[i]), int(connectivity.face_minus[i])
        kp, fp = int(connectivity.elem_plus[i]), int(connectivity.face_plus[i])
        perm = VERTEX_PERMUTATIONS[int(connectivity.perm_id[i])]

        # dominant side: lower (element, face) in the new numbering
        if (layout.old_to_new[kp], fp) < (layout.old_to_new[km], fm):
            km, fm, kp, fp = kp, fp, km, fm
            inv = np.argsort(perm)
            perm = tuple(int(x) for x in inv)

        sigma = face_node_permutation(elem, fm, fp, perm)
        fj = geo["area"][km, fm] / 2.0
        normal = geo["normal"][km, fm]
        bm, bp = int(block_of[km]), int(block_of[kp])

        if bm == bp:
            desc = FacePairDescriptor(
                fetch_base_minus=layout.node_base(km),
                fetch_list_minus=natural[fm],
                fetch_base_plus=layout.node_base(kp),
                fetch_list_plus=fetch_id(elem.face_nodes[fp][sigma]),
                store_base_minus=rel_store(km, fm, bm),
                store_base_plus=rel_store(kp, fp, bp),
                store_list_plus=store_id(sigma),
                face_jacobian=fj,
                normal=normal,
                boundary_tag=-1,
            )
            per_block[bm]["intra"].append(desc)
            covered[km, fm] += 1
            covered[kp, fp] += 1
        else:
            for (ka, fa, kb, fb, blk, sig_fetch) in (
                (km, fm, kp, fp, bm, elem.face_nodes[fp][sigma]),
                (kp, fp, km, fm, bp, elem.face_nodes[fm][np.argsort(sigma)]),
            ):
                desc = FacePairDescriptor(
                    fetch_base_minus=layout.node_base(ka),
                    fetch_list_minus=natural[fa],
                    fetch_base_plus=layout.node_base(kb),
                    fetch_list_plus=fetch_id(sig_fetch),
                    store_base_minus=rel_store(ka, fa, blk),
                    store_base_plus=0,
                    store_list_plus=0,
                    face_jacobian=geo["area"][ka, fa] / 2.0,
                    normal=geo["normal"][ka, fa],
                    boundary_tag=-1,
                )
                per_block[blk]["inter"].append(desc)
                covered[ka, fa] += 1

    for i in range(connectivity.num_boundary):
        k, f = int(connectivity.bnd_elem[i]), int(connectivity.bnd_face[i])
        blk = int(block_of[k])
        desc = FacePairDescriptor(
            fetch_base_minus=layout.node_base(k),
            fetch_list_minus=natural[f],
            fetch_base_plus=layout.node_base(k),
            fetch_list_plus=natural[f],
            store_base_minus=rel_store(k, f, blk),
            store_base_plus=0,
            store_list_plus=0,
            face_jacobian=geo["area"][k, f] / 2.0,
            normal=geo["normal"][k, f],
            boundary_tag=int(connectivity.bnd_tag_id[i]),
        )
        per_block[blk]["boundary"].append(desc)
        covered[k, f] += 1

    if not (covered == 1).all():
        k, f = np.argwhere(covered != 1)[0]
        raise AssertionError(f"face ({k}, {f}) covered {covered[k, f]} times")

    blocks = []
    for b in range(n_blocks):
        descs = per_block[b]["intra"] + per_block[b]["inter"] + per_block[b]["boundary"]
        if len(descs) > descriptor_budget:
            raise DescriptorBudgetError(
                f"gather block {b} needs {len(descs)} descriptors, budget is "
                f"{descriptor_budget}; retry with fewer microblocks per block "
                "or a better partition"
            )
        blocks.append(
            GatherBlock(
                index=b,
                microblock_start=int(layout.block_microblock_start[b]),
                microblock_count=int(layout.block_microblock_count[b]),
                num_intra=len(per_block[b]["intra"]),
                num_inter=len(per_block[b]["inter"]),
                num_boundary=len(per_block[b]["boundary"]),
                fetch_base_minus=np.array([d.fetch_base_minus for d in descs], dtype=np.int64),
                fetch_list_minus=np.array([d.fetch_list_minus for d in descs], dtype=np.int64),
                fetch_base_plus=np.array([d.fetch_base_plus for d in descs], dtype=np.int64),
                fetch_list_plus=np.array([d.fetch_list_plus for d in descs], dtype=np.int64),
                store_base_minus=np.array([d.store_base_minus for d in descs], dtype=np.int64),
                store_base_plus=np.array([d.store_base_plus for d in descs], dtype=np.int64),
                store_list_plus=np.array([d.store_list_plus for d in descs], dtype=np.int64),
                face_jacobian=np.array([d.face_jacobian for d in descs]),
                normal=np.array([d.normal for d in descs]).reshape(-1, 3),
                boundary_tag=np.array([d.boundary_tag for d in descs], dtype=np.int64),
            )
        )

    return GatherPlan(
        blocks=blocks,
        fetch_lists=fetch_lists,
        store_lists=store_lists,
        max_block_microblocks=max_block_microblocks,
        descriptor_budget=descriptor_budget,
        num_fields=num_fields,
        tags=connectivity.tags,
    )


def _face_geometry(mesh: Mesh) -> dict:
    from .mesh import compute_geometry

    geo = compute_geometry(mesh)
    return {
        "area": geo.face_jacobians * FACE_AREAS,
        "normal": geo.normals,
    }
