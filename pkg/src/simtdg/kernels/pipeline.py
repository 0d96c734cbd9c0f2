"""The Maxwell operator executed stage by stage on the emulated device.

Wires mesh, layout plan, gather plan and element tables into a callable
right-hand side: flux gather -> per-field lifting -> per-field
differentiation -> assembly, with traffic counters accumulated per stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..device import Device, KernelConfig, MemStats
from ..layout import build_gather_plan, build_layout_plan, greedy_partition
from ..maxwell import Material, VACUUM, pec_boundary, upwind_flux
from ..mesh import Mesh, build_connectivity, compute_geometry
from ..refelem import ReferenceElement
from . import fields as field_layout
from .assemble import assemble_rhs
from .gather import flux_gather
from .local_ops import (
    ElementTables,
    build_element_tables,
    flux_lift,
    local_diff_field_shared,
    local_diff_matrix_full,
    local_diff_segmented,
)

N_FIELDS = 6

_DIFF_KERNELS = {
    "matrix_segmented": local_diff_segmented,
    "matrix_full": local_diff_matrix_full,
    "field_shared": local_diff_field_shared,
}


def default_configs(order: int) -> dict:
    """Safe, always-feasible work distributions; tuning may do better."""
    strategy = "matrix_segmented" if order <= 6 else "field_shared"
    return {
        "gather": KernelConfig(parallel=4),
        "lift": KernelConfig(parallel=1, inline=2),
        "diff": KernelConfig(parallel=1, inline=2, strategy=strategy, segment_rows=16),
    }


@dataclass
class EmulatedMaxwellOperator:
    """Maxwell right-hand side evaluated through the device-model kernels."""

    mesh: Mesh
    elem: ReferenceElement
    material: Material
    device: Device
    layout: object
    gather_plan: object
    tables: ElementTables
    configs: dict
    stage_stats: dict = field(default_factory=dict)

    def reset_stats(self):
        self.stage_stats = {}

    def _account(self, stage: str, stats: MemStats):
        self.stage_stats.setdefault(stage, MemStats()).add(stats)

    def flux_fn(self, u_minus, u_plus, normal):
        return upwind_flux(u_minus, u_plus, normal, self.material)

    def bc_fn(self, u_minus, normal, tags):
        return pec_boundary(u_minus, normal)

    def rhs_padded(self, state: np.ndarray, trace=None) -> np.ndarray:
        """Time derivative of a padded (6, L) state, same layout."""
        state = np.asarray(state, dtype=np.float64)
        gathered, stats = flux_gather(
            self.device, state, self.layout, self.gather_plan,
            self.flux_fn, self.bc_fn,
            parallel=self.configs["gather"].parallel, trace=trace,
        )
        self._account("gather", stats)

        lifted = np.empty_like(state)
        for c in range(N_FIELDS):
            lifted[c], stats = flux_lift(
                self.device, gathered[c], self.tables, self.layout,
                self.configs["lift"], trace=trace,
            )
            self._account("lift", stats)

        diff_cfg = self.configs["diff"]
        diff_kernel = _DIFF_KERNELS[diff_cfg.strategy or "field_shared"]
        derivs = np.empty((N_FIELDS, 3, state.shape[1]))
        for c in range(N_FIELDS):
            derivs[c], stats = diff_kernel(
                self.device, state[c], self.tables, self.layout, diff_cfg, trace=trace,
            )
            self._account("diff", stats)

        out, stats = assemble_rhs(self.device, derivs, lifted, self.material, trace=trace)
        self._account("assemble", stats)
        return out

    def rhs_natural(self, state: np.ndarray) -> np.ndarray:
        """Convenience wrapper: natural (6, K, Np) in and out."""
        padded = field_layout.to_padded(self.layout, state)
        return field_layout.from_padded(self.layout, self.rhs_padded(padded))

    def total_stats(self) -> MemStats:
        total = MemStats()
        for s in self.stage_stats.values():
            total.add(s)
        return total


def build_emulated_operator(
    mesh: Mesh,
    elem: ReferenceElement,
    material: Material = VACUUM,
    device: Device | None = None,
    partition=None,
    max_block_elements: int | None = None,
    microblock_size: int | None = None,
    block_microblocks: int | None = None,
    configs: dict | None = None,
) -> EmulatedMaxwellOperator:
    device = device or Device()
    connectivity = build_connectivity(mesh)
    geometry = compute_geometry(mesh, elem)

    if partition is None:
        if max_block_elements is None:
            km_probe = microblock_size
            if km_probe is None:
                from ..layout import choose_microblock_size

                km_probe, _ = choose_microblock_size(elem.num_nodes, device.spec.warp_size)
            max_block_elements = km_probe * (block_microblocks or 2)
        partition = greedy_partition(mesh, max_block_elements, connectivity)

    layout = build_layout_plan(mesh, elem, partition, microblock_size=microblock_size,
                               warp_size=device.spec.warp_size)
    gather_plan = build_gather_plan(
        mesh, connectivity, layout, elem,
        max_block_microblocks=block_microblocks,
        num_fields=N_FIELDS, shared_words=device.spec.shared_words,
    )
    tables = build_element_tables(elem, geometry, layout)
    cfg = default_configs(elem.order)
    if configs:
        cfg.update(configs)
    return EmulatedMaxwellOperator(
        mesh=mesh, elem=elem, material=material, device=device,
        layout=layout, gather_plan=gather_plan, tables=tables, configs=cfg,
    )
