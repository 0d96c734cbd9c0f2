"""Configuration sweeps for the operator kernels under the device model.

Every candidate work distribution is executed on the emulated device, its
output checked against a dense oracle (a wrong result disqualifies the
configuration outright, it is never ranked), and the surviving candidates
ordered by a weighted count of shared-memory cycles and memory
transactions.  The counters are a transparent proxy, not a timing model;
no analytic performance heuristic is assumed to exist.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .device import Device, KernelConfig, MemStats
from .kernels import (
    build_element_tables,
    build_reference_operator,
    diff_stage,
    flux_gather,
    flux_lift,
    flux_to_natural,
    from_padded,
    gather_stage,
    lift_stage,
    local_diff_field_shared,
    local_diff_matrix_full,
    local_diff_segmented,
    natural_flux_to_padded,
    plan_diff_field_shared_launch,
    plan_diff_full_matrix_launch,
    plan_diff_segmented_launch,
    plan_gather_launch,
    plan_lift_launch,
    to_padded,
)
from .layout import build_gather_plan, build_layout_plan, greedy_partition
from .maxwell import VACUUM, Material, pec_boundary, upwind_flux
from .mesh import Mesh, build_connectivity, compute_geometry, generate_box_mesh
from .refelem import build_reference_element

KERNEL_KINDS = ("lift", "diff", "gather")

#: Work-distribution parameters measured as fastest on first-generation
#: SIMT hardware (a GTX 280) for this operator family, per polynomial
#: order.  Shipped for side-by-side comparison with model-optimal picks;
#: never asserted as optimal for the counter model.
REFERENCE_TUNED_PARAMS = {
    1: {"microblock_size": 4,
        "diff": {"shared": "matrix", "parallel": 6, "inline": 2, "sequential": 3},
        "gather": {"block_microblocks": 4, "parallel": 28},
        "lift": {"shared": "field", "parallel": 4, "inline": 2, "sequential": 1}},
    2: {"microblock_size": 8,
        "diff": {"shared": "matrix", "parallel": 19, "inline": 1, "sequential": 3},
        "gather": {"block_microblocks": 2, "parallel": 26},
        "lift": {"shared": "field", "parallel": 3, "inline": 3, "sequential": 1}},
    3: {"microblock_size": 4,
        "diff": {"shared": "matrix", "parallel": 14, "inline": 2, "sequential": 3},
        "gather": {"block_microblocks": 3, "parallel": 19},
        "lift": {"shared": "field", "parallel": 2, "inline": 3, "sequential": 1}},
    4: {"microblock_size": 4,
        "diff": {"shared": "matrix", "parallel": 19, "inline": 2, "sequential": 3},
        "gather": {"block_microblocks": 2, "parallel": 18},
        "lift": {"shared": "field", "parallel": 2, "inline": 4, "sequential": 1}},
    5: {"microblock_size": 2,
        "diff": {"shared": "field", "parallel": 1, "inline": 4, "sequential": 1},
        "gather": {"block_microblocks": 3, "parallel": 15},
        "lift": {"shared": "field", "parallel": 2, "inline": 3, "sequential": 1}},
    6: {"microblock_size": 2,
        "diff": {"shared": "field", "parallel": 1, "inline": 4, "sequential": 1},
        "gather": {"block_microblocks": 1, "parallel": 4},
        "lift": {"shared": "field", "parallel": 2, "inline": 4, "sequential": 1}},
    7: {"microblock_size": 2,
        "diff": {"shared": "field", "parallel": 2, "inline": 4, "sequential": 1},
        "gather": {"block_microblocks": 2, "parallel": 8},
        "lift": {"shared": "field", "parallel": 2, "inline": 3, "sequential": 1}},
    8: {"microblock_size": 1,
        "diff": {"shared": "field", "parallel": 2, "inline": 4, "sequential": 1},
        "gather": {"block_microblocks": 1, "parallel": 1},
        "lift": {"shared": "field", "parallel": 2, "inline": 4, "sequential": 1}},
    9: {"microblock_size": 1,
        "diff": {"shared": "field", "parallel": 2, "inline": 4, "sequential": 1},
        "gather": {"block_microblocks": 1, "parallel": 2},
        "lift": {"shared": "field", "parallel": 2, "inline": 4, "sequential": 1}},
}


@dataclass(frozen=True)
class TuneSpace:
    """Candidate values per parameter; missing keys fall back to defaults."""

    parameters: tuple  # tuple of (name, tuple_of_candidates)

    @classmethod
    def from_dict(cls, d: dict) -> "TuneSpace":
        return cls(tuple(sorted((k, tuple(v)) for k, v in d.items())))

    def as_dict(self) -> dict:
        return {k: list(v) for k, v in self.parameters}


DEFAULT_SPACES = {
    "lift": {"parallel": (1, 2, 3, 4), "inline": (1, 2, 3, 4)},
    "diff": {"parallel": (1, 2, 3), "inline": (1, 2), "sequential": (1, 2, 3),
             "strategy": ("matrix_segmented", "field_shared"),
             "segment_rows": (16, 32)},
    "gather": {"parallel": (1, 2, 4, 8, 16), "block_microblocks": (1, 2, 3, 4)},
}


@dataclass
class TuneFixture:
    """A small mesh, a random state, and oracle outputs to gate against."""

    order: int
    mesh: Mesh
    elem: object
    material: Material
    connectivity: object
    geometry: object
    reference_op: object
    state: np.ndarray          # (6, K, Np)
    scalar_field: np.ndarray   # (K, Np)
    flux_values: np.ndarray    # (K, 4*Nfp), area-scaled
    expected: dict
    device: Device
    microblock_size: int | None = None
    _layout_cache: dict = field(default_factory=dict)

    def layout_for(self, block_microblocks: int = 2):
        key = (self.microblock_size, block_microblocks)
        if key not in self._layout_cache:
            from .layout import choose_microblock_size

            km = self.microblock_size
            if km is None:
                km, _ = choose_microblock_size(self.elem.num_nodes)
            partition = greedy_partition(self.mesh, km * block_microblocks,
                                         self.connectivity)
            layout = build_layout_plan(self.mesh, self.elem, partition,
                                       microblock_size=self.microblock_size)
            tables = build_element_tables(self.elem, self.geometry, layout)
            plan = build_gather_plan(self.mesh, self.connectivity, layout, self.elem,
                                     max_block_microblocks=block_microblocks)
            self._layout_cache[key] = (layout, tables, plan)
        return self._layout_cache[key]


def make_fixture(order: int, cells=(1, 1, 1), extent=(1.0, 0.9, 1.1),
                 material: Material = VACUUM, seed: int = 0,
                 microblock_size: int | None = None,
                 device: Device | None = None) -> TuneFixture:
    mesh = generate_box_mesh(extent, cells)
    elem = build_reference_element(order)
    connectivity = build_connectivity(mesh)
    geometry = compute_geometry(mesh, elem)
    op = build_reference_operator(mesh, elem, material, connectivity)
    rng = np.random.default_rng(seed)
    state = rng.normal(size=(6, mesh.num_elements, elem.num_nodes))
    scalar = rng.normal(size=(mesh.num_elements, elem.num_nodes))
    flux_vals = rng.normal(size=(mesh.num_elements, 4 * elem.num_face_nodes))
    expected = {
        "lift": lift_stage(op, flux_vals),
        "diff": diff_stage(op, scalar),
        "gather": gather_stage(op, state),
    }
    return TuneFixture(
        order=order, mesh=mesh, elem=elem, material=material,
        connectivity=connectivity, geometry=geometry, reference_op=op,
        state=state, scalar_field=scalar, flux_values=flux_vals,
        expected=expected, device=device or Device(),
        microblock_size=microblock_size,
    )


def _config_from_point(kind: str, point: dict) -> KernelConfig:
    if kind == "lift":
        return KernelConfig(parallel=point.get("parallel", 1),
                            inline=point.get("inline", 1))
    if kind == "diff":
        return KernelConfig(
            parallel=point.get("parallel", 1), inline=point.get("inline", 1),
            sequential=point.get("sequential", 1),
            strategy=point.get("strategy", "matrix_segmented"),
            segment_rows=point.get("segment_rows", 16),
        )
    if kind == "gather":
        return KernelConfig(parallel=point.get("parallel", 1),
                            block_microblocks=point.get("block_microblocks", 2))
    raise ValueError(f"unknown kernel kind {kind!r}")


def _is_feasible(kind: str, config: KernelConfig, fixture: TuneFixture) -> bool:
    device = fixture.device
    try:
        if kind == "gather":
            layout, _, plan = fixture.layout_for(config.block_microblocks or 2)
            plan_gather_launch(layout, plan, config.parallel, device)
        else:
            layout, _, _ = fixture.layout_for(2)
            if kind == "lift":
                plan_lift_launch(layout, config, device)
            elif config.strategy == "matrix_segmented":
                plan_diff_segmented_launch(layout, config, device)
            elif config.strategy == "matrix_full":
                plan_diff_full_matrix_launch(layout, config, device)
            else:
                plan_diff_field_shared_launch(layout, config, device)
        return True
    except (ValueError, RuntimeError):
        return False


def enumerate_configs(space: TuneSpace, kind: str, fixture: TuneFixture) -> list:
    """Exhaustive feasible cross product, in deterministic order."""
    params = dict(space.parameters)
    if not params or any(len(v) == 0 for v in params.values()):
        raise ValueError("tuning space has an empty parameter range")
    names = sorted(params)
    configs = []
    for values in itertools.product(*(params[n] for n in names)):
        point = dict(zip(names, values))
        cfg = _config_from_point(kind, point)
        if _is_feasible(kind, cfg, fixture):
            configs.append(cfg)
    if not configs:
        raise ValueError("no feasible configuration in the tuning space")
    return configs


@dataclass
class EvalResult:
    config: KernelConfig
    valid: bool
    stats: MemStats
    cost: float
    grid_blocks: int
    message: str = ""

    def row(self) -> dict:
        c = self.config
        return {
            "parallel": c.parallel, "inline": c.inline, "sequential": c.sequential,
            "block_microblocks": c.block_microblocks if c.block_microblocks else "",
            "strategy": c.strategy or "", "segment_rows": c.segment_rows or "",
            "valid": int(self.valid), "cost": self.cost,
            "grid_blocks": self.grid_blocks,
            **self.stats.to_dict(),
            "message": self.message,
        }


_DIFF_KERNELS = {
    "matrix_segmented": (local_diff_segmented, plan_diff_segmented_launch),
    "matrix_full": (local_diff_matrix_full, plan_diff_full_matrix_launch),
    "field_shared": (local_diff_field_shared, plan_diff_field_shared_launch),
}

_GATE_TOLERANCE = 1e-11


def evaluate_config(config: KernelConfig, kind: str, fixture: TuneFixture,
                    weights=(1.0, 4.0)) -> EvalResult:
    """Run one kernel configuration; reject it if the numbers are wrong."""
    device = fixture.device
    expected = fixture.expected[kind]

    if kind == "gather":
        layout, _, plan = fixture.layout_for(config.block_microblocks or 2)
        grid, _, _ = plan_gather_launch(layout, plan, config.parallel, device)
        fields = to_padded(layout, fixture.state)
        out, stats = flux_gather(
            device, fields, layout, plan,
            lambda um, up, n: upwind_flux(um, up, n, fixture.material),
            lambda um, n, tags: pec_boundary(um, n),
            parallel=config.parallel,
        )
        got = flux_to_natural(layout, out)
        grid_blocks = grid[0] * grid[1]
    elif kind == "lift":
        layout, tables, _ = fixture.layout_for(2)
        grid, _, _ = plan_lift_launch(layout, config, device)
        padded = natural_flux_to_padded(layout, fixture.flux_values)
        out, stats = flux_lift(device, padded, tables, layout, config)
        got = from_padded(layout, out[None])[0]
        grid_blocks = grid[0] * grid[1]
    else:
        layout, tables, _ = fixture.layout_for(2)
        kernel, planner = _DIFF_KERNELS[config.strategy or "field_shared"]
        grid = planner(layout, config, device)[0]
        padded = to_padded(layout, fixture.scalar_field)
        out, stats = kernel(device, padded, tables, layout, config)
        got = from_padded(layout, out)
        grid_blocks = grid[0] * grid[1]

    scale = max(np.abs(expected).max(), 1.0)
    err = np.abs(got - expected).max() / scale
    if err > _GATE_TOLERANCE:
        return EvalResult(config, False, stats, math.inf, grid_blocks,
                          f"output mismatch: relative error {err:.3e}")
    return EvalResult(config, True, stats, stats.weighted_cost(*weights), grid_blocks)


@dataclass
class TuneReport:
    kind: str
    order: int
    weights: tuple
    results: list

    @property
    def best(self) -> EvalResult:
        valid = [r for r in self.results if r.valid]
        if not valid:
            raise ValueError("no configuration passed the equivalence gate")
        return min(valid, key=lambda r: (r.cost, r.config.parallel,
                                         r.config.inline, r.config.sequential))

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = [r.row() for r in self.results]
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()

    def to_json(self) -> str:
        best = self.best
        return json.dumps({
            "kind": self.kind,
            "order": self.order,
            "weights": list(self.weights),
            "num_configs": len(self.results),
            "best": best.row(),
            "hardware_reference": REFERENCE_TUNED_PARAMS.get(self.order, {}).get(self.kind, {}),
            "results": [r.row() for r in self.results],
        }, indent=2, sort_keys=True)


def tune(space: TuneSpace, kind: str, fixture: TuneFixture,
         weights=(1.0, 4.0)) -> TuneReport:
    """Sweep the space, gate every point, rank the survivors."""
    configs = enumerate_configs(space, kind, fixture)
    results = [evaluate_config(cfg, kind, fixture, weights) for cfg in configs]
    return TuneReport(kind=kind, order=fixture.order, weights=tuple(weights),
                      results=results)


def compare_with_reference(report: TuneReport) -> dict:
    """Model-optimal parameters next to the hardware-measured ones."""
    ref = REFERENCE_TUNED_PARAMS.get(report.order, {}).get(report.kind, {})
    best = report.best.config
    return {
        "order": report.order,
        "kind": report.kind,
        "model_best": {"parallel": best.parallel, "inline": best.inline,
                       "sequential": best.sequential,
                       "block_microblocks": best.block_microblocks,
                       "strategy": best.strategy,
                       "segment_rows": best.segment_rows},
        "hardware_reference": ref,
    }
