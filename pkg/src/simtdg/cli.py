"""Command-line surface: reproducible experiments and machine-readable reports.

Subcommands: ``convergence`` (cavity error sweep over mesh resolutions with
fitted orders), ``simulate`` (one cavity run, reference or emulated
backend), ``tune`` (kernel configuration sweep), ``layout-stats``
(partition and descriptor statistics).  Tables go to CSV, structured
results to JSON; errors are reported as JSON on stderr with a nonzero
exit code.  Runs are deterministic for a fixed seed and configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from . import autotune
from .kernels import build_emulated_operator, build_reference_operator, rk4_step
from .layout import build_gather_plan, build_layout_plan, choose_microblock_size, greedy_partition
from .maxwell import VACUUM, CavityMode, Material, field_energy, l2_error, stable_dt
from .mesh import build_connectivity, generate_box_mesh, read_tetgen
from .refelem import build_reference_element, simplex_node_count


class UnstableRunError(RuntimeError):
    """The solver blew up (energy grew far beyond its initial value)."""


_FLOAT_FMT = "%.17g"


def _fmt(value) -> str:
    if isinstance(value, float):
        return _FLOAT_FMT % value
    return str(value)


def write_csv(path_or_file, rows: list[dict]):
    close = False
    if isinstance(path_or_file, (str,)):
        f = open(path_or_file, "w", newline="")
        close = True
    else:
        f = path_or_file
    try:
        if rows:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _fmt(v) for k, v in row.items()})
    finally:
        if close:
            f.close()


# ---------------------------------------------------------------------------
# Cavity simulation driver


@dataclass
class CavityRun:
    order: int
    num_elements: int
    mesh_size: float
    dt: float
    num_steps: int
    final_time: float
    l2_error: float
    initial_energy: float
    final_energy: float
    max_energy_growth: float
    energy_trace: list = field(default_factory=list)
    stage_stats: dict = field(default_factory=dict)


def run_cavity(
    order: int,
    cells,
    extent=(1.0, 1.0, 1.0),
    mode_numbers=(1, 1, 1),
    final_time: float = 0.75,
    cfl: float = 1.0,
    backend: str = "reference",
    material: Material = VACUUM,
    collect_energy: bool = False,
    blowup_factor: float = 1e3,
    mesh=None,
) -> CavityRun:
    """Integrate one cavity eigenmode and measure the error against it.

    The mesh defaults to a box split into tetrahedra; an externally read
    mesh of the same box may be passed instead.
    """
    if mesh is None:
        mesh = generate_box_mesh(extent, cells)
    elem = build_reference_element(order)
    mode = CavityMode(*mode_numbers, extent=tuple(float(x) for x in extent),
                      material=material)

    ref_op = build_reference_operator(mesh, elem, material)
    geo, nodes = ref_op.geometry, ref_op.nodes

    if backend == "reference":
        rhs_natural = ref_op.rhs
        stage_stats = {}
    elif backend == "emulated":
        emu = build_emulated_operator(mesh, elem, material)

        def rhs_natural(state):
            return emu.rhs_natural(state)

        stage_stats = emu.stage_stats
    else:
        raise ValueError(f"unknown backend {backend!r}")

    dt = stable_dt(mesh, geo, order, material, cfl)
    num_steps = max(1, math.ceil(final_time / dt))
    dt = final_time / num_steps

    state = mode.evaluate(nodes, 0.0)
    e0 = field_energy(state, elem, geo, material)
    e_prev = e0
    max_growth = 0.0
    trace = [(0.0, e0)] if collect_energy else []

    t = 0.0
    for _ in range(num_steps):
        state = rk4_step(state, t, dt, lambda tt, u: rhs_natural(u))
        t += dt
        energy = field_energy(state, elem, geo, material)
        if e_prev > 0.0:
            max_growth = max(max_growth, (energy - e_prev) / e_prev)
        if energy > blowup_factor * e0:
            raise UnstableRunError(
                f"energy grew to {energy / e0:.1f}x its initial value at t={t:.4g}"
            )
        e_prev = energy
        if collect_energy:
            trace.append((t, energy))

    edges = mesh.vertices[mesh.elements]
    h = max(
        float(np.linalg.norm(edges[:, a] - edges[:, b], axis=1).max())
        for a in range(4) for b in range(a + 1, 4)
    )
    return CavityRun(
        order=order,
        num_elements=mesh.num_elements,
        mesh_size=h,
        dt=dt,
        num_steps=num_steps,
        final_time=t,
        l2_error=l2_error(state, mode, t, elem, geo, nodes),
        initial_energy=e0,
        final_energy=e_prev,
        max_energy_growth=max_growth,
        energy_trace=trace,
        stage_stats={k: v.to_dict() for k, v in stage_stats.items()},
    )


def fit_eoc(mesh_sizes, errors) -> float:
    """Least-squares slope of log error against log mesh size."""
    logs_h = np.log(np.asarray(mesh_sizes, dtype=float))
    logs_e = np.log(np.asarray(errors, dtype=float))
    slope, _ = np.polyfit(logs_h, logs_e, 1)
    return float(slope)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_convergence(orders, resolutions, extent=(1.0, 1.0, 1.0),
                    mode_numbers=(1, 1, 1), final_time=0.75, cfl=1.0,
                    backend="reference") -> list[dict]:
    """Error rows per (order, resolution) plus one fitted-order row each."""
    rows = []
    for order in orders:
        sizes, errors = [], []
        for m in resolutions:
            run = run_cavity(order, (m, m, m), extent, mode_numbers,
                             final_time, cfl, backend)
            sizes.append(run.mesh_size)
            errors.append(run.l2_error)
            rows.append({
                "row": "error", "order": order, "mesh_size": run.mesh_size,
                "num_elements": run.num_elements, "l2_error": run.l2_error,
                "eoc": "",
            })
        rows.append({
            "row": "eoc", "order": order, "mesh_size": "", "num_elements": "",
            "l2_error": "", "eoc": fit_eoc(sizes, errors),
        })
    return rows


def cmd_layout_stats(order, cells, extent=(1.0, 1.0, 1.0),
                     max_block_elements=None, block_microblocks=2,
                     mesh=None) -> list[dict]:
    """Per-gather-block descriptor statistics plus a padding-waste sweep."""
    if mesh is None:
        mesh = generate_box_mesh(extent, cells)
    elem = build_reference_element(order)
    conn = build_connectivity(mesh)
    km, _ = choose_microblock_size(elem.num_nodes)
    if max_block_elements is None:
        max_block_elements = km * block_microblocks
    partition = greedy_partition(mesh, max_block_elements, conn)
    layout = build_layout_plan(mesh, elem, partition)
    plan = build_gather_plan(mesh, conn, layout, elem,
                             max_block_microblocks=block_microblocks)

    rows = []
    for b, block in enumerate(plan.blocks):
        rows.append({
            "section": "block", "block": b,
            "num_elements": len(layout.partition[b]),
            "num_microblocks": block.microblock_count,
            "intra": block.num_intra, "inter": block.num_inter,
            "boundary": block.num_boundary,
            "order": order, "waste": "",
        })
    waste = (layout.node_stride - layout.microblock_size * elem.num_nodes) \
        / layout.node_stride
    rows.append({
        "section": "summary", "block": "", "num_elements": mesh.num_elements,
        "num_microblocks": layout.num_microblocks,
        "intra": sum(b.num_intra for b in plan.blocks),
        "inter": sum(b.num_inter for b in plan.blocks),
        "boundary": sum(b.num_boundary for b in plan.blocks),
        "order": order, "waste": waste,
    })
    for n in range(1, 8):
        n_p, _ = simplex_node_count(n)
        km_n, padded = choose_microblock_size(n_p)
        rows.append({
            "section": "waste", "block": "", "num_elements": km_n,
            "num_microblocks": "", "intra": "", "inter": "", "boundary": "",
            "order": n, "waste": (padded - km_n * n_p) / padded,
        })
    return rows


def cmd_tune(kind, order, cells=(1, 1, 1), space=None, seed=0,
             weights=(1.0, 4.0)) -> autotune.TuneReport:
    fixture = autotune.make_fixture(order, cells=cells, seed=seed)
    space = autotune.TuneSpace.from_dict(space or autotune.DEFAULT_SPACES[kind])
    return autotune.tune(space, kind, fixture, weights)


# ---------------------------------------------------------------------------
# Argument parsing


def _parse_triple(text, cast=int):
    parts = [cast(p) for p in str(text).split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 comma-separated values, got {text!r}")
    return tuple(parts)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simtdg",
        description="DG cavity solver with an instrumented SIMT execution model",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    conv = sub.add_parser("convergence", help="cavity error sweep with fitted orders")
    conv.add_argument("--orders", default="1,2,3,4",
                      help="comma-separated polynomial orders")
    conv.add_argument("--resolutions", default="2,3,4",
                      help="comma-separated cells-per-axis values")
    conv.add_argument("--extent", type=lambda s: _parse_triple(s, float), default=(1.0, 1.0, 1.0))
    conv.add_argument("--mode", type=_parse_triple, default=(1, 1, 1))
    conv.add_argument("--final-time", type=float, default=0.75)
    conv.add_argument("--cfl", type=float, default=1.0)
    conv.add_argument("--backend", choices=("reference", "emulated"), default="reference")
    conv.add_argument("--out", default="-", help="output CSV path (default stdout)")

    sim = sub.add_parser("simulate", help="single cavity run")
    sim.add_argument("--order", type=int, default=3)
    sim.add_argument("--cells", type=_parse_triple, default=(2, 2, 2))
    sim.add_argument("--extent", type=lambda s: _parse_triple(s, float), default=(1.0, 1.0, 1.0))
    sim.add_argument("--mode", type=_parse_triple, default=(1, 1, 1))
    sim.add_argument("--final-time", type=float, default=0.75)
    sim.add_argument("--cfl", type=float, default=1.0)
    sim.add_argument("--backend", choices=("reference", "emulated"), default="reference")
    sim.add_argument("--node-file", default=None,
                     help="TetGen .node file (mesh of the same box as --extent)")
    sim.add_argument("--ele-file", default=None, help="TetGen .ele file")
    sim.add_argument("--energy-out", default=None, help="optional energy-trace CSV path")
    sim.add_argument("--out", default="-", help="output JSON path (default stdout)")

    tun = sub.add_parser("tune", help="kernel configuration sweep")
    tun.add_argument("--kernel", choices=autotune.KERNEL_KINDS, required=True)
    tun.add_argument("--order", type=int, default=3)
    tun.add_argument("--cells", type=_parse_triple, default=(1, 1, 1))
    tun.add_argument("--space", default=None,
                     help="JSON file with parameter ranges (default: built-in space)")
    tun.add_argument("--seed", type=int, default=0)
    tun.add_argument("--shared-weight", type=float, default=1.0)
    tun.add_argument("--transaction-weight", type=float, default=4.0)
    tun.add_argument("--out", default="-", help="sweep CSV path (default stdout)")
    tun.add_argument("--report-out", default=None, help="optional JSON report path")

    lay = sub.add_parser("layout-stats", help="partition and descriptor statistics")
    lay.add_argument("--order", type=int, default=3)
    lay.add_argument("--cells", type=_parse_triple, default=(2, 2, 2))
    lay.add_argument("--extent", type=lambda s: _parse_triple(s, float), default=(1.0, 1.0, 1.0))
    lay.add_argument("--max-block-elements", type=int, default=None)
    lay.add_argument("--block-microblocks", type=int, default=2)
    lay.add_argument("--node-file", default=None, help="TetGen .node file instead of a box")
    lay.add_argument("--ele-file", default=None, help="TetGen .ele file")
    lay.add_argument("--out", default="-", help="output CSV path (default stdout)")

    return parser


def _parse_int_list(text):
    return [int(p) for p in str(text).split(",") if p]


def _emit(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as f:
            f.write(text)


def _rows_to_csv_text(rows) -> str:
    import io

    buf = io.StringIO()
    write_csv(buf, rows)
    return buf.getvalue()


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "convergence":
            rows = cmd_convergence(
                _parse_int_list(args.orders), _parse_int_list(args.resolutions),
                args.extent, args.mode, args.final_time, args.cfl, args.backend,
            )
            _emit(args.out, _rows_to_csv_text(rows))
        elif args.command == "simulate":
            mesh = None
            if (args.node_file is None) != (args.ele_file is None):
                raise ValueError("--node-file and --ele-file must be given together")
            if args.node_file:
                with open(args.node_file) as nf, open(args.ele_file) as ef:
                    mesh = read_tetgen(nf.read(), ef.read())
            run = run_cavity(
                args.order, args.cells, args.extent, args.mode,
                args.final_time, args.cfl, args.backend,
                collect_energy=args.energy_out is not None,
                mesh=mesh,
            )
            if args.energy_out:
                write_csv(args.energy_out,
                          [{"time": t, "energy": e} for t, e in run.energy_trace])
            summary = {
                "order": run.order, "num_elements": run.num_elements,
                "mesh_size": run.mesh_size, "dt": run.dt,
                "num_steps": run.num_steps, "final_time": run.final_time,
                "l2_error": run.l2_error,
                "initial_energy": run.initial_energy,
                "final_energy": run.final_energy,
                "max_energy_growth": run.max_energy_growth,
                "stage_stats": run.stage_stats,
            }
            _emit(args.out, json.dumps(summary, indent=2, sort_keys=True) + "\n")
        elif args.command == "tune":
            space = None
            if args.space:
                with open(args.space) as f:
                    space = json.load(f)
            report = cmd_tune(args.kernel, args.order, args.cells, space, args.seed,
                              (args.shared_weight, args.transaction_weight))
            _emit(args.out, report.to_csv())
            if args.report_out:
                _emit(args.report_out, report.to_json() + "\n")
        elif args.command == "layout-stats":
            mesh = None
            if (args.node_file is None) != (args.ele_file is None):
                raise ValueError("--node-file and --ele-file must be given together")
            if args.node_file:
                with open(args.node_file) as nf, open(args.ele_file) as ef:
                    mesh = read_tetgen(nf.read(), ef.read())
            rows = cmd_layout_stats(args.order, args.cells, args.extent,
                                    args.max_block_elements, args.block_microblocks,
                                    mesh=mesh)
            _emit(args.out, _rows_to_csv_text(rows))
        else:  # pragma: no cover
            parser.error(f"unknown command {args.command}")
    except Exception as exc:  # deliberate broad catch at the process boundary
        payload = {"error": type(exc).__name__, "message": str(exc)}
        sys.stderr.write(json.dumps(payload) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
