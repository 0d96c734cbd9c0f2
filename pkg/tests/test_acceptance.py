"""Acceptance suite: the exit criteria of the build, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one summary line
per criterion.  The convergence and energy runs integrate real cavity
problems and take a few minutes combined.
"""

import math

import numpy as np
import pytest

from simtdg.autotune import REFERENCE_TUNED_PARAMS
from simtdg.cli import fit_eoc, run_cavity
from simtdg.device import Device, KernelConfig
from simtdg.kernels import (
    apply_dense,
    build_element_tables,
    build_emulated_operator,
    dense_global_operator,
    flux_lift,
    local_diff_matrix_full,
    local_diff_segmented,
    rk4_step,
    to_padded,
)
from simtdg.layout import build_layout_plan, choose_microblock_size, greedy_partition
from simtdg.maxwell import CavityMode, field_energy, stable_dt
from simtdg.mesh import Mesh, compute_geometry, generate_box_mesh
from simtdg.refelem import build_reference_element, simplex_node_count


def report(name, detail):
    print(f"\nPASS {name}: {detail}")


def test_criterion_1_convergence_orders():
    """Fitted empirical orders sit in [N + 0.5, N + 1.7] for N = 1..4."""
    meshes = {1: (4, 6, 8), 2: (3, 4, 6), 3: (2, 3, 4), 4: (2, 3)}
    measured = {}
    for order, resolutions in meshes.items():
        sizes, errors = [], []
        for m in resolutions:
            run = run_cavity(order, (m, m, m), final_time=0.75, cfl=1.0)
            assert run.max_energy_growth <= 1e-12
            sizes.append(run.mesh_size)
            errors.append(run.l2_error)
        eoc = fit_eoc(sizes, errors)
        measured[order] = eoc
        assert order + 0.5 <= eoc <= order + 1.7, (order, eoc)
    report("criterion 1 (convergence orders)",
           ", ".join(f"N={n}: EOC={v:.2f}" for n, v in measured.items()))


def test_criterion_2_global_operator_equivalence():
    """Kernel-pipeline RHS matches the dense global operator, N <= 5, K <= 20."""
    rng = np.random.default_rng(42)
    worst = 0.0
    for order in (1, 2, 3, 4, 5):
        cells = (2, 1, 1) if order <= 3 else (1, 1, 1)
        mesh = generate_box_mesh((1.0, 0.9, 1.1), cells)
        assert mesh.num_elements <= 20
        elem = build_reference_element(order)
        dense = dense_global_operator(mesh, elem)
        partitions = [None]
        if order <= 3:
            partitions.append([[k] for k in range(mesh.num_elements)])
        for partition in partitions:
            emu = build_emulated_operator(mesh, elem, partition=partition)
            state = rng.normal(size=(6, mesh.num_elements, elem.num_nodes))
            expected = apply_dense(dense, state)
            got = emu.rhs_natural(state)
            rel = np.abs(got - expected).max() / np.abs(expected).max()
            worst = max(worst, rel)
            assert rel <= 1e-11, (order, partition is None, rel)
    report("criterion 2 (dense-operator equivalence)",
           f"worst relative deviation {worst:.2e} <= 1e-11")


def test_criterion_3_bank_conflict_claims():
    """Shared-memory conflict structure of the differentiation and lift kernels."""
    mesh = generate_box_mesh((1, 1, 1), (2, 1, 1))
    order = 3
    elem = build_reference_element(order)
    geo = compute_geometry(mesh)
    layout = build_layout_plan(mesh, elem, [list(range(mesh.num_elements))])
    assert layout.microblock_size == 4 and elem.num_nodes == 20
    tables = build_element_tables(elem, geo, layout)
    rng = np.random.default_rng(7)
    u = to_padded(layout, rng.normal(size=(mesh.num_elements, elem.num_nodes)))

    n_p = elem.num_nodes
    boundaries = set(range(n_p, layout.microblock_size * n_p, n_p))
    straddling = {hw for hw in range(layout.node_stride // 16)
                  if any(hw * 16 < b < hw * 16 + 16 for b in boundaries)}

    # (a) + (b): whole odd-strided matrix in shared memory
    trace = []
    full_out, _ = local_diff_matrix_full(Device(), u, tables, layout,
                                         KernelConfig(), trace=trace)
    events = [ev for ev in trace if ev.label == "diff_matrix"]
    assert events
    first_hw = [ev.halfwarp_costs[0] for ev in events if 0 in ev.halfwarp_costs]
    assert first_hw and all(c == 1 for c in first_hw)          # (a) exact
    saw_straddle = 0
    for ev in events:
        for hw, cost in ev.halfwarp_costs.items():
            if hw % (layout.node_stride // 16) in straddling:
                assert cost >= 2                               # (b) exact
                saw_straddle += 1
    assert saw_straddle > 0

    # (c): row-segmented matrix restores cost 1 everywhere
    trace = []
    seg_out, _ = local_diff_segmented(Device(), u, tables, layout,
                                      KernelConfig(parallel=2, segment_rows=16),
                                      trace=trace)
    seg_events = [ev for ev in trace if ev.label == "diff_matrix"]
    assert seg_events
    assert all(c == 1 for ev in seg_events for c in ev.halfwarp_costs.values())
    assert np.array_equal(full_out, seg_out) or np.abs(full_out - seg_out).max() == 0.0

    # (d): warp grouping of the lift computation
    cycles = {}
    for test_order in (3, 4):
        elem_d = build_reference_element(test_order)
        assert elem_d.num_nodes % 16 != 0
        layout_d = build_layout_plan(mesh, elem_d, [list(range(mesh.num_elements))])
        tables_d = build_element_tables(elem_d, geo, layout_d)
        f = rng.normal(size=layout_d.flux_length)
        cfg = KernelConfig(parallel=2)
        out_imp, s_imp = flux_lift(Device(), f, tables_d, layout_d, cfg,
                                   variant="improved")
        out_conv, s_conv = flux_lift(Device(), f, tables_d, layout_d, cfg,
                                     variant="conventional")
        assert np.array_equal(out_imp, out_conv)
        assert s_imp.shared_cycles < s_conv.shared_cycles      # (d) strict
        cycles[test_order] = (s_imp.shared_cycles, s_conv.shared_cycles)
    report("criterion 3 (bank-conflict claims)",
           "(a) first half-warp conflict-free, (b) straddles cost >= 2, "
           "(c) segmented cost == 1, (d) grouped lift cycles "
           + ", ".join(f"N={n}: {a} < {b}" for n, (a, b) in cycles.items()))


def test_criterion_4_padding_heuristic():
    """Microblock sizes match the published table for N = 1..7, under 5% waste."""
    expected = {1: 4, 2: 8, 3: 4, 4: 4, 5: 2, 6: 2, 7: 2}
    for order, want in expected.items():
        n_p, _ = simplex_node_count(order)
        km, padded = choose_microblock_size(n_p)
        assert km == want, (order, km, want)
        assert (padded - km * n_p) / padded < 0.05
    # order 8: the rule says 2, hardware-tuned deployments chose 1; the rule
    # is a default the tuner may override, not an equality
    n_p8, _ = simplex_node_count(8)
    km8, _ = choose_microblock_size(n_p8)
    assert km8 == 2
    assert REFERENCE_TUNED_PARAMS[8]["microblock_size"] == 1
    report("criterion 4 (padding heuristic)",
           "microblock sizes {4,8,4,4,2,2,2} for N=1..7, waste < 5%; "
           "N=8 documented override (rule 2, deployed 1)")


def test_criterion_5_dof_table():
    """Volume and face node counts reproduce the published table exactly."""
    table = {
        1: (4, 3, 12), 2: (10, 6, 24), 3: (20, 10, 40), 4: (35, 15, 60),
        5: (56, 21, 84), 6: (84, 28, 112), 7: (120, 36, 144),
    }
    for order, (n_p, n_fp, n_face_total) in table.items():
        got = simplex_node_count(order)
        assert got == (n_p, n_fp)
        assert 4 * got[1] == n_face_total
    report("criterion 5 (DOF table)", "all rows N=1..7 exact")


@pytest.mark.parametrize("order,cells", [(3, 4), (4, 3)])
def test_criterion_6_energy_dissipation(order, cells):
    """1000 steps at default CFL: monotone energy, under 1% total decay."""
    mesh = generate_box_mesh((1.0, 1.0, 1.0), (cells,) * 3)
    elem = build_reference_element(order)
    from simtdg.kernels import build_reference_operator

    op = build_reference_operator(mesh, elem)
    mode = CavityMode(1, 1, 1, (1.0, 1.0, 1.0))
    dt = stable_dt(mesh, op.geometry, order, cfl=1.0)
    state = mode.evaluate(op.nodes, 0.0)
    e0 = field_energy(state, elem, op.geometry)
    e_prev = e0
    t = 0.0
    for _ in range(1000):
        state = rk4_step(state, t, dt, lambda tt, u: op.rhs(u))
        t += dt
        energy = field_energy(state, elem, op.geometry)
        assert energy <= e_prev * (1.0 + 1e-12)
        e_prev = energy
    decay = 1.0 - e_prev / e0
    assert decay < 0.01
    report(f"criterion 6 (energy, N={order}, K={mesh.num_elements})",
           f"non-increasing for 1000 steps, total decay {decay * 100:.4f}% < 1%")


def test_criterion_7_partitioner():
    """Greedy agglomeration covers every element once within the size cap."""
    meshes = [
        Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]]),
             np.array([[0, 1, 2, 3]])),
        generate_box_mesh((1, 1, 1), (1, 1, 1)),
        generate_box_mesh((1.0, 0.8, 1.2), (2, 2, 1)),
        generate_box_mesh((1, 1, 1), (2, 2, 2)),
        generate_box_mesh((1, 1, 1), (3, 2, 2)),
    ]
    checked = 0
    for mesh in meshes:
        for l in (1, 3, 7, mesh.num_elements):
            part = greedy_partition(mesh, l)
            flat = sorted(e for b in part for e in b)
            assert flat == list(range(mesh.num_elements))
            assert all(1 <= len(b) <= l for b in part)
            checked += 1
        # connected mesh at full size collapses to a single block
        assert len(greedy_partition(mesh, mesh.num_elements)) == 1
    report("criterion 7 (partitioner)",
           f"{checked} (mesh, size-cap) combinations covered exactly once; "
           "single block at full size")


def test_criterion_8_integrator_order():
    """Halving dt divides the scalar-ODE error by about 32 (fourth order)."""
    lam = -0.9
    y0 = 1.0

    def err(dt):
        y = rk4_step(np.array(y0), 0.0, dt, lambda t, u: lam * u)
        return abs(float(y) - y0 * math.exp(lam * dt))

    ratio = err(0.2) / err(0.1)
    assert ratio == pytest.approx(32.0, rel=0.10)
    report("criterion 8 (integrator order)", f"error ratio {ratio:.2f} within 32 +- 10%")
