import math

import numpy as np
import pytest

from simtdg.device import Device, KernelConfig
from simtdg.kernels import (
    StrategyUnavailableError,
    apply_dense,
    assemble_rhs,
    build_element_tables,
    build_emulated_operator,
    build_reference_operator,
    check_padding,
    dense_global_operator,
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
    rk4_step,
    to_padded,
)
from simtdg.layout import build_gather_plan, build_layout_plan
from simtdg.maxwell import VACUUM, pec_boundary, upwind_flux
from simtdg.mesh import Mesh, build_connectivity, compute_geometry, generate_box_mesh, map_nodes
from simtdg.refelem import build_reference_element


def single_tet_mesh():
    return Mesh(
        np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]]),
        np.array([[0, 1, 2, 3]]),
    )


def make_setup(order, mesh, partition=None, microblock_size=None):
    elem = build_reference_element(order)
    geo = compute_geometry(mesh)
    if partition is None:
        partition = [list(range(mesh.num_elements))]
    layout = build_layout_plan(mesh, elem, partition, microblock_size=microblock_size)
    tables = build_element_tables(elem, geo, layout)
    return elem, geo, layout, tables


def rel_err(got, want):
    scale = np.abs(want).max()
    return np.abs(got - want).max() / (scale if scale > 0 else 1.0)


class TestFieldLayout:
    def test_round_trip(self):
        mesh = generate_box_mesh((1, 1, 1), (1, 1, 1))
        elem, geo, layout, _ = make_setup(2, mesh)
        rng = np.random.default_rng(0)
        nat = rng.normal(size=(6, mesh.num_elements, elem.num_nodes))
        padded = to_padded(layout, nat)
        assert check_padding(layout, padded)
        assert np.array_equal(from_padded(layout, padded), nat)

    def test_flux_round_trip(self):
        mesh = generate_box_mesh((1, 1, 1), (1, 1, 1))
        elem, geo, layout, _ = make_setup(2, mesh)
        rng = np.random.default_rng(1)
        nat = rng.normal(size=(mesh.num_elements, 4 * elem.num_face_nodes))
        padded = natural_flux_to_padded(layout, nat)
        assert check_padding(layout, padded, face_layout=True)
        assert np.array_equal(flux_to_natural(layout, padded), nat)


class TestFluxLift:
    def test_zero_in_zero_out(self):
        mesh = generate_box_mesh((1, 1, 1), (1, 1, 1))
        elem, geo, layout, tables = make_setup(2, mesh)
        out, _ = flux_lift(Device(), np.zeros(layout.flux_length), tables, layout,
                           KernelConfig())
        assert np.all(out == 0.0)

    def test_single_tet_order1_dense_oracle(self):
        # explicit 4 x 12 matrix product, scaled by the inverse Jacobian
        mesh = single_tet_mesh()
        elem, geo, layout, tables = make_setup(1, mesh, [[0]])
        op = build_reference_operator(mesh, elem)
        rng = np.random.default_rng(2)
        flux_nat = rng.normal(size=(1, 4 * elem.num_face_nodes))
        expected = lift_stage(op, flux_nat)
        out, _ = flux_lift(Device(), natural_flux_to_padded(layout, flux_nat),
                           tables, layout, KernelConfig())
        got = from_padded(layout, out[None])[0]
        assert rel_err(got, expected) <= 1e-12

    @pytest.mark.parametrize("order", [2, 3, 4])
    def test_matches_stage_oracle(self, order):
        mesh = generate_box_mesh((1, 1, 1), (2, 1, 1))
        elem, geo, layout, tables = make_setup(order, mesh)
        op = build_reference_operator(mesh, elem)
        rng = np.random.default_rng(3)
        flux_nat = rng.normal(size=(mesh.num_elements, 4 * elem.num_face_nodes))
        expected = lift_stage(op, flux_nat)
        cfg = KernelConfig(parallel=2, inline=2) if layout.node_stride * 2 <= 512 \
            else KernelConfig()
        out, _ = flux_lift(Device(), natural_flux_to_padded(layout, flux_nat),
                           tables, layout, cfg)
        got = from_padded(layout, out[None])[0]
        assert rel_err(got, expected) <= 1e-12
        assert check_padding(layout, out)

    @pytest.mark.parametrize("order", [3, 4])
    def test_warp_grouping_variants(self, order):
        # same numbers, strictly fewer shared cycles for the grouped layout
        # whenever element boundaries fall inside half-warps and parallel > 1
        mesh = generate_box_mesh((1, 1, 1), (2, 1, 1))
        elem, geo, layout, tables = make_setup(order, mesh)
        assert elem.num_nodes % 16 != 0
        rng = np.random.default_rng(4)
        f = natural_flux_to_padded(
            layout, rng.normal(size=(mesh.num_elements, 4 * elem.num_face_nodes)))
        cfg = KernelConfig(parallel=2)
        out_imp, s_imp = flux_lift(Device(), f, tables, layout, cfg, variant="improved")
        out_conv, s_conv = flux_lift(Device(), f, tables, layout, cfg, variant="conventional")
        assert np.array_equal(out_imp, out_conv)
        assert s_imp.shared_cycles < s_conv.shared_cycles


class TestLocalDiff:
    def exact_case(self, order, mesh, kernel, cfg=None, microblock_size=None):
        elem, geo, layout, tables = make_setup(order, mesh, microblock_size=microblock_size)
        nodes = map_nodes(mesh, elem)
        cfg = cfg or KernelConfig(segment_rows=16)
        u = to_padded(layout, nodes[:, :, 0])  # the global x coordinate
        out, stats = kernel(Device(), u, tables, layout, cfg)
        got = from_padded(layout, out)
        return got, stats, layout

    @pytest.mark.parametrize("kernel", [local_diff_segmented, local_diff_field_shared,
                                        local_diff_matrix_full])
    def test_constant_field_zero_derivatives(self, kernel):
        mesh = generate_box_mesh((1, 1, 1), (1, 1, 1))
        elem, geo, layout, tables = make_setup(2, mesh)
        u = to_padded(layout, np.ones((mesh.num_elements, elem.num_nodes)))
        out, _ = kernel(Device(), u, tables, layout, KernelConfig(segment_rows=16))
        assert np.abs(out).max() < 1e-12

    @pytest.mark.parametrize("kernel", [local_diff_segmented, local_diff_field_shared,
                                        local_diff_matrix_full])
    def test_linear_field_unit_gradient(self, kernel):
        mesh = generate_box_mesh((1.0, 0.8, 1.3), (1, 1, 1))
        got, _, _ = self.exact_case(2, mesh, kernel)
        assert np.abs(got[0] - 1.0).max() < 1e-10
        assert np.abs(got[1]).max() < 1e-10
        assert np.abs(got[2]).max() < 1e-10

    @pytest.mark.parametrize("order", [1, 2, 3, 4, 5, 6])
    def test_strategies_agree_and_match_oracle(self, order):
        mesh = generate_box_mesh((1.0, 0.9, 1.1), (1, 1, 1))
        elem, geo, layout, tables = make_setup(order, mesh)
        op = build_reference_operator(mesh, elem)
        rng = np.random.default_rng(5)
        u_nat = rng.normal(size=(mesh.num_elements, elem.num_nodes))
        expected = diff_stage(op, u_nat)
        u = to_padded(layout, u_nat)
        results = {}
        for name, kernel in (("seg", local_diff_segmented),
                             ("field", local_diff_field_shared),
                             ("full", local_diff_matrix_full)):
            if name == "full" and order > 4:
                continue  # whole matrix stops fitting shared memory
            out, _ = kernel(Device(), u, tables, layout, KernelConfig(segment_rows=16))
            got = from_padded(layout, out)
            assert rel_err(got, expected) <= 1e-12, name
            results[name] = got
        assert rel_err(results["seg"], results["field"]) <= 1e-12

    def test_segmented_unavailable_above_order_six(self):
        mesh = single_tet_mesh()
        elem, geo, layout, tables = make_setup(7, mesh, [[0]])
        with pytest.raises(StrategyUnavailableError):
            local_diff_segmented(Device(), np.zeros(layout.field_length), tables,
                                 layout, KernelConfig(segment_rows=16))

    def test_field_shared_available_at_high_order(self):
        mesh = single_tet_mesh()
        elem, geo, layout, tables = make_setup(7, mesh, [[0]])
        u = to_padded(layout, np.ones((1, elem.num_nodes)))
        out, _ = local_diff_field_shared(Device(), u, tables, layout, KernelConfig())
        assert np.abs(out).max() < 1e-11

    def test_segmented_matrix_access_conflict_free(self):
        # order 3, four elements per microblock, 16-row segments: every
        # multiply-phase matrix read must cost exactly one cycle per half-warp
        mesh = generate_box_mesh((1, 1, 1), (2, 1, 1))
        elem, geo, layout, tables = make_setup(3, mesh)
        assert layout.microblock_size == 4
        rng = np.random.default_rng(6)
        u = to_padded(layout, rng.normal(size=(mesh.num_elements, elem.num_nodes)))
        trace = []
        local_diff_segmented(Device(), u, tables, layout,
                             KernelConfig(parallel=2, segment_rows=16), trace=trace)
        events = [ev for ev in trace if ev.label == "diff_matrix"]
        assert events
        accesses = sum(len(ev.halfwarp_costs) for ev in events)
        cycles = sum(sum(ev.halfwarp_costs.values()) for ev in events)
        assert cycles == accesses  # serialization factor exactly 1.0

    def test_full_matrix_straddling_halfwarps_conflict(self):
        mesh = generate_box_mesh((1, 1, 1), (2, 1, 1))
        elem, geo, layout, tables = make_setup(3, mesh)
        rng = np.random.default_rng(7)
        u = to_padded(layout, rng.normal(size=(mesh.num_elements, elem.num_nodes)))
        trace = []
        local_diff_matrix_full(Device(), u, tables, layout, KernelConfig(), trace=trace)
        events = [ev for ev in trace if ev.label == "diff_matrix"]
        n_p = elem.num_nodes
        straddling = set()
        clean = set()
        for hw in range(layout.node_stride // 16):
            lo, hi = hw * 16, hw * 16 + 16
            if any(lo < b < hi for b in range(n_p, layout.microblock_size * n_p, n_p)):
                straddling.add(hw)
            else:
                clean.add(hw)
        assert straddling
        for ev in events:
            for hw, cost in ev.halfwarp_costs.items():
                if hw in straddling:
                    assert cost >= 2
                elif hw in clean:
                    assert cost == 1


def maxwell_flux_fn(u_m, u_p, n):
    return upwind_flux(u_m, u_p, n, VACUUM)


def maxwell_bc_fn(u_m, n, tags):
    return pec_boundary(u_m, n)


class TestFluxGather:
    def make(self, order, mesh, partition=None, microblock_size=None):
        elem = build_reference_element(order)
        conn = build_connectivity(mesh)
        if partition is None:
            partition = [list(range(mesh.num_elements))]
        layout = build_layout_plan(mesh, elem, partition, microblock_size=microblock_size)
        plan = build_gather_plan(mesh, conn, layout, elem)
        return elem, conn, layout, plan

    def test_zero_fields_zero_fluxes(self):
        mesh = generate_box_mesh((1, 1, 1), (1, 1, 1))
        elem, conn, layout, plan = self.make(2, mesh)
        fields = np.zeros((6, layout.field_length))
        out, _ = flux_gather(Device(), fields, layout, plan, maxwell_flux_fn,
                             maxwell_bc_fn, parallel=3)
        assert np.all(out == 0.0)

    def test_continuous_field_interior_fluxes_vanish(self):
        # globally linear (hence continuous) state: interior jumps are zero
        # pointwise, so any node-pairing error would show up immediately
        mesh = generate_box_mesh((1, 1, 1), (1, 1, 1))
        elem, conn, layout, plan = self.make(2, mesh)
        nodes = map_nodes(mesh, elem)
        rng = np.random.default_rng(20)
        grad = rng.normal(size=(6, 3))
        nat = np.einsum("cd,kpd->ckp", grad, nodes)
        out, _ = flux_gather(Device(), to_padded(layout, nat), layout, plan,
                             maxwell_flux_fn, maxwell_bc_fn, parallel=2)
        got = flux_to_natural(layout, out)
        op = build_reference_operator(mesh, elem)
        n_fp = elem.num_face_nodes
        for k in range(mesh.num_elements):
            for f in range(4):
                vals = got[:, k, f * n_fp:(f + 1) * n_fp]
                if not op.is_boundary[k, f]:
                    assert np.abs(vals).max() < 1e-14

    def test_single_tet_pec_matches_node_loop_oracle(self):
        mesh = single_tet_mesh()
        elem, conn, layout, plan = self.make(2, mesh, [[0]])
        op = build_reference_operator(mesh, elem)
        rng = np.random.default_rng(8)
        nat = rng.normal(size=(6, 1, elem.num_nodes))
        expected = gather_stage(op, nat)
        out, _ = flux_gather(Device(), to_padded(layout, nat), layout, plan,
                             maxwell_flux_fn, maxwell_bc_fn)
        got = flux_to_natural(layout, out)
        assert rel_err(got, expected) <= 1e-12

    @pytest.mark.parametrize("split", [False, True])
    def test_box_mesh_matches_oracle(self, split):
        mesh = generate_box_mesh((1.0, 0.9, 1.1), (1, 1, 1))
        part = [[k] for k in range(6)] if split else None
        elem, conn, layout, plan = self.make(2, mesh, part)
        op = build_reference_operator(mesh, elem)
        rng = np.random.default_rng(9)
        nat = rng.normal(size=(6, mesh.num_elements, elem.num_nodes))
        expected = gather_stage(op, nat)
        out, _ = flux_gather(Device(), to_padded(layout, nat), layout, plan,
                             maxwell_flux_fn, maxwell_bc_fn, parallel=2)
        got = flux_to_natural(layout, out)
        assert rel_err(got, expected) <= 1e-12
        assert check_padding(layout, out, face_layout=True)

    def test_block_order_invariance(self):
        mesh = generate_box_mesh((1, 1, 1), (1, 1, 1))
        elem, conn, layout, plan = self.make(2, mesh, [[0, 1], [2, 3], [4, 5]])
        rng = np.random.default_rng(10)
        nat = rng.normal(size=(6, mesh.num_elements, elem.num_nodes))
        fields = to_padded(layout, nat)

        ref = None
        for order_idx in (None, [(2, 0), (0, 0), (1, 0)], [(1, 0), (2, 0), (0, 0)]):
            out, stats = flux_gather(Device(), fields, layout, plan,
                                     maxwell_flux_fn, maxwell_bc_fn, parallel=2,
                                     block_order=order_idx)
            if ref is None:
                ref = (out, stats.to_dict())
            else:
                assert np.array_equal(out, ref[0])
                assert stats.to_dict() == ref[1]


class TestAssemble:
    def test_zero_state(self):
        out, _ = assemble_rhs(Device(), np.zeros((6, 3, 64)), np.zeros((6, 64)))
        assert np.all(out == 0.0)

    def test_constant_h_in_cavity_is_steady(self):
        # E = 0 and spatially constant H: curls vanish and the PEC mirror
        # keeps tangential H, so the full right-hand side is zero
        mesh = generate_box_mesh((1, 1, 1), (1, 1, 1))
        elem = build_reference_element(2)
        emu = build_emulated_operator(mesh, elem)
        nat = np.zeros((6, mesh.num_elements, elem.num_nodes))
        nat[3:] = 0.7
        rhs = emu.rhs_natural(nat)
        assert np.abs(rhs).max() < 1e-12

    def test_two_element_dense_oracle(self):
        mesh = Mesh(
            np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1.0]]),
            np.array([[0, 1, 2, 3], [1, 2, 3, 4]]),
        )
        elem = build_reference_element(2)
        a = dense_global_operator(mesh, elem)
        emu = build_emulated_operator(mesh, elem)
        rng = np.random.default_rng(11)
        state = rng.normal(size=(6, 2, elem.num_nodes))
        expected = apply_dense(a, state)
        got = emu.rhs_natural(state)
        assert rel_err(got, expected) <= 1e-11


class TestPipeline:
    @pytest.mark.parametrize("order", [1, 2, 3])
    def test_matches_reference_operator(self, order):
        mesh = generate_box_mesh((1.0, 0.9, 1.1), (1, 1, 1))
        elem = build_reference_element(order)
        ref = build_reference_operator(mesh, elem)
        emu = build_emulated_operator(mesh, elem)
        rng = np.random.default_rng(12)
        state = rng.normal(size=(6, mesh.num_elements, elem.num_nodes))
        assert rel_err(emu.rhs_natural(state), ref.rhs(state)) <= 1e-12

    def test_split_partition_exercises_interblock(self):
        mesh = generate_box_mesh((1, 1, 1), (2, 1, 1))
        elem = build_reference_element(2)
        ref = build_reference_operator(mesh, elem)
        emu = build_emulated_operator(mesh, elem, partition=[[k] for k in range(12)])
        assert sum(b.num_inter for b in emu.gather_plan.blocks) > 0
        rng = np.random.default_rng(13)
        state = rng.normal(size=(6, mesh.num_elements, elem.num_nodes))
        assert rel_err(emu.rhs_natural(state), ref.rhs(state)) <= 1e-12

    def test_high_order_single_tet(self):
        # above order 6 only the field-in-shared differentiation fits;
        # the default pipeline must still match the reference operator
        mesh = single_tet_mesh()
        elem = build_reference_element(7)
        ref = build_reference_operator(mesh, elem)
        emu = build_emulated_operator(mesh, elem)
        assert emu.configs["diff"].strategy == "field_shared"
        rng = np.random.default_rng(21)
        state = rng.normal(size=(6, 1, elem.num_nodes))
        assert rel_err(emu.rhs_natural(state), ref.rhs(state)) <= 1e-12

    def test_padding_intact_after_full_rhs(self):
        mesh = generate_box_mesh((1, 1, 1), (1, 1, 1))
        elem = build_reference_element(3)
        emu = build_emulated_operator(mesh, elem)
        rng = np.random.default_rng(14)
        state = to_padded(emu.layout, rng.normal(size=(6, 6, elem.num_nodes)))
        out = emu.rhs_padded(state)
        assert check_padding(emu.layout, out)

    def test_padding_zero_through_full_timestep(self):
        # integrate one RK4 step entirely in the padded layout
        mesh = generate_box_mesh((1, 1, 1), (1, 1, 1))
        elem = build_reference_element(2)
        emu = build_emulated_operator(mesh, elem)
        from simtdg.maxwell import CavityMode
        from simtdg.mesh import map_nodes

        mode = CavityMode(1, 1, 1, (1.0, 1.0, 1.0))
        state = to_padded(emu.layout, mode.evaluate(map_nodes(mesh, elem), 0.0))
        assert check_padding(emu.layout, state)
        stepped = rk4_step(state, 0.0, 1e-3, lambda t, u: emu.rhs_padded(u))
        assert check_padding(emu.layout, stepped)

    def test_stats_accumulate_per_stage(self):
        mesh = generate_box_mesh((1, 1, 1), (1, 1, 1))
        elem = build_reference_element(2)
        emu = build_emulated_operator(mesh, elem)
        state = np.zeros((6, emu.layout.field_length))
        emu.rhs_padded(state)
        assert set(emu.stage_stats) == {"gather", "lift", "diff", "assemble"}
        assert emu.total_stats().global_transactions > 0


class TestRk4:
    def test_zero_rhs_keeps_state(self):
        y = np.array([1.0, -2.0, 3.0])
        out = rk4_step(y, 0.0, 0.1, lambda t, u: np.zeros_like(u))
        assert np.array_equal(out, y)

    def test_fourth_order_on_scalar_ode(self):
        lam = -1.3
        y0 = 1.0

        def err(dt):
            y = rk4_step(np.array(y0), 0.0, dt, lambda t, u: lam * u)
            return abs(float(y) - y0 * math.exp(lam * dt))

        ratio = err(0.1) / err(0.05)
        assert ratio == pytest.approx(32.0, rel=0.10)

    def test_linear_change_of_basis_commutes(self):
        rng = np.random.default_rng(15)
        a = rng.normal(size=(4, 4))
        p = rng.normal(size=(4, 4)) + 4.0 * np.eye(4)
        p_inv = np.linalg.inv(p)
        y0 = rng.normal(size=4)
        dt = 0.05

        direct = rk4_step(p @ y0, 0.0, dt, lambda t, u: (p @ a @ p_inv) @ u)
        commuted = p @ rk4_step(y0, 0.0, dt, lambda t, u: a @ u)
        assert np.abs(direct - commuted).max() <= 1e-12 * np.abs(commuted).max()

    def test_rejects_bad_dt(self):
        with pytest.raises(ValueError):
            rk4_step(np.zeros(2), 0.0, 0.0, lambda t, u: u)
