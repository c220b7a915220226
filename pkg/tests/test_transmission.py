# tests/test_transmission.py

import numpy as np
import pytest

from app.osm_engine.errors import ContractViolation, InvalidArgumentError, ProtocolError
from app.osm_engine.fem_assembly import InterfaceVariant, build_subdomain_system
from app.osm_engine.mesh_decomp import (CrossPointTopology, NodeKind, build_cartesian_mesh, classify_nodes,
                                        crosspoint_topology, decompose)
from app.osm_engine.sparse_linalg import circulant_from_row, pseudo_inverse
from app.osm_engine.transmission import (TraceStateAux, apply_A_N, apply_A_N_by_splitting, aux_gather,
                                         aux_update, build_A_D, build_crosspoint_operators,
                                         build_directed_slots, cc_crosspoint_update, circulant_L,
                                         interface_energy, lumped_dirichlet, neumann_split_mu,
                                         random_aux_state, robin_update_edge)


def _slots(nx=4, ny=4, px=2, py=2, variant=InterfaceVariant.LUMPED, omega=1.0):
    d = decompose(build_cartesian_mesh(nx, ny, float(nx), float(ny)), px, py)
    classes = classify_nodes(d)
    systems = {i: build_subdomain_system(d, i, 2.0, 0.0, variant, omega, 0.0, classes)
               for i in range(1, d.n_subdomains + 1)}
    return d, systems, build_directed_slots(d, systems)


# ------------------------------------------------------------------------------
# 两子区域 Robin 更新
# ------------------------------------------------------------------------------

def test_robin_update_lumped_form():
    # g = -g' + 2·(p/2)·u'·Σ|e| = -0.5 + 2·1·3·0.2
    assert robin_update_edge(3.0, 0.5, 0.2, 2.0) == pytest.approx(0.7)
    assert lumped_dirichlet(3.0, 0.2, 2.0) == pytest.approx(0.6)


def test_robin_update_with_message():
    assert robin_update_edge(3.0, 0.5, 0.2, 2.0, message=0.4) == pytest.approx(0.3)


def test_robin_update_rejects_crosspoint():
    with pytest.raises(ContractViolation):
        robin_update_edge(1.0, 1.0, 1.0, 1.0, node_kind=NodeKind.CROSSPOINT)


# ------------------------------------------------------------------------------
# Neumann 分裂
# ------------------------------------------------------------------------------

@pytest.mark.parametrize("I", range(3, 9))
def test_mu_matches_pseudo_inverse(I):
    pinv = pseudo_inverse(circulant_L(I))
    np.testing.assert_allclose(circulant_from_row(neumann_split_mu(I)), pinv, atol=1e-12)
    np.testing.assert_allclose(neumann_split_mu(I).sum(), 0.0, atol=1e-15)


@pytest.mark.parametrize("I", range(3, 9))
def test_pseudo_inverse_projects_onto_zero_mean(I):
    L = circulant_L(I)
    L_pinv = circulant_from_row(neumann_split_mu(I))
    projector = np.eye(I) - np.ones((I, I)) / I
    np.testing.assert_allclose(L_pinv @ L, projector, atol=1e-12)


def test_mu_requires_three_subdomains():
    with pytest.raises(InvalidArgumentError):
        neumann_split_mu(2)


def test_A_N_closed_form_matches_splitting():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        I = int(rng.integers(3, 9))
        N = rng.uniform(-1.0, 1.0, I)
        np.testing.assert_allclose(apply_A_N(N), apply_A_N_by_splitting(N), atol=1e-13)


def test_A_N_on_four_subdomains():
    N = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(apply_A_N(N), N - 5.0)
    # 总和为零时 A_N 即恒等映射
    np.testing.assert_allclose(apply_A_N(N - N.mean()), N - N.mean())


# ------------------------------------------------------------------------------
# 交叉点算子
# ------------------------------------------------------------------------------

def test_A_D_on_two_by_two_crosspoint():
    d = decompose(build_cartesian_mesh(2, 2, 2.0, 2.0), 2, 2)
    topo = crosspoint_topology(d, 4)
    A_D = build_A_D(topo, 2.0)
    # 循环顺序 (4, 3, 1, 2)：相邻两个子区域共享一条长度为 1 的辐边，对角相对的不共享
    expected = np.array([[0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0]], dtype=float)
    np.testing.assert_allclose(A_D, expected)


def test_A_D_on_pentagon():
    # 五个子区域围成一圈，长度各不相同
    topo = CrossPointTopology(
        node=0,
        subdomains=(1, 2, 3, 4, 5),
        shared_edges={(1, 2): ((10, 1.0),), (2, 3): ((11, 2.0),), (3, 4): ((12, 3.0),),
                      (4, 5): ((13, 4.0),), (1, 5): ((14, 5.0),)},
    )
    A_D = build_A_D(topo, 4.0)
    assert A_D[0, 1] == pytest.approx(2.0)
    assert A_D[0, 4] == pytest.approx(10.0)
    assert A_D[1, 3] == 0.0
    np.testing.assert_allclose(A_D, A_D.T)
    np.testing.assert_allclose(np.diag(A_D), 0.0)


def test_crosspoint_operators_scale_with_variant():
    d = decompose(build_cartesian_mesh(2, 2, 2.0, 2.0), 2, 2)
    topo = crosspoint_topology(d, 4)
    lumped = build_crosspoint_operators(topo, 2.0, InterfaceVariant.LUMPED)
    consistent = build_crosspoint_operators(topo, 2.0, InterfaceVariant.CONSISTENT)
    np.testing.assert_allclose(consistent.A_D, 2.0 / 3.0 * lumped.A_D)
    assert not np.any(lumped.S)
    # 每条辐边对两侧各一列，权重 p|e|/6
    assert consistent.S.shape == (4, 8)
    np.testing.assert_allclose(consistent.S.sum(axis=0), 2.0 / 6.0)


def test_crosspoint_update_with_zero_sum_neumann():
    d = decompose(build_cartesian_mesh(2, 2, 2.0, 2.0), 2, 2)
    ops = build_crosspoint_operators(crosspoint_topology(d, 4), 2.0, InterfaceVariant.LUMPED)
    u = np.full(4, 0.5)
    N = np.array([1.0, -1.0, 2.0, -2.0])
    np.testing.assert_allclose(cc_crosspoint_update(ops, u, N), ops.A_D @ u + N)
    with pytest.raises(ContractViolation):
        cc_crosspoint_update(ops, np.zeros(3), np.zeros(3))
    with pytest.raises(ContractViolation):
        cc_crosspoint_update(ops, u, N, v=np.zeros(2))


def test_crosspoint_override_p():
    d = decompose(build_cartesian_mesh(2, 2, 2.0, 2.0), 2, 2)
    topo = crosspoint_topology(d, 4)
    ops = build_crosspoint_operators(topo, 2.0, InterfaceVariant.LUMPED, p_crosspoint=6.0)
    np.testing.assert_allclose(ops.A_D, build_A_D(topo, 6.0))


# ------------------------------------------------------------------------------
# 有向槽位与辅助变量
# ------------------------------------------------------------------------------

def test_directed_slots_are_paired():
    _, _, slots = _slots()
    assert len(slots) > 0
    np.testing.assert_array_equal(slots.reverse[slots.reverse], np.arange(len(slots)))
    np.testing.assert_array_equal(slots.recv[slots.reverse], slots.send)
    np.testing.assert_array_equal(slots.node[slots.reverse], slots.node)


def test_degenerate_slots():
    _, _, slots = _slots(2, 2, 2, 2)
    # 交叉点处四对相邻子区域，每对两个方向
    assert len(slots) == 8
    np.testing.assert_allclose(slots.weight, 1.0)


def test_lumped_messages_match_lumped_formula():
    d, systems, slots = _slots(6, 6, 3, 3)
    rng = np.random.default_rng(1)
    solutions = {i: rng.standard_normal(sys.size) for i, sys in systems.items()}
    messages = slots.message_values(solutions)
    expected = [lumped_dirichlet(solutions[int(q)][int(k)], w, 2.0)
                for q, k, w in zip(slots.send, slots.send_local, slots.weight)]
    np.testing.assert_allclose(messages, expected, atol=1e-14)


def test_aux_gather_sums_incoming_traces():
    _, systems, slots = _slots(2, 2, 2, 2)
    ts = TraceStateAux(slots=slots, values=np.arange(1.0, 9.0))
    for i in systems:
        incoming = slots.in_slots[i]
        assert aux_gather(ts, i)[0] == pytest.approx(ts.values[incoming].sum())


def test_aux_gather_detects_missing_trace():
    _, _, slots = _slots(2, 2, 2, 2)
    values = np.ones(len(slots))
    values[slots.in_slots[1][0]] = np.nan
    with pytest.raises(ProtocolError):
        aux_gather(TraceStateAux(slots=slots, values=values), 1)


def test_aux_update_two_subdomains():
    d, systems, slots = _slots(4, 4, 2, 1)
    ts = random_aux_state(slots, np.random.default_rng(5))
    u = {i: np.ones(sys.size) for i, sys in systems.items()}
    new = aux_update(ts, 1, u[1])
    out = slots.out_slots[1]
    # 直线界面上每个节点两条长度为 1 的边，p = 2：Dirichlet 项为 2
    np.testing.assert_allclose(new, -ts.values[slots.reverse[out]] + 2.0 * 2.0)


def test_interface_energy():
    _, _, slots = _slots(2, 2, 2, 2)
    ts = TraceStateAux(slots=slots, values=np.full(len(slots), 2.0))
    assert interface_energy(ts, 2.0) == pytest.approx(8 * 4.0 / 4.0)
    assert interface_energy(ts.with_values(np.zeros(len(slots))), 2.0) == 0.0
