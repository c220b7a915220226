# app/osm_engine/transmission.py

"""
交叉点处的两种传输策略：
辅助变量法：每个有向子区域对 (i, i') 在共享节点上各自存储一份 Robin 数据 g_{i,i';j}；
完全通信法：每个子区域在每个边界节点上存一份 g_{i;j}，交叉点处用 A_D、A_N 做局部线性更新。
远离交叉点时两者都退化为标准的两子区域 Robin 更新。
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation, InvalidArgumentError, ProtocolError
from .fem_assembly import InterfaceVariant, SubdomainSystem, diagonal_factor, discrete_neumann, variant_weights
from .graph_split import FlowGraph, project_zero_sum, split_flow
from .mesh_decomp import CrossPointTopology, Decomposition, NodeClass, NodeKind

logger = logging.getLogger(__name__)


class TransmissionMethod(str, Enum):
    AUXILIARY = "auxiliary"
    COMPLETE = "complete"


# ==============================================================================
# --- 两子区域 Robin 更新 ---
# ==============================================================================

def lumped_dirichlet(u, edge_length_sum, p: float):
    """集中形式的 Dirichlet 项 (p/2)·u·Σ|e|。"""
    return 0.5 * p * np.asarray(u) * np.asarray(edge_length_sum)


def robin_update_edge(u_neighbor, g_neighbor, edge_length_sum, p: float, message=None,
                      node_kind: NodeKind | None = None):
    """
    g_{i;j} = -g_{i';j} + 2·(p/2)·u_{i';j}·Σ|e|。

    :param message: 邻居发来的 Dirichlet 项 (B_{i,i'} u_{i'})_j；给定时替代集中形式，
                    一致/过度集中矩阵下必须用它才能保持单区域解为不动点。
    """
    if node_kind is not None and NodeKind(node_kind) is NodeKind.CROSSPOINT:
        raise ContractViolation("robin_update_edge 不能用于交叉点。")
    dirichlet = lumped_dirichlet(u_neighbor, edge_length_sum, p) if message is None else np.asarray(message)
    return -np.asarray(g_neighbor) + 2.0 * dirichlet


# ==============================================================================
# --- 有向迹槽位（两种方法共用的 Dirichlet 消息） ---
# ==============================================================================

@dataclass(frozen=True, eq=False)
class DirectedSlots:
    """
    每个槽位对应一个 (接收方 i, 发送方 i', 节点 j)，只在 𝒙_j 出发的某条边同为 𝒯_i、𝒯_{i'} 边界边时存在。
    weight 为这些共享边的长度和；reverse 指向 (i', i, j) 槽位。
    messages[q] 的各行与 out_slots[q] 对齐：第 k 行是成对界面矩阵 B_{q,r} 在节点 j 处的行，
    作用于 u_q 得到发往 r 的 Dirichlet 消息。
    """
    recv: np.ndarray
    send: np.ndarray
    node: np.ndarray
    recv_local: np.ndarray
    send_local: np.ndarray
    reverse: np.ndarray
    weight: np.ndarray
    out_position: np.ndarray
    in_slots: Dict[int, np.ndarray]
    out_slots: Dict[int, np.ndarray]
    messages: Dict[int, sp.csr_matrix]
    sizes: Dict[int, int]

    def __len__(self) -> int:
        return len(self.recv)

    def message_values(self, solutions: Dict[int, np.ndarray]) -> np.ndarray:
        values = np.zeros(len(self))
        for q, out in self.out_slots.items():
            if len(out):
                values[out] = self.messages[q] @ solutions[q]
        return values

    def slots_by_node(self) -> Dict[int, np.ndarray]:
        groups: Dict[int, List[int]] = defaultdict(list)
        for s, node in enumerate(self.node.tolist()):
            groups[node].append(s)
        return {node: np.array(slots) for node, slots in groups.items()}


def build_directed_slots(d: Decomposition, systems: Dict[int, SubdomainSystem]) -> DirectedSlots:
    edges = d.interface_edges
    on_boundary = d.mesh.on_boundary
    weights: Dict[Tuple[int, int, int], float] = defaultdict(float)
    for first, second, length, a, b in zip(edges.first.tolist(), edges.second.tolist(),
                                           edges.length.tolist(), edges.sub_a.tolist(), edges.sub_b.tolist()):
        for node in (first, second):
            if not on_boundary[node]:
                weights[(node, a, b)] += length

    entries = []
    for (node, a, b), weight in weights.items():
        entries.append((a, node, b, weight))
        entries.append((b, node, a, weight))
    entries.sort()

    n = len(entries)
    recv = np.array([e[0] for e in entries], dtype=np.int64)
    node = np.array([e[1] for e in entries], dtype=np.int64)
    send = np.array([e[2] for e in entries], dtype=np.int64)
    weight = np.array([e[3] for e in entries], dtype=float)
    position = {(r, j, s): k for k, (r, j, s, _) in enumerate(entries)}
    reverse = np.array([position[(s, j, r)] for (r, j, s, _) in entries], dtype=np.int64)
    recv_local = np.array([systems[r].local_index(j) for (r, j, _, _) in entries], dtype=np.int64)
    send_local = np.array([systems[s].local_index(j) for (_, j, s, _) in entries], dtype=np.int64)

    in_slots = {i: np.flatnonzero(recv == i) for i in systems}
    out_slots = {i: np.flatnonzero(send == i) for i in systems}
    out_position = np.zeros(n, dtype=np.int64)
    messages = {}
    for q, out in out_slots.items():
        out_position[out] = np.arange(len(out))
        rows = [systems[q].pair_matrices[int(recv[s])][int(send_local[s])] for s in out]
        messages[q] = (sp.vstack(rows).tocsr() if rows else sp.csr_matrix((0, systems[q].size)))

    logger.debug("建立 %d 个有向迹槽位", n)
    return DirectedSlots(
        recv=recv, send=send, node=node, recv_local=recv_local, send_local=send_local,
        reverse=reverse, weight=weight, out_position=out_position,
        in_slots=in_slots, out_slots=out_slots, messages=messages,
        sizes={i: sys.size for i, sys in systems.items()},
    )


# ==============================================================================
# --- 辅助变量法 ---
# ==============================================================================

@dataclass(frozen=True, eq=False)
class TraceStateAux:
    """辅助变量法的迹状态：values[s] = g_{recv, send; node}，两个方向独立存储。"""
    slots: DirectedSlots
    values: np.ndarray

    def with_values(self, values: np.ndarray) -> "TraceStateAux":
        return replace(self, values=values)


def aux_gather(ts: TraceStateAux, i: int) -> np.ndarray:
    """g_{i;j} = Σ_{i'} g_{i,i';j}，内部节点为零。"""
    incoming = ts.slots.in_slots[i]
    values = ts.values[incoming]
    if np.isnan(values).any():
        missing = ts.slots.send[incoming][np.isnan(values)]
        raise ProtocolError(f"子区域 {i} 缺少来自 {sorted(set(missing.tolist()))} 的迹值（交换被跳过）。")
    return np.bincount(ts.slots.recv_local[incoming], weights=values, minlength=ts.slots.sizes[i])


def aux_update(ts: TraceStateAux, i: int, u_i: np.ndarray) -> np.ndarray:
    """
    子区域 i 求解后发出的新值 g_{i',i;j} = -g_{i,i';j} + 2(B_{i,i'} u_i)_j，
    与 ts.slots.out_slots[i] 对齐。集中矩阵下即 -g_{i,i';j} + 2·(p/2)·u_{i;j}·Σ|e|。
    """
    out = ts.slots.out_slots[i]
    return -ts.values[ts.slots.reverse[out]] + 2.0 * (ts.slots.messages[i] @ u_i)


def aux_neumann_split(ts: TraceStateAux, i: int, u_i: np.ndarray) -> np.ndarray:
    """𝒩_{i,i';j} = g_{i,i';j} - (B_{i,i'} u_i)_j，与 in_slots[i] 对齐，其和等于 𝒩_{i;j}(u_i)。"""
    incoming = ts.slots.in_slots[i]
    own = ts.slots.messages[i] @ u_i
    return ts.values[incoming] - own[ts.slots.out_position[ts.slots.reverse[incoming]]]


def interface_energy(ts: TraceStateAux, p: float) -> float:
    """
    E = Σ |g_{i,i';j}|² / (2p·Σ|e|)。
    只有集中界面矩阵 (ω = 1) 下 E 才随迭代单调不增；一致与过度集中矩阵下仅作参考。
    """
    return float(np.sum(ts.values ** 2 / (2.0 * p * ts.slots.weight)))


def random_aux_state(slots: DirectedSlots, rng: np.random.Generator) -> TraceStateAux:
    return TraceStateAux(slots=slots, values=rng.uniform(-1.0, 1.0, size=len(slots)))


def aux_fixed_point_state(slots: DirectedSlots, systems: Dict[int, SubdomainSystem],
                          solutions: Dict[int, np.ndarray]) -> TraceStateAux:
    """
    由单区域解构造不动点迹：在每个共享节点上以共享边关系建图，
    顶点值 φ(i) = 𝒩_{i;j}(u_i)，分解出反对称的 ψ，再令 g_{i,i';j} = ψ(i,i') + (B_{i,i'} u_i)_j。
    """
    residuals = {i: discrete_neumann(systems[i], solutions[i]).dense() for i in systems}
    own_messages = slots.message_values(solutions)
    values = np.empty(len(slots))
    for node, group in slots.slots_by_node().items():
        subdomains = sorted(set(slots.recv[group].tolist()))
        phi = [residuals[i][systems[i].local_index(node)] for i in subdomains]
        graph = FlowGraph.from_edges(
            subdomains,
            {tuple(sorted((int(slots.recv[s]), int(slots.send[s])))) for s in group},
            project_zero_sum(phi),
        )
        psi = split_flow(graph)
        for s in group:
            r, q = int(slots.recv[s]), int(slots.send[s])
            values[s] = psi[(r, q)] + own_messages[slots.reverse[s]]
    return TraceStateAux(slots=slots, values=values)


# ==============================================================================
# --- 完全通信法：Neumann 分裂与交叉点算子 ---
# ==============================================================================

def neumann_split_mu(I: int) -> np.ndarray:
    """L† 的首行生成元 μ_i = (I-1-2i)/(2I)，满足 Σμ = 0。"""
    if I < 3:
        raise InvalidArgumentError(f"交叉点至少有 3 个子区域，收到 I={I}。")
    i = np.arange(I)
    return (I - 1 - 2 * i) / (2.0 * I)


def circulant_L(I: int) -> np.ndarray:
    """L = circ(1, -1, 0, ..., 0)：(L a)_i = a_i - a_{i+1}。"""
    return np.eye(I) - np.roll(np.eye(I), 1, axis=1)


def apply_A_N(N) -> np.ndarray:
    """(A_N 𝒩)_i = 𝒩_i - (2/I)·Σ𝒩，与循环顺序无关。"""
    N = np.asarray(N, dtype=float)
    if N.size < 3:
        raise InvalidArgumentError(f"交叉点至少有 3 个子区域，收到 I={N.size}。")
    return N - (2.0 / N.size) * N.sum()


def apply_A_N_by_splitting(N, mu: np.ndarray | None = None) -> np.ndarray:
    """
    显式分裂路径：a = L†𝒩 为 𝒩⁻，𝒩⁺ = 𝒩 - a，
    (A_N 𝒩)_i = -𝒩⁻_{i+1} - 𝒩⁺_{i-1}。
    """
    N = np.asarray(N, dtype=float)
    I = N.size
    mu = neumann_split_mu(I) if mu is None else mu
    offsets = (np.arange(I)[None, :] - np.arange(I)[:, None]) % I
    minus = mu[offsets] @ N
    plus = N - minus
    return -np.roll(minus, -1) - np.roll(plus, 1)


def build_A_D(topo: CrossPointTopology, p: float) -> np.ndarray:
    """(A_D)_{ii'} = (p/2)·Σ_{i、i' 共享的辐边}|e|，对角为零；行列按循环顺序。"""
    order = topo.subdomains
    A_D = np.zeros((len(order), len(order)))
    for a_pos, a in enumerate(order):
        for b_pos, b in enumerate(order):
            if a != b:
                A_D[a_pos, b_pos] = 0.5 * p * topo.pair_length(a, b)
    return A_D


@dataclass(frozen=True, eq=False)
class CrossPointOperators:
    """
    交叉点上的局部线性更新 g = A_D·u + A_N·𝒩 + S·v。
    A_D 已乘以界面矩阵形式的对角因子；S 把邻居在辐边远端的取值 v 耦合进来
    （一致矩阵的非对角项 (1-ω)(p/6)|e|，集中矩阵时为零）。
    far[k] = (远端节点, 发送方子区域)，与 S 的第 k 列对齐。
    """
    node: int
    order: Tuple[int, ...]
    A_D: np.ndarray
    S: np.ndarray
    far: Tuple[Tuple[int, int], ...]

    @property
    def size(self) -> int:
        return len(self.order)


def build_crosspoint_operators(topo: CrossPointTopology, p: float, variant: InterfaceVariant,
                               omega: float = 1.0, p_crosspoint: float | None = None) -> CrossPointOperators:
    p_cp = p if p_crosspoint is None else p_crosspoint
    w_cons, _ = variant_weights(variant, omega)
    position = {sub: k for k, sub in enumerate(topo.subdomains)}

    far, columns = [], []
    for (a, b), spokes in topo.shared_edges.items():
        for far_node, length in spokes:
            for receiver, sender in ((a, b), (b, a)):
                column = np.zeros(topo.size)
                column[position[receiver]] = w_cons * p_cp * length / 6.0
                columns.append(column)
                far.append((far_node, sender))
    S = np.column_stack(columns) if columns else np.zeros((topo.size, 0))
    return CrossPointOperators(
        node=topo.node,
        order=topo.subdomains,
        A_D=diagonal_factor(variant, omega) * build_A_D(topo, p_cp),
        S=S,
        far=tuple(far),
    )


def cc_crosspoint_update(ops: CrossPointOperators, u, N, v=None) -> np.ndarray:
    u, N = np.asarray(u, dtype=float), np.asarray(N, dtype=float)
    if u.shape != (ops.size,) or N.shape != (ops.size,):
        raise ContractViolation(f"交叉点 {ops.node} 需要长度为 {ops.size} 的 u 与 𝒩，收到 {u.shape}、{N.shape}。")
    g = ops.A_D @ u + apply_A_N(N)
    if v is not None:
        v = np.asarray(v, dtype=float)
        if v.shape != (ops.S.shape[1],):
            raise ContractViolation(f"交叉点 {ops.node} 的远端取值长度应为 {ops.S.shape[1]}，收到 {v.shape}。")
        g = g + ops.S @ v
    return g


# ==============================================================================
# --- 完全通信法：迹状态 ---
# ==============================================================================

@dataclass(frozen=True, eq=False)
class CrossPointBlock:
    ops: CrossPointOperators
    slots: np.ndarray          # 按循环顺序排列的 cc 槽位
    far_local: np.ndarray      # 远端节点在发送方中的局部编号，∂Ω 上为 -1


@dataclass(frozen=True, eq=False)
class CCLayout:
    """
    每个 (子区域 i, 边界节点 j) 一个槽位。
    界面节点上的槽位记录其伙伴槽位与对应的有向槽位（用于 Dirichlet 消息）；
    交叉点上的槽位归入 CrossPointBlock。
    """
    sub: np.ndarray
    node: np.ndarray
    local: np.ndarray
    by_sub: Dict[int, np.ndarray]
    sizes: Dict[int, int]
    directed: DirectedSlots
    interface_slots: np.ndarray
    interface_partner: np.ndarray
    interface_directed: np.ndarray
    crosspoints: Tuple[CrossPointBlock, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.sub)


def build_cc_layout(
        systems: Dict[int, SubdomainSystem],
        directed: DirectedSlots,
        node_class: NodeClass,
        topologies: Sequence[CrossPointTopology],
        p: float,
        variant: InterfaceVariant,
        omega: float = 1.0,
        p_crosspoint: float | None = None,
) -> CCLayout:
    entries = sorted(
        (i, int(sys.nodes[k]), int(k)) for i, sys in systems.items() for k in sys.boundary
    )
    sub = np.array([e[0] for e in entries], dtype=np.int64)
    node = np.array([e[1] for e in entries], dtype=np.int64)
    local = np.array([e[2] for e in entries], dtype=np.int64)
    position = {(i, j): k for k, (i, j, _) in enumerate(entries)}

    iface, partner, via = [], [], []
    for s in range(len(directed)):
        j = int(directed.node[s])
        if node_class.kind[j] != NodeKind.INTERFACE:
            continue
        r, q = int(directed.recv[s]), int(directed.send[s])
        iface.append(position[(r, j)])
        partner.append(position[(q, j)])
        via.append(s)

    blocks = []
    for topo in topologies:
        ops = build_crosspoint_operators(topo, p, variant, omega, p_crosspoint)
        far_local = []
        for far_node, sender in ops.far:
            index = systems[sender].nodes
            k = int(np.searchsorted(index, far_node))
            far_local.append(k if k < len(index) and index[k] == far_node else -1)
        blocks.append(CrossPointBlock(
            ops=ops,
            slots=np.array([position[(i, topo.node)] for i in topo.subdomains], dtype=np.int64),
            far_local=np.array(far_local, dtype=np.int64),
        ))

    return CCLayout(
        sub=sub, node=node, local=local,
        by_sub={i: np.flatnonzero(sub == i) for i in systems},
        sizes={i: sys.size for i, sys in systems.items()},
        directed=directed,
        interface_slots=np.array(iface, dtype=np.int64),
        interface_partner=np.array(partner, dtype=np.int64),
        interface_directed=np.array(via, dtype=np.int64),
        crosspoints=tuple(blocks),
    )


@dataclass(frozen=True, eq=False)
class TraceStateCC:
    """完全通信法的迹状态：values[s] = g_{sub[s]; node[s]}。"""
    layout: CCLayout
    values: np.ndarray

    def with_values(self, values: np.ndarray) -> "TraceStateCC":
        return replace(self, values=values)


def cc_gather(ts: TraceStateCC, i: int) -> np.ndarray:
    slots = ts.layout.by_sub[i]
    values = ts.values[slots]
    if np.isnan(values).any():
        raise ProtocolError(f"子区域 {i} 的迹值缺失。")
    g = np.zeros(ts.layout.sizes[i])
    g[ts.layout.local[slots]] = values
    return g


def _slot_values(layout: CCLayout, per_sub: Dict[int, np.ndarray]) -> np.ndarray:
    values = np.empty(len(layout))
    for i, slots in layout.by_sub.items():
        values[slots] = per_sub[i][layout.local[slots]]
    return values


def cc_update(ts: TraceStateCC, solutions: Dict[int, np.ndarray],
              residuals: Dict[int, np.ndarray], p: float) -> np.ndarray:
    """
    全部子区域求解完成后计算下一组迹：界面节点走两子区域 Robin 更新，
    交叉点走 A_D·u + A_N·𝒩 + S·v。residuals[i] = A_i u_i - f_i。
    """
    layout = ts.layout
    new = np.empty_like(ts.values)
    u_slots = _slot_values(layout, solutions)
    n_slots = _slot_values(layout, residuals)

    if len(layout.interface_slots):
        messages = layout.directed.message_values(solutions)
        via = layout.interface_directed
        new[layout.interface_slots] = robin_update_edge(
            u_slots[layout.interface_partner],
            ts.values[layout.interface_partner],
            layout.directed.weight[via],
            p,
            message=messages[via],
        )

    for block in layout.crosspoints:
        v = np.array([
            solutions[sender][k] if k >= 0 else 0.0
            for (_, sender), k in zip(block.ops.far, block.far_local.tolist())
        ])
        new[block.slots] = cc_crosspoint_update(block.ops, u_slots[block.slots], n_slots[block.slots], v)
    return new


def random_cc_state(layout: CCLayout, rng: np.random.Generator) -> TraceStateCC:
    return TraceStateCC(layout=layout, values=rng.uniform(-1.0, 1.0, size=len(layout)))


def cc_fixed_point_state(layout: CCLayout, systems: Dict[int, SubdomainSystem],
                         solutions: Dict[int, np.ndarray]) -> TraceStateCC:
    """g_{i;j} = 𝒩_{i;j}(u_i) + (B_i u_i)_j。"""
    traces = {i: discrete_neumann(systems[i], solutions[i]).dense() + systems[i].B @ solutions[i]
              for i in systems}
    return TraceStateCC(layout=layout, values=_slot_values(layout, traces))
