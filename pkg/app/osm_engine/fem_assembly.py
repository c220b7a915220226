# app/osm_engine/fem_assembly.py

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError
from .mesh_decomp import Decomposition, Mesh, NodeClass, NodeKind, classify_nodes

logger = logging.getLogger(__name__)

LoadSpec = Union[Callable[[np.ndarray, np.ndarray], np.ndarray], np.ndarray, float]


class InterfaceVariant(str, Enum):
    """界面质量矩阵的三种形式。"""
    CONSISTENT = "consistent"
    LUMPED = "lumped"
    OVERLUMPED = "overlumped"


def variant_weights(variant: InterfaceVariant, omega: float = 1.0) -> Tuple[float, float]:
    """返回 (一致矩阵权重, 集中矩阵权重)，B^ω = (1-ω)B_cons + ω·B_lump。"""
    variant = InterfaceVariant(variant)
    if variant is InterfaceVariant.CONSISTENT:
        return 1.0, 0.0
    if variant is InterfaceVariant.LUMPED:
        return 0.0, 1.0
    if omega < 0:
        raise InvalidArgumentError(f"过度集中因子 ω 必须非负，收到 ω={omega}。")
    return 1.0 - omega, float(omega)


def diagonal_factor(variant: InterfaceVariant, omega: float = 1.0) -> float:
    """
    B 的对角元与集中矩阵对角元 (p/2)Σ|e| 之比：c = (2/3)(1-ω) + ω。
    """
    w_cons, w_lump = variant_weights(variant, omega)
    return 2.0 * w_cons / 3.0 + w_lump


# ------------------------------------------------------------------------------
# 单元矩阵
# ------------------------------------------------------------------------------

def element_matrices(hx: float, hy: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    矩形 Q1 单元的刚度矩阵与质量矩阵（精确积分），局部顺序 (左下, 右下, 左上, 右上)。
    由一维矩阵的张量积得到。
    """
    stiff_x = np.array([[1.0, -1.0], [-1.0, 1.0]]) / hx
    stiff_y = np.array([[1.0, -1.0], [-1.0, 1.0]]) / hy
    mass_x = np.array([[2.0, 1.0], [1.0, 2.0]]) * hx / 6.0
    mass_y = np.array([[2.0, 1.0], [1.0, 2.0]]) * hy / 6.0
    stiffness = np.kron(mass_y, stiff_x) + np.kron(stiff_y, mass_x)
    mass = np.kron(mass_y, mass_x)
    return stiffness, mass


def dof_index(mesh: Mesh, nodes: np.ndarray) -> np.ndarray:
    """全局节点 -> 局部自由度编号的映射，不在 nodes 中的节点为 -1。"""
    index = np.full(mesh.n_nodes, -1, dtype=np.int64)
    index[nodes] = np.arange(len(nodes))
    return index


def subdomain_dofs(d: Decomposition, i: int) -> np.ndarray:
    """子区域闭包中去掉 ∂Ω 后的节点（即局部自由度），升序。"""
    nodes = d.closure_nodes(i)
    return nodes[~d.mesh.on_boundary[nodes]]


def global_dofs(mesh: Mesh) -> np.ndarray:
    return np.flatnonzero(~mesh.on_boundary)


def _assemble_cells(mesh: Mesh, cells: np.ndarray, eta: float, index: np.ndarray, n: int) -> sp.csr_matrix:
    stiffness, mass = element_matrices(mesh.hx, mesh.hy)
    local = stiffness + eta * mass
    dofs = index[mesh.cell_nodes(cells)]
    rows, cols, vals = [], [], []
    for a in range(4):
        for b in range(4):
            keep = (dofs[:, a] >= 0) & (dofs[:, b] >= 0)
            rows.append(dofs[keep, a])
            cols.append(dofs[keep, b])
            vals.append(np.full(int(keep.sum()), local[a, b]))
    matrix = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return matrix.tocsr()


# ==============================================================================
# --- 子区域矩阵与向量 ---
# ==============================================================================

def assemble_interior(d: Decomposition, i: int, eta: float) -> sp.csr_matrix:
    """A_i = η·质量 + 刚度，只在子区域拥有的单元上积分，行列限于非 ∂Ω 节点。"""
    if eta < 0:
        raise InvalidArgumentError(f"反应系数 η 必须非负，收到 η={eta}。")
    nodes = subdomain_dofs(d, i)
    return _assemble_cells(d.mesh, d.subdomain_cells(i), eta, dof_index(d.mesh, nodes), len(nodes))


def assemble_interface(
        d: Decomposition,
        i: int,
        p: float,
        variant: InterfaceVariant,
        omega: float = 1.0,
        pair: int | None = None,
        reduced: bool = True,
) -> sp.csr_matrix:
    """
    子区域 i 的界面质量矩阵。

    :param pair: 给定时只取与子区域 pair 共享的边（成对界面矩阵 B_{i,pair}）。
    :param reduced: True 时按局部自由度编号（消去 ∂Ω 节点）；
                    False 时返回按全局节点编号的完整矩阵，保留与 ∂Ω 节点的耦合。
    """
    if not p > 0:
        raise InvalidArgumentError(f"Robin 参数 p 必须为正，收到 p={p}。")
    w_cons, w_lump = variant_weights(variant, omega)
    edges = d.interface_edges
    mine = (edges.sub_a == i) | (edges.sub_b == i)
    if pair is not None:
        other = np.where(edges.sub_a == i, edges.sub_b, edges.sub_a)
        mine &= other == pair

    first, second, length = edges.first[mine], edges.second[mine], edges.length[mine]
    diag = p * length * (w_cons / 3.0 + w_lump / 2.0)
    off = p * length * w_cons / 6.0
    rows = np.concatenate([first, second, first, second])
    cols = np.concatenate([first, second, second, first])
    vals = np.concatenate([diag, diag, off, off])

    if reduced:
        nodes = subdomain_dofs(d, i)
        index = dof_index(d.mesh, nodes)
        rows, cols = index[rows], index[cols]
        keep = (rows >= 0) & (cols >= 0)
        rows, cols, vals, n = rows[keep], cols[keep], vals[keep], len(nodes)
    else:
        n = d.mesh.n_nodes
    matrix = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    matrix.eliminate_zeros()
    return matrix


_GAUSS_POINTS = np.array([-1.0, 1.0]) / np.sqrt(3.0)


def _cell_loads(mesh: Mesh, cells: np.ndarray, f: Callable) -> np.ndarray:
    """2×2 Gauss 积分得到每个单元对四个顶点的载荷贡献，形状 (len(cells), 4)。"""
    corners = mesh.cell_nodes(cells)
    x0, y0 = mesh.coords[corners[:, 0], 0], mesh.coords[corners[:, 0], 1]
    weight = mesh.hx * mesh.hy / 4.0
    loads = np.zeros((len(cells), 4))
    for xi in _GAUSS_POINTS:
        for zeta in _GAUSS_POINTS:
            s, t = (1.0 + xi) / 2.0, (1.0 + zeta) / 2.0
            shape = np.array([(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t])
            x, y = x0 + s * mesh.hx, y0 + t * mesh.hy
            values = np.broadcast_to(np.asarray(f(x, y), dtype=float), x.shape)
            loads += weight * values[:, None] * shape[None, :]
    return loads


def _as_callable(f: LoadSpec) -> Callable:
    if callable(f):
        return f
    value = float(f)
    return lambda x, y: np.full_like(x, value)


def assemble_load(d: Decomposition, i: int, f: LoadSpec) -> np.ndarray:
    """
    子区域载荷 f_i。
    f 可以是函数 f(x, y)（在拥有的单元上做 2×2 Gauss 积分），
    也可以是长度为节点总数的全局已组装向量（按相邻单元的归属比例拆分，Σ_i f_{i;j} = f_j）。
    """
    mesh = d.mesh
    nodes = subdomain_dofs(d, i)
    if isinstance(f, np.ndarray) and f.ndim == 1:
        if len(f) != mesh.n_nodes:
            raise InvalidArgumentError(f"全局载荷向量长度应为 {mesh.n_nodes}，收到 {len(f)}。")
        all_corners = mesh.cell_nodes(np.arange(mesh.n_cells)).ravel()
        own_corners = mesh.cell_nodes(d.subdomain_cells(i)).ravel()
        total = np.bincount(all_corners, minlength=mesh.n_nodes)
        own = np.bincount(own_corners, minlength=mesh.n_nodes)
        return f[nodes] * own[nodes] / total[nodes]

    cells = d.subdomain_cells(i)
    loads = _cell_loads(mesh, cells, _as_callable(f))
    nodal = np.bincount(mesh.cell_nodes(cells).ravel(), weights=loads.ravel(), minlength=mesh.n_nodes)
    return nodal[nodes]


def assemble_global(d: Decomposition, eta: float, f: LoadSpec) -> Tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
    """单区域（全局）系统：返回 (A, F, 自由度节点)。"""
    mesh = d.mesh
    nodes = global_dofs(mesh)
    cells = np.arange(mesh.n_cells)
    matrix = _assemble_cells(mesh, cells, eta, dof_index(mesh, nodes), len(nodes))
    if isinstance(f, np.ndarray) and f.ndim == 1:
        load = f[nodes]
    else:
        loads = _cell_loads(mesh, cells, _as_callable(f))
        load = np.bincount(mesh.cell_nodes(cells).ravel(), weights=loads.ravel(), minlength=mesh.n_nodes)[nodes]
    return matrix, load, nodes


# ==============================================================================
# --- 子区域系统 ---
# ==============================================================================

@dataclass(frozen=True, eq=False)
class SubdomainSystem:
    """
    子区域 i 上的离散问题 (A_i + B_i) u_i = f_i + g_i。
    nodes 为局部自由度对应的全局节点号；boundary 为子区域边界（界面与交叉点）节点的局部编号。
    pair_matrices[i'] 为只含与 i' 共享边的成对界面矩阵，满足 B = Σ_{i'} B_{i,i'}。
    """
    index: int
    nodes: np.ndarray
    A: sp.csr_matrix
    B: sp.csr_matrix
    f: np.ndarray
    p: float
    eta: float
    omega: float
    variant: InterfaceVariant
    boundary: np.ndarray
    pair_matrices: Dict[int, sp.csr_matrix] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def lhs(self) -> sp.csr_matrix:
        return (self.A + self.B).tocsr()

    def local_index(self, node: int) -> int:
        position = int(np.searchsorted(self.nodes, node))
        if position >= len(self.nodes) or self.nodes[position] != node:
            raise KeyError(node)
        return position


def build_subdomain_system(
        d: Decomposition,
        i: int,
        p: float,
        eta: float,
        variant: InterfaceVariant,
        omega: float,
        f: LoadSpec,
        node_class: NodeClass | None = None,
) -> SubdomainSystem:
    node_class = node_class or classify_nodes(d)
    nodes = subdomain_dofs(d, i)
    kinds = node_class.kind[nodes]
    boundary = np.flatnonzero((kinds == NodeKind.INTERFACE) | (kinds == NodeKind.CROSSPOINT))

    edges = d.interface_edges
    neighbors = sorted(
        set(edges.sub_b[edges.sub_a == i].tolist()) | set(edges.sub_a[edges.sub_b == i].tolist())
    )
    pairs = {int(q): assemble_interface(d, i, p, variant, omega, pair=int(q)) for q in neighbors}
    logger.debug("子区域 %d：%d 个自由度，%d 个边界节点，邻居 %s", i, len(nodes), len(boundary), neighbors)
    return SubdomainSystem(
        index=i,
        nodes=nodes,
        A=assemble_interior(d, i, eta),
        B=assemble_interface(d, i, p, variant, omega),
        f=assemble_load(d, i, f),
        p=float(p),
        eta=float(eta),
        omega=float(omega),
        variant=InterfaceVariant(variant),
        boundary=boundary,
        pair_matrices=pairs,
    )


@dataclass(frozen=True)
class NeumannValues:
    """子区域边界节点上的离散 Neumann 值 𝒩_{i;j}；local 为对应的局部编号。"""
    nodes: np.ndarray
    local: np.ndarray
    values: np.ndarray
    size: int

    def as_dict(self) -> Dict[int, float]:
        return dict(zip(self.nodes.tolist(), self.values.tolist()))

    def dense(self) -> np.ndarray:
        """按局部编号展开成长度 size 的向量，内部节点为零。"""
        out = np.zeros(self.size)
        out[self.local] = self.values
        return out


def discrete_neumann(sys: SubdomainSystem, u_i: np.ndarray) -> NeumannValues:
    """𝒩_{i;j}(u_i) = (A_i u_i)_j - f_{i;j}，j 取子区域边界节点。"""
    residual = sys.A @ u_i - sys.f
    return NeumannValues(nodes=sys.nodes[sys.boundary], local=sys.boundary,
                         values=residual[sys.boundary], size=sys.size)


def ventcell_stencil_defect(d: Decomposition, i: int, p: float, omega: float,
                            node_class: NodeClass | None = None) -> float:
    """
    在远离交叉点的直线均匀界面行上，检查 B^ω - B^cons = ω(ph/6)·tridiag(-1, 2, -1)，
    返回最大偏差。
    """
    node_class = node_class or classify_nodes(d)
    difference = (assemble_interface(d, i, p, InterfaceVariant.OVERLUMPED, omega, reduced=False)
                  - assemble_interface(d, i, p, InterfaceVariant.CONSISTENT, reduced=False)).tocsr()
    edges = d.interface_edges
    mine = (edges.sub_a == i) | (edges.sub_b == i)

    defect = 0.0
    for node in np.flatnonzero(node_class.kind == NodeKind.INTERFACE):
        if i not in node_class.incident[node]:
            continue
        at_node = mine & ((edges.first == node) | (edges.second == node))
        lengths = edges.length[at_node]
        if len(lengths) != 2 or lengths[0] != lengths[1]:
            continue
        h = lengths[0]
        neighbors = np.where(edges.first[at_node] == node, edges.second[at_node], edges.first[at_node])
        expected = {int(node): 2.0 * omega * p * h / 6.0}
        expected.update({int(q): -omega * p * h / 6.0 for q in neighbors})
        row = difference.getrow(node)
        actual = dict(zip(row.indices.tolist(), row.data.tolist()))
        for col in set(expected) | set(actual):
            defect = max(defect, abs(actual.get(col, 0.0) - expected.get(col, 0.0)))
    return defect
