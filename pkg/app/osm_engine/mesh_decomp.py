# app/osm_engine/mesh_decomp.py

import itertools
import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
from typing import Dict, List, Tuple

import networkx as nx
import numpy as np

from .errors import ContractViolation, InvalidArgumentError

logger = logging.getLogger(__name__)


# ==============================================================================
# --- 网格与区域分解的数据结构 ---
# ==============================================================================

class NodeKind(IntEnum):
    """节点分类。"""
    INTERIOR = 0    # 只属于一个子区域
    INTERFACE = 1   # 恰好两个子区域的公共边界
    CROSSPOINT = 2  # 三个及以上子区域相交的内部节点
    BOUNDARY = 3    # 物理边界 ∂Ω，齐次 Dirichlet 消去


@dataclass(frozen=True)
class Mesh:
    """
    矩形 (0,Lx)×(0,Ly) 上的均匀笛卡尔 Q1 网格。
    节点按行优先编号：node = jx + (nx+1)·jy；单元编号 cell = cx + nx·cy。
    """
    nx: int
    ny: int
    Lx: float
    Ly: float

    @property
    def hx(self) -> float:
        return self.Lx / self.nx

    @property
    def hy(self) -> float:
        return self.Ly / self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def node_id(self, jx, jy):
        return jx + (self.nx + 1) * jy

    def node_index(self, node):
        """返回 (jx, jy)。"""
        return node % (self.nx + 1), node // (self.nx + 1)

    def node_coords(self, node) -> Tuple[float, float]:
        jx, jy = self.node_index(node)
        return jx * self.Lx / self.nx, jy * self.Ly / self.ny

    @cached_property
    def coords(self) -> np.ndarray:
        """全部节点坐标，形状 (n_nodes, 2)。"""
        jx, jy = self.node_index(np.arange(self.n_nodes))
        return np.column_stack([jx * self.Lx / self.nx, jy * self.Ly / self.ny])

    @cached_property
    def on_boundary(self) -> np.ndarray:
        jx, jy = self.node_index(np.arange(self.n_nodes))
        return (jx == 0) | (jx == self.nx) | (jy == 0) | (jy == self.ny)

    def cell_nodes(self, cells: np.ndarray) -> np.ndarray:
        """单元的四个顶点，局部顺序 (左下, 右下, 左上, 右上)，形状 (len(cells), 4)。"""
        cx, cy = cells % self.nx, cells // self.nx
        ll = self.node_id(cx, cy)
        return np.column_stack([ll, ll + 1, ll + self.nx + 1, ll + self.nx + 2])


@dataclass(frozen=True)
class InterfaceEdges:
    """两侧单元属于不同子区域的网格边，即同时为 𝒯_a 与 𝒯_b 的边界边 (a < b)。"""
    first: np.ndarray
    second: np.ndarray
    length: np.ndarray
    sub_a: np.ndarray
    sub_b: np.ndarray

    def __len__(self) -> int:
        return len(self.length)


@dataclass(frozen=True, eq=False)
class Decomposition:
    """
    由 px×py 个矩形子区域组成的非重叠分解。
    子区域编号 i = 1 + col + px·row（row 自下而上）。
    """
    mesh: Mesh
    px: int
    py: int
    owner: np.ndarray  # 单元 -> 子区域编号

    @property
    def n_subdomains(self) -> int:
        return self.px * self.py

    @property
    def block(self) -> Tuple[int, int]:
        """每个子区域在 x、y 方向上的单元数。"""
        return self.mesh.nx // self.px, self.mesh.ny // self.py

    def subdomain_position(self, i: int) -> Tuple[int, int]:
        return (i - 1) % self.px, (i - 1) // self.px

    def subdomain_box(self, i: int) -> Tuple[float, float, float, float]:
        col, row = self.subdomain_position(i)
        sx, sy = self.block
        hx, hy = self.mesh.hx, self.mesh.hy
        return col * sx * hx, (col + 1) * sx * hx, row * sy * hy, (row + 1) * sy * hy

    def subdomain_cells(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.owner == i)

    def closure_nodes(self, i: int) -> np.ndarray:
        """子区域闭包内的全部节点（含 ∂Ω 上的节点），升序。"""
        col, row = self.subdomain_position(i)
        sx, sy = self.block
        jx = np.arange(col * sx, (col + 1) * sx + 1)
        jy = np.arange(row * sy, (row + 1) * sy + 1)
        return np.sort(self.mesh.node_id(jx[None, :], jy[:, None]).ravel())

    @cached_property
    def interface_edges(self) -> InterfaceEdges:
        mesh = self.mesh
        owner = self.owner.reshape(mesh.ny, mesh.nx)

        # 水平边 (jx,jy)-(jx+1,jy)，jy = 1..ny-1：下方单元 (jx,jy-1)，上方单元 (jx,jy)
        below, above = owner[:-1, :], owner[1:, :]
        hy_idx, hx_idx = np.nonzero(below != above)
        h_first = mesh.node_id(hx_idx, hy_idx + 1)
        h_a = np.minimum(below[hy_idx, hx_idx], above[hy_idx, hx_idx])
        h_b = np.maximum(below[hy_idx, hx_idx], above[hy_idx, hx_idx])

        # 竖直边 (jx,jy)-(jx,jy+1)，jx = 1..nx-1：左侧单元 (jx-1,jy)，右侧单元 (jx,jy)
        left, right = owner[:, :-1], owner[:, 1:]
        vy_idx, vx_idx = np.nonzero(left != right)
        v_first = mesh.node_id(vx_idx + 1, vy_idx)
        v_a = np.minimum(left[vy_idx, vx_idx], right[vy_idx, vx_idx])
        v_b = np.maximum(left[vy_idx, vx_idx], right[vy_idx, vx_idx])

        return InterfaceEdges(
            first=np.concatenate([h_first, v_first]),
            second=np.concatenate([h_first + 1, v_first + mesh.nx + 1]),
            length=np.concatenate([np.full(len(h_first), mesh.hx), np.full(len(v_first), mesh.hy)]),
            sub_a=np.concatenate([h_a, v_a]),
            sub_b=np.concatenate([h_b, v_b]),
        )


@dataclass(frozen=True, eq=False)
class NodeClass:
    """每个节点的分类以及闭包包含该节点的子区域集合。"""
    kind: np.ndarray
    incident: Tuple[Tuple[int, ...], ...]

    def nodes_of(self, kind: NodeKind) -> np.ndarray:
        return np.flatnonzero(self.kind == kind)

    @property
    def crosspoints(self) -> np.ndarray:
        return self.nodes_of(NodeKind.CROSSPOINT)


@dataclass(frozen=True, eq=False)
class CrossPointTopology:
    """
    交叉点的局部拓扑。
    subdomains 为按质心角逆时针排列的循环顺序；
    shared_edges[(a, b)] (a < b) 为从交叉点出发、同时属于 𝒯_a 与 𝒯_b 边界的辐边，
    每条记录为 (远端节点, 长度)。
    """
    node: int
    subdomains: Tuple[int, ...]
    shared_edges: Dict[Tuple[int, int], Tuple[Tuple[int, float], ...]]

    @property
    def size(self) -> int:
        return len(self.subdomains)

    @property
    def n_spokes(self) -> int:
        return sum(len(edges) for edges in self.shared_edges.values())

    def pair_length(self, a: int, b: int) -> float:
        key = (a, b) if a < b else (b, a)
        return sum(length for _, length in self.shared_edges.get(key, ()))

    def spoke_length(self, i: int) -> float:
        return sum(self.pair_length(*pair) for pair in self.shared_edges if i in pair)

    def neighbors(self, i: int) -> List[int]:
        return sorted(b if a == i else a for (a, b) in self.shared_edges if i in (a, b))

    def pair_graph(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(self.subdomains)
        graph.add_edges_from(self.shared_edges)
        return graph


# ==============================================================================
# --- 构造函数 ---
# ==============================================================================

def build_cartesian_mesh(nx: int, ny: int, Lx: float, Ly: float) -> Mesh:
    """构造 (0,Lx)×(0,Ly) 上 nx×ny 个单元的均匀网格。"""
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise InvalidArgumentError(f"网格单元数必须为正整数，收到 nx={nx}, ny={ny}。")
    if not (Lx > 0 and Ly > 0):
        raise InvalidArgumentError(f"区域尺寸必须为正，收到 Lx={Lx}, Ly={Ly}。")
    return Mesh(int(nx), int(ny), float(Lx), float(Ly))


def decompose(mesh: Mesh, px: int, py: int) -> Decomposition:
    """把网格划分为 px×py 个矩形子区域，子区域边界必须沿网格线。"""
    if px < 1 or py < 1:
        raise InvalidArgumentError(f"子区域数必须为正，收到 {px}x{py}。")
    if mesh.nx % px or mesh.ny % py:
        raise InvalidArgumentError(
            f"子区域划分 {px}x{py} 无法整除网格 {mesh.nx}x{mesh.ny}，子区域边界必须沿网格线。"
        )
    sx, sy = mesh.nx // px, mesh.ny // py
    cells = np.arange(mesh.n_cells)
    cx, cy = cells % mesh.nx, cells // mesh.nx
    owner = 1 + cx // sx + px * (cy // sy)
    logger.debug("分解 %dx%d 网格为 %dx%d 个子区域", mesh.nx, mesh.ny, px, py)
    return Decomposition(mesh, px, py, owner)


def _blocks_containing(j: int, n: int, blocks: int) -> Tuple[int, ...]:
    """坐标索引 j 落在哪些子区域列（或行）的闭包内。"""
    size = n // blocks
    return tuple(c for c in range(blocks) if c * size <= j <= (c + 1) * size)


def classify_nodes(d: Decomposition) -> NodeClass:
    mesh = d.mesh
    cols = [_blocks_containing(jx, mesh.nx, d.px) for jx in range(mesh.nx + 1)]
    rows = [_blocks_containing(jy, mesh.ny, d.py) for jy in range(mesh.ny + 1)]

    kind = np.empty(mesh.n_nodes, dtype=np.int8)
    incident = []
    for node in range(mesh.n_nodes):
        jx, jy = mesh.node_index(node)
        subs = tuple(sorted(1 + c + d.px * r for c, r in itertools.product(cols[jx], rows[jy])))
        incident.append(subs)
        if mesh.on_boundary[node]:
            kind[node] = NodeKind.BOUNDARY
        elif len(subs) >= 3:
            kind[node] = NodeKind.CROSSPOINT
        elif len(subs) == 2:
            kind[node] = NodeKind.INTERFACE
        else:
            kind[node] = NodeKind.INTERIOR
    return NodeClass(kind=kind, incident=tuple(incident))


def crosspoint_topology(d: Decomposition, node: int, node_class: NodeClass | None = None) -> CrossPointTopology:
    """
    收集交叉点周围的子区域、辐边以及共享关系。
    辐边的两侧单元分属不同子区域，该辐边即由这两个子区域共享。
    """
    node_class = node_class or classify_nodes(d)
    if node_class.kind[node] != NodeKind.CROSSPOINT:
        raise ContractViolation(f"节点 {node} 不是交叉点（分类为 {NodeKind(node_class.kind[node]).name}）。")

    mesh = d.mesh
    jx, jy = mesh.node_index(node)
    owner = d.owner.reshape(mesh.ny, mesh.nx)
    # 每条辐边：(远端节点, 长度, 两侧单元的 (cy, cx))
    spokes = [
        (mesh.node_id(jx + 1, jy), mesh.hx, (jy - 1, jx), (jy, jx)),
        (mesh.node_id(jx - 1, jy), mesh.hx, (jy - 1, jx - 1), (jy, jx - 1)),
        (mesh.node_id(jx, jy + 1), mesh.hy, (jy, jx - 1), (jy, jx)),
        (mesh.node_id(jx, jy - 1), mesh.hy, (jy - 1, jx - 1), (jy - 1, jx)),
    ]
    shared: Dict[Tuple[int, int], List[Tuple[int, float]]] = {}
    for far, length, cell_1, cell_2 in spokes:
        a, b = int(owner[cell_1]), int(owner[cell_2])
        if a == b:
            continue
        shared.setdefault((min(a, b), max(a, b)), []).append((int(far), float(length)))

    x0, y0 = mesh.node_coords(node)

    def centroid_angle(i: int) -> float:
        xa, xb, ya, yb = d.subdomain_box(i)
        return math.atan2((ya + yb) / 2 - y0, (xa + xb) / 2 - x0) % (2 * math.pi)

    order = tuple(sorted(node_class.incident[node], key=centroid_angle))
    return CrossPointTopology(
        node=int(node),
        subdomains=order,
        shared_edges={pair: tuple(edges) for pair, edges in sorted(shared.items())},
    )
