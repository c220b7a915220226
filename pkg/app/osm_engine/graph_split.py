# app/osm_engine/graph_split.py

"""
连通图上的流分解：给定顶点值 φ（总和为零），构造反对称的边函数 ψ，
使每个顶点的出流之和等于 φ。交叉点处的不动点迹由此构造。
"""

from dataclasses import dataclass
from typing import Dict, Hashable, Iterable, Tuple

import networkx as nx
import numpy as np

from .errors import InvalidArgumentError

ZERO_SUM_TOL = 1e-12

EdgeFlow = Dict[Tuple[Hashable, Hashable], float]


@dataclass(frozen=True, eq=False)
class FlowGraph:
    graph: nx.Graph
    phi: Dict[Hashable, float]

    @classmethod
    def from_edges(cls, vertices: Iterable[Hashable], edges: Iterable[Tuple[Hashable, Hashable]],
                   phi: Dict[Hashable, float] | Iterable[float]) -> "FlowGraph":
        graph = nx.Graph()
        vertices = list(vertices)
        graph.add_nodes_from(vertices)
        graph.add_edges_from(edges)
        if not isinstance(phi, dict):
            phi = dict(zip(vertices, phi))
        return cls(graph=graph, phi={v: float(phi[v]) for v in vertices})

    @property
    def scale(self) -> float:
        return max((abs(value) for value in self.phi.values()), default=0.0)


def split_flow(g: FlowGraph) -> EdgeFlow:
    """
    迭代地摘除 BFS 生成树（根为第一个顶点）中编号最小的叶子 v：
    把 φ(v) 全部沿树边送给父节点 w₀，v 的其余边置零，再更新 φ(w₀)。
    """
    vertices = list(g.graph.nodes)
    if not vertices:
        raise InvalidArgumentError("流分解需要至少一个顶点。")
    if not nx.is_connected(g.graph):
        raise InvalidArgumentError("流分解要求图连通。")
    total = sum(g.phi[v] for v in vertices)
    if abs(total) > ZERO_SUM_TOL * g.scale:
        raise InvalidArgumentError(f"顶点值之和必须为零，当前为 {total:.3e}。")

    position = {v: k for k, v in enumerate(vertices)}
    remaining = g.graph.copy()
    phi = {v: g.phi[v] for v in vertices}
    psi: EdgeFlow = {}

    while remaining.number_of_nodes() > 1:
        root = min(remaining.nodes, key=position.__getitem__)
        parent = dict(nx.bfs_predecessors(remaining, root))
        has_child = set(parent.values())
        leaf = min((v for v in parent if v not in has_child), key=position.__getitem__)
        w0 = parent[leaf]

        for w in list(remaining.neighbors(leaf)):
            if w != w0:
                psi[(leaf, w)] = 0.0
                psi[(w, leaf)] = 0.0
        psi[(leaf, w0)] = phi[leaf]
        psi[(w0, leaf)] = -phi[leaf]
        phi[w0] += phi[leaf]
        remaining.remove_node(leaf)

    return psi


def verify_flow(g: FlowGraph, psi: EdgeFlow, tol: float = ZERO_SUM_TOL) -> bool:
    """检查 ψ 覆盖所有有向边、严格反对称，且出流之和在容差内等于 φ。"""
    for a, b in g.graph.edges:
        if (a, b) not in psi or (b, a) not in psi:
            return False
        if psi[(a, b)] != -psi[(b, a)]:
            return False

    scale = max(g.scale, max((abs(value) for value in psi.values()), default=0.0))
    for v in g.graph.nodes:
        outflow = sum(psi[(v, w)] for w in g.graph.neighbors(v))
        if abs(g.phi[v] - outflow) > tol * scale:
            return False
    return True


def project_zero_sum(values: np.ndarray) -> np.ndarray:
    """减去均值，使数值舍入误差不破坏总和为零的前提。"""
    values = np.asarray(values, dtype=float)
    return values - values.mean() if values.size else values
