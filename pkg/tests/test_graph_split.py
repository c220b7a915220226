# tests/test_graph_split.py

import networkx as nx
import numpy as np
import pytest

from app.osm_engine.errors import InvalidArgumentError
from app.osm_engine.graph_split import FlowGraph, project_zero_sum, split_flow, verify_flow


def _random_connected_graph(rng, n):
    while True:
        graph = nx.gnp_random_graph(n, rng.uniform(0.2, 0.9), seed=int(rng.integers(1 << 31)))
        if nx.is_connected(graph):
            return graph


def test_random_connected_graphs():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        graph = _random_connected_graph(rng, n)
        phi = project_zero_sum(rng.uniform(-1.0, 1.0, n))
        g = FlowGraph(graph=graph, phi=dict(zip(range(n), phi.tolist())))
        psi = split_flow(g)
        assert verify_flow(g, psi)


def test_cycle_of_four():
    g = FlowGraph.from_edges([1, 2, 3, 4], [(1, 2), (2, 3), (3, 4), (4, 1)], [1.0, -2.0, 3.0, -2.0])
    psi = split_flow(g)
    assert verify_flow(g, psi)
    assert len(psi) == 8


def test_single_vertex():
    g = FlowGraph.from_edges([7], [], [0.0])
    assert split_flow(g) == {}


def test_empty_graph_rejected():
    with pytest.raises(InvalidArgumentError):
        split_flow(FlowGraph.from_edges([], [], []))


def test_disconnected_graph_rejected():
    g = FlowGraph.from_edges([1, 2, 3, 4], [(1, 2), (3, 4)], [1.0, -1.0, 2.0, -2.0])
    with pytest.raises(InvalidArgumentError):
        split_flow(g)


def test_nonzero_sum_rejected():
    g = FlowGraph.from_edges([1, 2, 3], [(1, 2), (2, 3)], [1.0, 1.0, 1.0])
    with pytest.raises(InvalidArgumentError):
        split_flow(g)


def test_verify_flow_detects_bad_flow():
    g = FlowGraph.from_edges([1, 2], [(1, 2)], [1.0, -1.0])
    assert verify_flow(g, {(1, 2): 1.0, (2, 1): -1.0})
    assert not verify_flow(g, {(1, 2): 1.0, (2, 1): 1.0})
    assert not verify_flow(g, {(1, 2): 0.5, (2, 1): -0.5})
    assert not verify_flow(g, {(1, 2): 1.0})
