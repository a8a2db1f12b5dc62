"""Inter-satellite communication graphs and Metropolis mixing matrices."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from .constellation import OrbitalElements, propagate_all


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class GraphSnapshot:
    index: int
    L: int
    edges: tuple[tuple[int, int], ...]  # undirected, l < q

    def __post_init__(self):
        for l, q in self.edges:
            if l == q:
                raise TopologyError(f"self-loop at node {l}")
            if not (0 <= l < q < self.L):
                raise TopologyError(f"edge ({l}, {q}) is not normalised to l < q < L")

    @property
    def adjacency(self) -> np.ndarray:
        Adj = np.zeros((self.L, self.L), dtype=bool)
        for l, q in self.edges:
            Adj[l, q] = Adj[q, l] = True
        return Adj

    @property
    def neighbors(self) -> list[list[int]]:
        Adj = self.adjacency
        return [np.flatnonzero(Adj[l]).tolist() for l in range(self.L)]

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def components(self) -> list[list[int]]:
        k, lab = connected_components(self.adjacency.astype(int), directed=False)
        return [np.flatnonzero(lab == c).tolist() for c in range(k)]

    def is_connected(self) -> bool:
        return len(self.components()) == 1


def knn_graph(positions: np.ndarray, k: int, index: int = 0) -> GraphSnapshot:
    """Union of every node's ``k`` nearest neighbours (Euclidean, ties to lower index)."""
    P = np.asarray(positions, dtype=float)
    L = len(P)
    if not L > k:
        raise TopologyError(f"need more than k={k} nodes, got {L}")
    D = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=-1)
    edges = set()
    for l in range(L):
        # stable sort on distance keeps lower indices first among ties
        order = [q for q in np.argsort(D[l], kind="stable") if q != l][:k]
        edges.update((min(l, q), max(l, q)) for q in order)
    g = GraphSnapshot(index, L, tuple(sorted((int(a), int(b)) for a, b in edges)))
    comps = g.components()
    if len(comps) > 1:
        raise TopologyError(f"k-NN graph (k={k}) is disconnected: components {comps}")
    return g


def graph_sequence(elements: list[OrbitalElements], horizon: float, T_graphs: int, k: int,
                   epoch0: float = 0.0) -> list[GraphSnapshot]:
    """k-NN snapshots at ``T_graphs`` evenly spaced epochs over ``[epoch0, epoch0 + horizon)``."""
    if T_graphs < 1:
        raise TopologyError("T_graphs must be at least 1")
    times = epoch0 + horizon * np.arange(T_graphs) / T_graphs
    out = []
    for t_idx, t in enumerate(times):
        states = propagate_all(elements, float(t))
        out.append(knn_graph(np.array([s.position for s in states]), k, t_idx))
    return out


def period_length(total_iterations: int, T_graphs: int) -> int:
    """Iterations during which each snapshot stays active."""
    return max(1, -(-total_iterations // T_graphs))


def active_snapshot(k: int, period: int, T_graphs: int) -> int:
    return min(k // period, T_graphs - 1)


def metropolis(graph: GraphSnapshot) -> np.ndarray:
    """Metropolis weights ``1 / (max(d_l, d_q) + 1)`` with the diagonal taking the remainder."""
    d = graph.degrees
    W = np.zeros((graph.L, graph.L))
    for l, q in graph.edges:
        W[l, q] = W[q, l] = 1.0 / (max(d[l], d[q]) + 1)
    W[np.diag_indices(graph.L)] = 1.0 - W.sum(axis=1)
    return W


def local_metropolis_row(l: int, neighbors: list[int], degree_of: dict[int, int],
                         L: int) -> np.ndarray:
    """Row ``l`` of the Metropolis matrix from node ``l``'s own view only."""
    row = np.zeros(L)
    d_l = len(neighbors)
    for q in neighbors:
        row[q] = 1.0 / (max(d_l, degree_of[q]) + 1)
    row[l] = 1.0 - row.sum()
    return row


def second_singular_value(W: np.ndarray) -> float:
    s = np.linalg.svd(W, compute_uv=False)
    return float(s[1]) if s.size > 1 else 0.0


def check_mixing(W: np.ndarray, graph: GraphSnapshot, atol: float = 1e-12) -> None:
    """Raise unless ``W`` is symmetric, doubly stochastic and compatible with ``graph``."""
    L = graph.L
    one = np.ones(L)
    if not np.allclose(W, W.T, atol=atol, rtol=0):
        raise TopologyError("mixing matrix is not symmetric")
    if np.abs(W @ one - one).max() > atol or np.abs(one @ W - one).max() > atol:
        raise TopologyError("mixing matrix is not doubly stochastic")
    if np.any(W < -atol):
        raise TopologyError("mixing matrix has negative entries")
    allowed = graph.adjacency | np.eye(L, dtype=bool)
    if np.any((np.abs(W) > 0) & ~allowed):
        raise TopologyError("mixing matrix has weight on a non-edge")


def write_edges_csv(graphs: list[GraphSnapshot], mixing: list[np.ndarray], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "l", "q", "weight"])
        for g, W in zip(graphs, mixing):
            for l, q in g.edges:
                w.writerow([g.index, l, q, repr(float(W[l, q]))])
