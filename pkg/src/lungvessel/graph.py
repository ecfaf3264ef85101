"""Shortest paths over masked voxel grids.

Nodes are the True voxels of a mask; edges join N6 neighbors with weight
mean(node costs) * step length (1 voxel). Dijkstra runs through
scipy.sparse.csgraph on a CSR adjacency built once per mask.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra


class GridGraph:
    """CSR adjacency over the foreground voxels of a 3D mask."""

    def __init__(self, mask: np.ndarray, node_cost: np.ndarray):
        mask = np.asarray(mask, bool)
        cost = np.asarray(node_cost, np.float64)
        if mask.shape != cost.shape:
            raise ValueError("mask and node_cost shapes differ")
        self.shape = mask.shape
        self.mask = mask
        self.node_id = np.full(mask.shape, -1, np.int64)
        self.voxels = np.argwhere(mask)
        self.node_id[mask] = np.arange(len(self.voxels))
        self.n = len(self.voxels)
        self.node_cost = cost[mask]

        rows, cols, weights = [], [], []
        for axis in range(3):
            a = [slice(None)] * 3
            b = [slice(None)] * 3
            a[axis] = slice(0, -1)
            b[axis] = slice(1, None)
            pair = mask[tuple(a)] & mask[tuple(b)]
            u = self.node_id[tuple(a)][pair]
            v = self.node_id[tuple(b)][pair]
            w = 0.5 * (self.node_cost[u] + self.node_cost[v])
            rows.append(u)
            cols.append(v)
            weights.append(w)
        if rows:
            r = np.concatenate(rows)
            c = np.concatenate(cols)
            w = np.concatenate(weights)
            self.adj = sparse.csr_matrix(
                (np.concatenate([w, w]), (np.concatenate([r, c]), np.concatenate([c, r]))),
                shape=(self.n, self.n))
        else:
            self.adj = sparse.csr_matrix((self.n, self.n))

    def ids_of(self, voxels) -> np.ndarray:
        """Node ids of an (m, 3) array of voxel indices (must be inside the mask)."""
        voxels = np.asarray(voxels)
        ids = self.node_id[voxels[:, 0], voxels[:, 1], voxels[:, 2]]
        if np.any(ids < 0):
            raise ValueError("some voxels are outside the graph mask")
        return ids

    def dijkstra(self, sources) -> tuple[np.ndarray, np.ndarray]:
        """Multi-source Dijkstra. Returns (dist, predecessor) over node ids;
        unreachable nodes have dist=inf and predecessor=-9999."""
        sources = np.atleast_1d(np.asarray(sources, np.int64))
        if self.n == 0 or len(sources) == 0:
            return np.full(self.n, np.inf), np.full(self.n, -9999, np.int32)
        dist, pred, _ = _csgraph_dijkstra(
            self.adj, indices=sources, min_only=True, return_predecessors=True)
        return dist, pred

    def path_to_source(self, pred: np.ndarray, node: int) -> list[int]:
        """Walk predecessors from node back to the source it was reached from."""
        path = [int(node)]
        cur = int(node)
        while pred[cur] >= 0:
            cur = int(pred[cur])
            path.append(cur)
        return path
