"""Exact k-nearest-neighbour search with a ball tree.

Nodes are stored in flat arrays; every node owns a contiguous slice of the
permuted index array.  A query walks the tree depth-first, nearest child
first, and prunes a ball whenever its lower distance bound exceeds the
current k-th best distance.  Equal bounds are not pruned so that ties can
still be resolved by ascending point index.
"""

from __future__ import annotations

import heapq

import numpy as np


class BallTree:
    def __init__(self, data, leaf_size: int = 16):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("data must be 2-D")
        self.leaf_size = max(1, int(leaf_size))
        n = len(self.data)
        self.idx = np.arange(n)
        self.start: list[int] = []
        self.end: list[int] = []
        self.centroid: list[np.ndarray] = []
        self.radius: list[float] = []
        self.children: list[tuple[int, int] | None] = []
        if n:
            self._build(0, n)

    def _build(self, lo: int, hi: int) -> int:
        node = len(self.start)
        pts = self.data[self.idx[lo:hi]]
        c = pts.mean(axis=0)
        r = float(np.sqrt(((pts - c) ** 2).sum(axis=1)).max())
        self.start.append(lo)
        self.end.append(hi)
        self.centroid.append(c)
        self.radius.append(r)
        self.children.append(None)
        if hi - lo > self.leaf_size:
            spread = pts.max(axis=0) - pts.min(axis=0)
            dim = int(np.argmax(spread))
            if spread[dim] > 0:
                order = np.argsort(pts[:, dim], kind="stable")
                self.idx[lo:hi] = self.idx[lo:hi][order]
                mid = lo + (hi - lo) // 2
                left = self._build(lo, mid)
                right = self._build(mid, hi)
                self.children[node] = (left, right)
        return node

    def query(self, point, k: int, exclude: int | None = None):
        """Return (indices, distances) of the ``k`` nearest points.

        Results are ordered by (distance, index).  ``exclude`` removes one
        point index from consideration (used to skip the query word itself).
        """
        point = np.asarray(point, dtype=np.float64)
        available = len(self.data) - (1 if exclude is not None else 0)
        if k < 1 or k > available:
            raise ValueError(f"k={k} out of range for {available} candidate points")
        # max-heap on (distance, index) via negation
        heap: list[tuple[float, int]] = []
        self._search(0, point, k, exclude, heap)
        best = sorted((-d, -i) for d, i in heap)
        return (np.array([i for _, i in best], dtype=np.int64),
                np.array([d for d, _ in best], dtype=np.float64))

    def _bound(self, node: int, point: np.ndarray) -> float:
        d = float(np.sqrt(((point - self.centroid[node]) ** 2).sum()))
        return max(0.0, d - self.radius[node])

    def _search(self, node, point, k, exclude, heap):
        if len(heap) == k and self._bound(node, point) > -heap[0][0]:
            return
        kids = self.children[node]
        if kids is None:
            ids = self.idx[self.start[node]:self.end[node]]
            dists = np.sqrt(((self.data[ids] - point) ** 2).sum(axis=1))
            for i, d in zip(ids.tolist(), dists.tolist()):
                if i == exclude:
                    continue
                if len(heap) < k:
                    heapq.heappush(heap, (-d, -i))
                elif (d, i) < (-heap[0][0], -heap[0][1]):
                    heapq.heapreplace(heap, (-d, -i))
            return
        left, right = kids
        bl, br = self._bound(left, point), self._bound(right, point)
        first, second = (left, right) if bl <= br else (right, left)
        self._search(first, point, k, exclude, heap)
        self._search(second, point, k, exclude, heap)
