"""Static kd-tree for exact Euclidean nearest-neighbour queries.

The traversal runs in a compiled extension (``epiout._kdtree_ext``) when it
was built; otherwise a pure-Python kernel with the same node layout is used.
Set ``EPIOUT_PURE_PYTHON=1`` to force the fallback.

Example
-------
>>> tree = KdTree([[0.0], [10.0]])
>>> tree.nearest([0.4])
(0, 0.4)
"""
from __future__ import annotations

import os

import numpy as np

from epiout import _kdtree_py

try:
    if os.environ.get("EPIOUT_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from epiout import _kdtree_ext
except ImportError:
    _kdtree_ext = None

BACKENDS = {"python": _kdtree_py}
if _kdtree_ext is not None:
    BACKENDS["compiled"] = _kdtree_ext
DEFAULT_BACKEND = "compiled" if _kdtree_ext is not None else "python"
LEAF_SIZE = 16


class KdTree:
    """Median-split kd-tree over the rows of ``points``.

    Splits on the widest-spread coordinate; nodes holding at most
    ``leaf_size`` points (or only duplicates) become leaves. Distance ties
    resolve to the lowest row index.
    """

    def __init__(self, points, leaf_size: int = LEAF_SIZE, backend: str | None = None):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("kd-tree needs at least one point (n x d array)")
        if pts.shape[1] == 0:
            raise ValueError("points must have at least one coordinate")
        if not np.all(np.isfinite(pts)):
            raise ValueError("kd-tree points must be finite")
        if leaf_size < 1:
            raise ValueError("leaf_size must be >= 1")
        self.backend = backend or DEFAULT_BACKEND
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown kd-tree backend {self.backend!r}")
        self._impl = BACKENDS[self.backend]
        self.points = pts
        self.leaf_size = leaf_size
        (self.order, self.dims, self.splits, self.lefts, self.rights,
         self.starts, self.ends) = self._impl.build_tree(pts, leaf_size)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.dims.shape[0]

    def height(self) -> int:
        depth = {0: 1}
        for node in range(self.n_nodes):
            if self.dims[node] >= 0:
                depth[self.lefts[node]] = depth[self.rights[node]] = depth[node] + 1
        return max(depth.values())

    def query(self, queries, squared: bool = False):
        """Nearest stored row for each query row: ``(indices, distances)``."""
        q = np.ascontiguousarray(queries, dtype=np.float64)
        if q.ndim == 1:
            q = q[:, None] if self.d == 1 else q[None, :]
        if q.ndim != 2 or q.shape[1] != self.d:
            raise ValueError(f"query dimension {q.shape[-1]} != tree dimension {self.d}")
        idx, d2 = self._impl.query_tree(self.points, self.order, self.dims, self.splits,
                                        self.lefts, self.rights, self.starts, self.ends, q)
        return idx, (d2 if squared else np.sqrt(d2))

    def nearest(self, q):
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.d:
            raise ValueError(f"query dimension {q.shape[0]} != tree dimension {self.d}")
        idx, dist = self.query(q[None, :])
        return int(idx[0]), float(dist[0])


def build(points, leaf_size: int = LEAF_SIZE, backend: str | None = None) -> KdTree:
    return KdTree(points, leaf_size=leaf_size, backend=backend)


def nearest(tree: KdTree, q):
    return tree.nearest(q)


def linear_scan(points, queries, squared: bool = False):
    """O(n*m) reference answer with the same rounding and tie-break as the tree."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    qs = np.asarray(queries, dtype=np.float64)
    if qs.ndim == 1:
        qs = qs[:, None] if pts.shape[1] == 1 else qs[None, :]
    idx = np.empty(qs.shape[0], dtype=np.intp)
    d2 = np.empty(qs.shape[0])
    for r, q in enumerate(qs):
        row = _kdtree_py.sqdist_rows(pts, q)
        idx[r] = int(np.argmin(row))  # first occurrence = lowest index
        d2[r] = row[idx[r]]
    return idx, (d2 if squared else np.sqrt(d2))
