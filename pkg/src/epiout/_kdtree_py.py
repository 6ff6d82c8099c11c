"""Pure-Python kd-tree kernels.

Used when the compiled extension is unavailable or when
``EPIOUT_PURE_PYTHON=1`` is set. The node layout is shared with
``_kdtree_ext`` so both backends answer queries identically.
"""
import numpy as np

LEAF = -1


def _widest_dim(pts, idx):
    sub = pts[idx]
    spread = sub.max(axis=0) - sub.min(axis=0)
    dim = int(np.argmax(spread))
    return dim, spread[dim]


def build_tree(pts, leaf_size):
    n = pts.shape[0]
    order = np.arange(n, dtype=np.intp)
    dims, splits, lefts, rights, starts, ends = [], [], [], [], [], []

    def new_node(start, end):
        dims.append(LEAF)
        splits.append(0.0)
        lefts.append(-1)
        rights.append(-1)
        starts.append(start)
        ends.append(end)
        return len(dims) - 1

    root = new_node(0, n)
    stack = [root]
    while stack:
        node = stack.pop()
        start, end = starts[node], ends[node]
        if end - start <= leaf_size:
            continue
        dim, spread = _widest_dim(pts, order[start:end])
        if spread <= 0.0:
            continue
        mid = start + (end - start) // 2
        sub = order[start:end]
        part = np.argpartition(pts[sub, dim], mid - start, kind="introselect")
        order[start:end] = sub[part]
        dims[node] = dim
        splits[node] = pts[order[mid], dim]
        lefts[node] = new_node(start, mid)
        rights[node] = new_node(mid, end)
        stack.append(rights[node])
        stack.append(lefts[node])

    as_int = lambda v: np.asarray(v, dtype=np.intp)  # noqa: E731
    return (order, as_int(dims), np.asarray(splits, dtype=np.float64),
            as_int(lefts), as_int(rights), as_int(starts), as_int(ends))


def sqdist_rows(pts, q):
    """Squared distances from every row of ``pts`` to ``q``.

    Accumulates dimension by dimension so the rounding matches the compiled
    kernel and the brute-force oracles bit for bit.
    """
    acc = np.zeros(pts.shape[0])
    for k in range(pts.shape[1]):
        diff = pts[:, k] - q[k]
        acc += diff * diff
    return acc


def _query_one(pts, order, dims, splits, lefts, rights, starts, ends, q):
    best_d2 = np.inf
    best_i = -1
    stack = [(0, 0.0)]
    while stack:
        node, bound = stack.pop()
        if bound > best_d2:
            continue
        dim = dims[node]
        if dim == LEAF:
            idx = order[starts[node]:ends[node]]
            d2 = sqdist_rows(pts[idx], q)
            m = d2.min()
            if m <= best_d2:
                cand = int(idx[d2 == m].min())
                if m < best_d2 or cand < best_i:
                    best_d2, best_i = float(m), cand
            continue
        diff = q[dim] - splits[node]
        if diff < 0.0:
            near, far = lefts[node], rights[node]
        else:
            near, far = rights[node], lefts[node]
        stack.append((far, diff * diff))
        stack.append((near, bound))
    return best_i, best_d2


def query_tree(pts, order, dims, splits, lefts, rights, starts, ends, queries):
    m = queries.shape[0]
    out_i = np.empty(m, dtype=np.intp)
    out_d2 = np.empty(m, dtype=np.float64)
    # plain lists index faster than numpy scalars in the traversal loop
    dims_l, splits_l = dims.tolist(), splits.tolist()
    lefts_l, rights_l = lefts.tolist(), rights.tolist()
    starts_l, ends_l = starts.tolist(), ends.tolist()
    for r in range(m):
        out_i[r], out_d2[r] = _query_one(pts, order, dims_l, splits_l, lefts_l,
                                         rights_l, starts_l, ends_l, queries[r])
    return out_i, out_d2
