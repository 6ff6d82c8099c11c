# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kd-tree kernels: median-split build and exact 1-NN queries.

Same node layout and tie-break (lowest stored index) as ``_kdtree_py``.
"""
import numpy as np
from libc.math cimport INFINITY

cdef Py_ssize_t LEAF = -1


cdef inline void _swap(Py_ssize_t* order, Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t t = order[i]
    order[i] = order[j]
    order[j] = t


cdef void _select(Py_ssize_t* order, const double* pts, Py_ssize_t d, Py_ssize_t dim,
                  Py_ssize_t lo, Py_ssize_t hi, Py_ssize_t k) noexcept nogil:
    # three-way quickselect on order[lo:hi]; duplicates do not degrade it
    cdef Py_ssize_t lt, gt, i, mid
    cdef double a, b, c, pivot, v
    while hi - lo > 1:
        mid = lo + (hi - lo) // 2
        a = pts[order[lo] * d + dim]
        b = pts[order[mid] * d + dim]
        c = pts[order[hi - 1] * d + dim]
        if (a <= b and b <= c) or (c <= b and b <= a):
            pivot = b
        elif (b <= a and a <= c) or (c <= a and a <= b):
            pivot = a
        else:
            pivot = c
        lt = lo
        i = lo
        gt = hi
        while i < gt:
            v = pts[order[i] * d + dim]
            if v < pivot:
                _swap(order, lt, i)
                lt += 1
                i += 1
            elif v > pivot:
                gt -= 1
                _swap(order, i, gt)
            else:
                i += 1
        if k < lt:
            hi = lt
        elif k >= gt:
            lo = gt
        else:
            return


def build_tree(const double[:, ::1] pts, Py_ssize_t leaf_size):
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t d = pts.shape[1]
    cdef Py_ssize_t cap = 2 * n + 1
    order_a = np.arange(n, dtype=np.intp)
    dims_a = np.full(cap, LEAF, dtype=np.intp)
    splits_a = np.zeros(cap, dtype=np.float64)
    lefts_a = np.full(cap, -1, dtype=np.intp)
    rights_a = np.full(cap, -1, dtype=np.intp)
    starts_a = np.zeros(cap, dtype=np.intp)
    ends_a = np.zeros(cap, dtype=np.intp)
    stack_a = np.zeros(cap, dtype=np.intp)

    cdef Py_ssize_t[::1] order = order_a
    cdef Py_ssize_t[::1] dims = dims_a
    cdef double[::1] splits = splits_a
    cdef Py_ssize_t[::1] lefts = lefts_a
    cdef Py_ssize_t[::1] rights = rights_a
    cdef Py_ssize_t[::1] starts = starts_a
    cdef Py_ssize_t[::1] ends = ends_a
    cdef Py_ssize_t[::1] stack = stack_a
    cdef const double* p = &pts[0, 0]
    cdef Py_ssize_t n_nodes = 1, top = 0, node, start, end, mid, i, k, best_dim
    cdef double lo_v, hi_v, v, best_spread

    ends[0] = n
    stack[top] = 0
    top += 1
    with nogil:
        while top > 0:
            top -= 1
            node = stack[top]
            start = starts[node]
            end = ends[node]
            if end - start <= leaf_size:
                continue
            best_dim = 0
            best_spread = -1.0
            for k in range(d):
                lo_v = p[order[start] * d + k]
                hi_v = lo_v
                for i in range(start + 1, end):
                    v = p[order[i] * d + k]
                    if v < lo_v:
                        lo_v = v
                    elif v > hi_v:
                        hi_v = v
                if hi_v - lo_v > best_spread:
                    best_spread = hi_v - lo_v
                    best_dim = k
            if best_spread <= 0.0:
                continue
            mid = start + (end - start) // 2
            _select(&order[0], p, d, best_dim, start, end, mid)
            dims[node] = best_dim
            splits[node] = p[order[mid] * d + best_dim]
            lefts[node] = n_nodes
            starts[n_nodes] = start
            ends[n_nodes] = mid
            rights[node] = n_nodes + 1
            starts[n_nodes + 1] = mid
            ends[n_nodes + 1] = end
            stack[top] = n_nodes + 1
            stack[top + 1] = n_nodes
            top += 2
            n_nodes += 2

    return (order_a, dims_a[:n_nodes].copy(), splits_a[:n_nodes].copy(),
            lefts_a[:n_nodes].copy(), rights_a[:n_nodes].copy(),
            starts_a[:n_nodes].copy(), ends_a[:n_nodes].copy())


cdef void _search(const double* p, Py_ssize_t d, const Py_ssize_t* order,
                  const Py_ssize_t* dims, const double* splits,
                  const Py_ssize_t* lefts, const Py_ssize_t* rights,
                  const Py_ssize_t* starts, const Py_ssize_t* ends,
                  const double* q, Py_ssize_t node,
                  double* best_d2, Py_ssize_t* best_i) noexcept nogil:
    cdef Py_ssize_t i, k, idx, near, far
    cdef double acc, diff
    if dims[node] == LEAF:
        for i in range(starts[node], ends[node]):
            idx = order[i]
            acc = 0.0
            for k in range(d):
                diff = p[idx * d + k] - q[k]
                acc = acc + diff * diff
            if acc < best_d2[0] or (acc == best_d2[0] and idx < best_i[0]):
                best_d2[0] = acc
                best_i[0] = idx
        return
    diff = q[dims[node]] - splits[node]
    if diff < 0.0:
        near = lefts[node]
        far = rights[node]
    else:
        near = rights[node]
        far = lefts[node]
    _search(p, d, order, dims, splits, lefts, rights, starts, ends, q, near,
            best_d2, best_i)
    if diff * diff <= best_d2[0]:
        _search(p, d, order, dims, splits, lefts, rights, starts, ends, q, far,
                best_d2, best_i)


def query_tree(const double[:, ::1] pts, const Py_ssize_t[::1] order,
               const Py_ssize_t[::1] dims, const double[::1] splits,
               const Py_ssize_t[::1] lefts, const Py_ssize_t[::1] rights,
               const Py_ssize_t[::1] starts, const Py_ssize_t[::1] ends,
               const double[:, ::1] queries):
    cdef Py_ssize_t m = queries.shape[0]
    cdef Py_ssize_t d = pts.shape[1]
    out_i_a = np.empty(m, dtype=np.intp)
    out_d2_a = np.empty(m, dtype=np.float64)
    cdef Py_ssize_t[::1] out_i = out_i_a
    cdef double[::1] out_d2 = out_d2_a
    cdef Py_ssize_t r, k
    cdef double best, diff
    cdef Py_ssize_t besti = -1
    cdef const double* p = &pts[0, 0]
    if m == 0:
        return out_i_a, out_d2_a
    with nogil:
        for r in range(m):
            # consecutive queries tend to be close, so the previous answer
            # gives a tight starting bound; ties still resolve to the lowest index
            best = INFINITY
            if besti >= 0:
                best = 0.0
                for k in range(d):
                    diff = p[besti * d + k] - queries[r, k]
                    best = best + diff * diff
            _search(p, d, &order[0], &dims[0], &splits[0], &lefts[0],
                    &rights[0], &starts[0], &ends[0], &queries[r, 0], 0,
                    &best, &besti)
            out_i[r] = besti
            out_d2[r] = best
    return out_i_a, out_d2_a
