# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-row top-k selection over a similarity matrix.

Same contract as kernels.reference: descending similarity, ties to the lowest
column index, optional per-row excluded column, -1 padding when a row has
fewer than k candidates.
"""

import numpy as np

cimport numpy as cnp
cimport cython

ctypedef fused floating:
    float
    double


@cython.boundscheck(False)
@cython.wraparound(False)
def topk_indices(floating[:, ::1] sims, long k, exclude=None):
    cdef Py_ssize_t m = sims.shape[0]
    cdef Py_ssize_t p = sims.shape[1]
    cdef Py_ssize_t width = k if k < p else p
    out_arr = np.full((m, width), -1, dtype=np.int64)
    cdef long[:, ::1] out = out_arr
    cdef long[::1] excl
    cdef bint has_excl = exclude is not None
    if has_excl:
        excl = np.ascontiguousarray(exclude, dtype=np.int64)
    else:
        excl = np.empty(0, dtype=np.int64)

    # per-row insertion into a best-list of size `width`: O(p * width)
    cdef floating[::1] best_sim = np.empty(width, dtype=np.asarray(sims).dtype)
    cdef long[::1] best_idx = np.empty(width, dtype=np.int64)
    cdef Py_ssize_t i, j, n, pos, t
    cdef long skip
    cdef floating s
    for i in range(m):
        skip = excl[i] if has_excl else -1
        n = 0
        for j in range(p):
            if j == skip:
                continue
            s = sims[i, j]
            if n == width and s <= best_sim[n - 1]:
                continue
            # find insertion point: strictly greater sims first; on ties the
            # earlier (lower) column index was inserted first and stays first
            pos = n if n < width else width - 1
            while pos > 0 and best_sim[pos - 1] < s:
                pos -= 1
            t = n if n < width else width - 1
            while t > pos:
                best_sim[t] = best_sim[t - 1]
                best_idx[t] = best_idx[t - 1]
                t -= 1
            best_sim[pos] = s
            best_idx[pos] = j
            if n < width:
                n += 1
        for j in range(n):
            out[i, j] = best_idx[j]
    return out_arr
