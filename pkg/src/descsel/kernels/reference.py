"""Pure-numpy top-k selection, the fallback when the compiled kernel is absent.

Semantics shared with the compiled backend: per row, return the column indices
of the k largest similarities in descending order, ties broken by lowest
column index; an optionally excluded column never appears; rows with fewer
than k candidates are padded with -1.
"""

from __future__ import annotations

import numpy as np


def topk_indices(sims: np.ndarray, k: int, exclude: np.ndarray | None = None) -> np.ndarray:
    sims = np.asarray(sims)
    m, p = sims.shape
    if exclude is not None:
        work = sims.astype(np.float64, copy=True)
        rows = np.arange(m)
        excl = np.asarray(exclude, dtype=np.int64)
        valid = excl >= 0
        work[rows[valid], excl[valid]] = -np.inf
    else:
        work = sims
        excl = None
    width = min(k, p)
    # stable sort on -sims: equal values keep ascending column order
    order = np.argsort(-work, axis=1, kind="stable")[:, :width]
    out = np.full((m, min(k, p)), -1, dtype=np.int64)
    out[:, :width] = order
    if excl is not None:
        # excluded slots sank to the end; mark any that surfaced as padding
        taken = np.take_along_axis(work, order, axis=1)
        out[np.isneginf(taken)] = -1
    return out
