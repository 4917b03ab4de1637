"""Top-k similarity selection kernels.

The compiled Cython backend is used when the extension built; otherwise the
pure-numpy reference takes over. `DESCSEL_KERNEL=reference` forces the
fallback (used by tests and the benchmark)."""

from __future__ import annotations

import os

import numpy as np

from . import reference

try:
    from . import _topk as _compiled
except ImportError:  # extension not built; fall back silently
    _compiled = None

if os.environ.get("DESCSEL_KERNEL", "").lower() == "reference":
    _compiled = None

BACKEND = "cython" if _compiled is not None else "reference"


def topk_indices(sims, k, exclude=None):
    """Per-row indices of the k largest entries of `sims` (m, p).

    Descending value order, ties broken by lowest column index. `exclude`
    is an optional (m,) int array; entry >= 0 bans that column for its row
    (-1 bans nothing). Rows with fewer than k candidates pad with -1. Output
    width is min(k, p).
    """
    sims = np.asarray(sims)
    if sims.ndim != 2:
        raise ValueError("topk_indices expects a 2-D similarity matrix")
    if k < 1:
        raise ValueError("k must be >= 1")
    if exclude is not None:
        exclude = np.ascontiguousarray(exclude, dtype=np.int64)
        if exclude.shape != (sims.shape[0],):
            raise ValueError("exclude must have one entry per row")
    if _compiled is not None:
        work = np.ascontiguousarray(sims)
        if work.dtype not in (np.float32, np.float64):
            work = work.astype(np.float64)
        return _compiled.topk_indices(work, int(k), exclude)
    return reference.topk_indices(sims, int(k), exclude)
