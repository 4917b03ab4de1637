"""Local-descriptor data model: descriptor sets, episodes, class pools.

A convolutional feature map of shape (h, w, d) is treated as m = h*w
d-dimensional descriptors, one per spatial position. Everything here is
immutable after construction and safe to share across evaluation workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class DescriptorSet:
    """An image's m local descriptors, row-major over the (h, w) grid."""

    descriptors: np.ndarray  # (m, d)
    height: int
    width: int

    def __post_init__(self):
        arr = np.asarray(self.descriptors)
        object.__setattr__(self, "descriptors", arr)
        if arr.ndim != 2:
            raise InvalidInputError(f"descriptors must be 2-D, got shape {arr.shape}")
        if self.height < 1 or self.width < 1:
            raise InvalidInputError("height and width must be positive")
        if arr.shape[0] != self.height * self.width:
            raise InvalidInputError(
                f"{arr.shape[0]} rows inconsistent with {self.height}x{self.width} grid")
        if arr.shape[1] < 1:
            raise InvalidInputError("descriptor dimension must be >= 1")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("descriptors contain non-finite values")

    @property
    def m(self) -> int:
        return self.descriptors.shape[0]

    @property
    def d(self) -> int:
        return self.descriptors.shape[1]


@dataclass(frozen=True)
class LabeledSample:
    descriptor_set: DescriptorSet
    class_id: int


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task. Query labels are ground truth for evaluation
    only; the model never reads them at inference."""

    n_way: int
    k_shot: int
    support: tuple
    queries: tuple

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "queries", tuple(self.queries))
        counts = {}
        for s in self.support:
            if not 0 <= s.class_id < self.n_way:
                raise InvalidInputError(f"support class_id {s.class_id} outside [0, {self.n_way})")
            counts[s.class_id] = counts.get(s.class_id, 0) + 1
        if sorted(counts) != list(range(self.n_way)) or any(c != self.k_shot for c in counts.values()):
            raise InvalidInputError("support must hold exactly k_shot samples for each of n_way classes")
        dims = {s.descriptor_set.d for s in self.support} | {q.descriptor_set.d for q in self.queries}
        if len(dims) > 1:
            raise InvalidInputError(f"descriptor dimensions differ within episode: {sorted(dims)}")
        for q in self.queries:
            if not 0 <= q.class_id < self.n_way:
                raise InvalidInputError(f"query class_id {q.class_id} outside [0, {self.n_way})")

    @property
    def d(self) -> int:
        return self.support[0].descriptor_set.d

    def support_by_class(self):
        """Support samples grouped by class, preserving insertion order."""
        groups = [[] for _ in range(self.n_way)]
        for s in self.support:
            groups[s.class_id].append(s)
        return groups


@dataclass(frozen=True)
class ClassPool:
    """All candidate support descriptors of one class, after aggregation."""

    class_id: int
    pool: np.ndarray  # (p, d)

    def __post_init__(self):
        arr = np.asarray(self.pool)
        object.__setattr__(self, "pool", arr)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise InvalidInputError("pool must be a non-empty 2-D matrix")

    @property
    def p(self) -> int:
        return self.pool.shape[0]


def flatten_feature_map(feature_map: np.ndarray) -> DescriptorSet:
    """(h, w, d) feature map -> m = h*w descriptors, row-major."""
    arr = np.asarray(feature_map)
    if arr.ndim != 3:
        raise InvalidInputError(f"feature map must be rank 3, got shape {arr.shape}")
    h, w, d = arr.shape
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("feature map contains non-finite values")
    return DescriptorSet(arr.reshape(h * w, d).copy(), h, w)


def unflatten(ds: DescriptorSet) -> np.ndarray:
    """Inverse of flatten_feature_map (round-trip testing aid)."""
    return ds.descriptors.reshape(ds.height, ds.width, ds.d).copy()


def build_class_pool(samples, mode: str = "union") -> ClassPool:
    """Aggregate one class's K support samples into its candidate pool.

    union: the K*m-row concatenation in shot order (shallow-backbone default).
    mean:  row i is the mean over shots of descriptor i (m rows).
    """
    samples = list(samples)
    if not samples:
        raise InvalidInputError("build_class_pool needs at least one sample")
    class_ids = {s.class_id for s in samples}
    if len(class_ids) != 1:
        raise InvalidInputError(f"samples span classes {sorted(class_ids)}")
    shapes = {s.descriptor_set.descriptors.shape for s in samples}
    if len(shapes) != 1:
        raise InvalidInputError("samples must share m and d")
    mats = [s.descriptor_set.descriptors for s in samples]
    if mode == "union":
        pool = np.concatenate(mats, axis=0)
    elif mode == "mean":
        pool = np.mean(np.stack(mats, axis=0), axis=0)
    else:
        raise InvalidInputError(f"unknown aggregation mode: {mode!r}")
    return ClassPool(samples[0].class_id, pool)
