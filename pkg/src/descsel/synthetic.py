"""Planted-cluster descriptor generator with known signal/distractor rows.

Each class owns a Gaussian cluster center on a sphere; a sample's grid mixes
`signal_fraction` rows drawn around that center with rows drawn from a finite
distractor pool that is shared across all classes (so the same distractor
recurs under different labels, the way backgrounds do).  Ground-truth masks
record which rows are signal; they exist for diagnostics and tests only.

Geometry: centers are random directions scaled to radius separation/sqrt(2),
making the expected distance between two centers about `cluster_separation`;
`noise_scale` is the per-coordinate standard deviation of the additive noise
on every row.  Distractor pool entries sit on a larger sphere (radius scaled
by `distractor_radius_factor`), modeling salient repeated background texture:
a distractor matches its own recurrence across images more strongly than
class signal matches itself, which is exactly the failure mode descriptor
gating exists to fix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .descriptors import DescriptorSet, LabeledSample
from .errors import InvalidInputError


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int
    descriptor_dim: int
    grid: Tuple[int, int]
    signal_fraction: float
    cluster_separation: float
    noise_scale: float
    seed: int
    samples_per_class: int = 20
    distractor_pool_size: Optional[int] = None
    distractor_radius_factor: float = 3.0

    def __post_init__(self):
        h, w = self.grid
        if self.classes < 2:
            raise InvalidInputError("need at least 2 classes")
        if self.descriptor_dim < 1:
            raise InvalidInputError("descriptor_dim must be >= 1")
        if h < 1 or w < 1:
            raise InvalidInputError(f"bad grid {self.grid}")
        if not 0.0 <= self.signal_fraction <= 1.0:
            raise InvalidInputError("signal_fraction must lie in [0, 1]")
        if self.cluster_separation < 0:
            raise InvalidInputError("cluster_separation must be >= 0")
        if self.noise_scale < 0:
            raise InvalidInputError("noise_scale must be >= 0")
        if self.samples_per_class < 1:
            raise InvalidInputError("samples_per_class must be >= 1")
        if self.distractor_pool_size is not None and self.distractor_pool_size < 1:
            raise InvalidInputError("distractor_pool_size must be >= 1")
        if self.distractor_radius_factor <= 0:
            raise InvalidInputError("distractor_radius_factor must be positive")

    @property
    def rows(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def signal_rows(self) -> int:
        return int(np.floor(self.signal_fraction * self.rows))

    @property
    def pool_size(self) -> int:
        return self.distractor_pool_size or self.rows


def _directions(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return v / norms


def class_name(index: int) -> str:
    return f"class_{index:03d}"


def generate_synthetic(spec: SyntheticSpec):
    """Build the dataset -> (samples_by_class, masks).

    samples_by_class maps class name to a list of (h, w, d) float32 grids;
    masks maps "<class>/<sample>" to a flat boolean signal indicator.
    Bit-identical for identical specs.
    """
    h, w = spec.grid
    m, d = spec.rows, spec.descriptor_dim
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    radius = spec.cluster_separation / np.sqrt(2.0)
    centers = _directions(rng, spec.classes, d) * radius
    pool = _directions(rng, spec.pool_size, d) * (radius * spec.distractor_radius_factor)

    n_signal = spec.signal_rows
    samples_by_class: Dict[str, List[np.ndarray]] = {}
    masks: Dict[str, np.ndarray] = {}
    for c in range(spec.classes):
        name = class_name(c)
        grids = []
        for s in range(spec.samples_per_class):
            mask = np.zeros(m, dtype=bool)
            if n_signal:
                mask[rng.choice(m, size=n_signal, replace=False)] = True
            rows = pool[rng.integers(0, spec.pool_size, size=m)].copy()
            rows[mask] = centers[c]
            rows += rng.normal(0.0, spec.noise_scale, size=(m, d))
            grids.append(rows.astype(np.float32).reshape(h, w, d))
            masks[f"{name}/{s:04d}"] = mask
        samples_by_class[name] = grids
    return samples_by_class, masks


def synthetic_samples(spec: SyntheticSpec):
    """In-memory form -> (list of LabeledSample, class names, masks)."""
    by_class, masks = generate_synthetic(spec)
    names = sorted(by_class)
    samples = []
    for cid, name in enumerate(names):
        for grid in by_class[name]:
            hh, ww, dd = grid.shape
            samples.append(LabeledSample(DescriptorSet(grid.reshape(hh * ww, dd), hh, ww), cid))
    return samples, names, masks
