"""Image-to-class scores, episode posteriors, and the training losses.

The score of a query image for class c is the gate-weighted sum of its
descriptors' class-affinity entries; posteriors are the softmax of those
scores over classes and the episode loss is mean negative log posterior of
the true class.  The auxiliary support loss applies the same construction
to the support images themselves with their soft gates, which is the only
path by which the support threshold MLP receives gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .descriptors import DescriptorSet
from .errors import ContractViolationError, InvalidInputError
from .selection import (QuerySelection, SelectionModel, SupportSelection,
                        SupportSubset, query_descriptor_scores)


@dataclass(frozen=True)
class EpisodeScores:
    """Raw per-query class scores, posteriors, and argmax predictions."""

    per_query: np.ndarray    # (B, N)
    posteriors: np.ndarray   # (B, N)
    predicted: np.ndarray    # (B,)
    scores_node: ad.Node
    query_selection: QuerySelection

    def __post_init__(self):
        rows = np.asarray(self.posteriors).sum(axis=1)
        if not np.allclose(rows, 1.0, atol=1e-6):
            raise ContractViolationError("posterior rows must sum to 1")
        if np.any(self.predicted != np.argmax(self.posteriors, axis=1)):
            raise ContractViolationError("predictions inconsistent with posteriors")

    @property
    def n_way(self) -> int:
        return self.per_query.shape[1]


def _stable_softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def episode_score(query_sets, subset: SupportSubset, model: SelectionModel,
                  block: Optional[int] = None) -> EpisodeScores:
    """Score query images against a retained support subset.

    query_sets: a sequence of DescriptorSets / (m, d) arrays with a shared m,
    or one stacked (B*m, d) node/array with `block` = rows per image.
    """
    if isinstance(query_sets, ad.Node) or (
            isinstance(query_sets, np.ndarray) and query_sets.ndim == 2):
        stacked = query_sets
        if block is None:
            raise InvalidInputError("stacked query input needs an explicit block size")
    else:
        mats = []
        for q in query_sets:
            mats.append(q.descriptors if isinstance(q, DescriptorSet) else np.asarray(q))
        if not mats:
            raise InvalidInputError("need at least one query set")
        sizes = {m.shape[0] for m in mats}
        if len(sizes) != 1:
            raise InvalidInputError(f"query sets differ in descriptor count: {sorted(sizes)}")
        block = mats[0].shape[0]
        stacked = np.concatenate(mats, axis=0)

    qs = query_descriptor_scores(stacked, subset, model, block=block)
    scores_node = ad.block_row_sum(qs.partial_node, block)
    per_query = np.asarray(scores_node.value, dtype=np.float64)
    posteriors = _stable_softmax(per_query)
    predicted = np.argmax(posteriors, axis=1)
    return EpisodeScores(per_query, posteriors, predicted, scores_node, qs)


def episode_loss(scores: EpisodeScores, labels) -> ad.Node:
    """Mean negative log posterior of the true class, as a graph node.

    labels are class positions (columns of the score matrix), not raw
    dataset class ids.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, n_way = scores.per_query.shape
    if labels.shape != (n,):
        raise InvalidInputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_way):
        raise InvalidInputError(f"labels must lie in [0, {n_way})")
    return ad.softmax_cross_entropy(scores.scores_node, labels)


def support_auxiliary_loss(selection: SupportSelection, block: int) -> ad.Node:
    """Cross-entropy of support images against their own class.

    Each support image's class scores are the soft-gate-weighted sums of its
    descriptors' class-affinity profiles; `block` is the descriptor count
    per support image (the pooled grid size).
    """
    if selection.gamma_nodes is None:
        raise ContractViolationError(
            "auxiliary loss needs support selection enabled (no soft gates recorded)")
    logits, labels = [], []
    for pos, (gamma, gates) in enumerate(zip(selection.gamma_nodes, selection.gate_nodes)):
        rows = gamma.value.shape[0]
        if block < 1 or rows % block != 0:
            raise InvalidInputError(f"{rows} pooled rows do not split into blocks of {block}")
        per_image = ad.block_row_sum(ad.mul(gamma, gates), block)
        logits.append(per_image)
        labels.extend([pos] * (rows // block))
    return ad.softmax_cross_entropy(ad.concat(logits, axis=0),
                                    np.asarray(labels, dtype=np.int64))


def accuracy(scores: EpisodeScores, labels) -> float:
    """Fraction of queries whose argmax posterior matches the true position."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != scores.predicted.shape:
        raise InvalidInputError("labels do not match prediction count")
    return float(np.mean(scores.predicted == labels))
