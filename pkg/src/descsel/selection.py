"""Adaptive selection of local descriptors on both sides of an episode.

Support side: every pooled support descriptor gets a class-affinity profile
(sum of its k nearest cosine neighbors inside each class pool, its own row
excluded from its own class), a discriminative score R (max softmax of the
profile), a learned threshold V* from a small MLP over the descriptor and a
cross-class context vector, and a sharp sigmoid gate M = sigmoid(lam*(R-V*)).
Descriptors with M >= 0.5 form the retained subset; a class that would come
out empty keeps its single highest-gate descriptor.

Query side: the same profile/score machinery runs against the retained
subset, with the threshold MLP conditioned on the mean of the best-matching
class's retained descriptors.  Baseline strategies (keep everything, fixed
threshold on R, or the top tau scores per query set) replace the learned
gate for comparison runs.

Everything here builds autodiff graphs; under no_grad the same code runs as
plain numpy.  Hard decisions (neighbor indices, argmax classes, subset
membership) are constants of the graph; gradients reach the threshold MLPs
only through the soft gate values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .descriptors import ClassPool, DescriptorSet, Episode, build_class_pool
from .errors import InvalidInputError
from .kernels import topk_indices

STRATEGY_KINDS = ("adaptive", "all", "fixed_threshold", "top_tau")


@dataclass(frozen=True)
class Strategy:
    """Query-side gating strategy."""

    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise InvalidInputError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "fixed_threshold" and not (0.0 < self.value < 1.0):
            raise InvalidInputError("fixed_threshold needs a cutoff in (0, 1)")
        if self.kind == "top_tau":
            if self.value < 1 or self.value != int(self.value):
                raise InvalidInputError("top_tau needs a positive integer count")

    def describe(self) -> str:
        if self.kind == "fixed_threshold":
            return f"fixed_threshold:{self.value:g}"
        if self.kind == "top_tau":
            return f"top_tau:{int(self.value)}"
        return self.kind


def parse_strategy(text) -> Strategy:
    """Parse 'adaptive' | 'all' | 'fixed_threshold:V' | 'top_tau:T'."""
    if isinstance(text, Strategy):
        return text
    name, _, arg = str(text).partition(":")
    name = name.strip()
    if name in ("adaptive", "all"):
        if arg:
            raise InvalidInputError(f"strategy {name!r} takes no argument")
        return Strategy(name)
    if name == "fixed_threshold":
        if not arg:
            raise InvalidInputError("fixed_threshold needs a value, e.g. fixed_threshold:0.4")
        try:
            value = float(arg)
        except ValueError:
            raise InvalidInputError(f"fixed_threshold value {arg!r} is not a number") from None
        return Strategy(name, value)
    if name == "top_tau":
        if not arg:
            raise InvalidInputError("top_tau needs a count, e.g. top_tau:20")
        try:
            value = int(arg)
        except ValueError:
            raise InvalidInputError(f"top_tau count {arg!r} is not an integer") from None
        return Strategy(name, float(value))
    raise InvalidInputError(f"unknown strategy {text!r}")


class ThresholdNet:
    """Two fully connected layers with LeakyReLU, sigmoid output in (0, 1).

    Input is a descriptor concatenated with a context vector (2d wide);
    hidden width d; single output unit.
    """

    def __init__(self, d: int, rng: np.random.Generator = None, init: str = "default",
                 dtype=np.float32, prefix: str = "threshold"):
        if d < 1:
            raise InvalidInputError("descriptor dimension must be >= 1")
        rng = rng or np.random.default_rng(0)
        w1 = (rng.standard_normal((2 * d, d)) * np.sqrt(2.0 / (2 * d))).astype(dtype)
        if init == "zero":
            w2 = np.zeros((d, 1), dtype=dtype)
            b2 = np.zeros((1, 1), dtype=dtype)
        elif init == "default":
            w2 = (rng.standard_normal((d, 1)) * 0.01).astype(dtype)
            # negative output bias opens the gates at the start of training
            b2 = np.full((1, 1), -2.0, dtype=dtype)
        else:
            raise InvalidInputError(f"unknown init {init!r}")
        self.w1 = ad.parameter(w1, f"{prefix}.w1")
        self.b1 = ad.parameter(np.zeros((1, d), dtype=dtype), f"{prefix}.b1")
        self.w2 = ad.parameter(w2, f"{prefix}.w2")
        self.b2 = ad.parameter(b2, f"{prefix}.b2")
        self.d = d
        self.prefix = prefix

    def logits(self, x: ad.Node) -> ad.Node:
        if x.value.ndim != 2 or x.value.shape[1] != 2 * self.d:
            raise InvalidInputError(
                f"{self.prefix} expects (n, {2 * self.d}) input, got {x.value.shape}")
        h = ad.leaky_relu(ad.add(ad.matmul(x, self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)

    def apply(self, x: ad.Node) -> ad.Node:
        """Threshold values in (0, 1), one per input row."""
        return ad.sigmoid(self.logits(x))

    def parameters(self) -> dict:
        return {p.name: p for p in (self.w1, self.b1, self.w2, self.b2)}


@dataclass
class SelectionModel:
    """Both threshold MLPs plus the gating hyperparameters and flags."""

    f_gamma: ThresholdNet
    f_psi: ThresholdNet
    lambda1: float = 10.0
    lambda2: float = 10.0
    k_neighbors: int = 1
    strategy: Strategy = field(default_factory=lambda: Strategy("adaptive"))
    enable_support_selection: bool = True
    enable_query_selection: bool = True

    def __post_init__(self):
        if isinstance(self.strategy, str):
            self.strategy = parse_strategy(self.strategy)
        if self.lambda1 <= 0 or self.lambda2 <= 0:
            raise InvalidInputError("gate sharpness must be positive")
        if self.k_neighbors < 1:
            raise InvalidInputError("k_neighbors must be >= 1")

    @classmethod
    def build(cls, d: int, k_neighbors: int = 1, lambda1: float = 10.0,
              lambda2: float = 10.0, strategy="adaptive", seed: int = 0,
              init: str = "default", dtype=np.float32, **flags) -> "SelectionModel":
        root = np.random.SeedSequence(seed)
        rg, rp = [np.random.default_rng(s) for s in root.spawn(2)]
        return cls(ThresholdNet(d, rg, init, dtype, prefix="fgamma"),
                   ThresholdNet(d, rp, init, dtype, prefix="fpsi"),
                   lambda1, lambda2, k_neighbors, parse_strategy(strategy), **flags)

    @property
    def d(self) -> int:
        return self.f_gamma.d

    def parameters(self) -> dict:
        out = self.f_gamma.parameters()
        out.update(self.f_psi.parameters())
        return out


@dataclass(frozen=True)
class AttentionMap:
    """Per-descriptor gate values, learned thresholds, and scores."""

    gates: np.ndarray
    thresholds: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        g, t, s = (np.asarray(a, dtype=np.float64).ravel()
                   for a in (self.gates, self.thresholds, self.scores))
        if not (g.shape == t.shape == s.shape):
            raise InvalidInputError("attention map fields must have equal length")
        for name, a in (("gates", g), ("thresholds", t), ("scores", s)):
            if not np.all(np.isfinite(a)):
                raise InvalidInputError(f"attention map {name} must be finite")
        # baseline strategies report hard 0/1 gates, adaptive gates stay inside (0, 1)
        if np.any(g < 0.0) or np.any(g > 1.0):
            raise InvalidInputError("gates must lie in [0, 1]")
        object.__setattr__(self, "gates", g)
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "scores", s)

    def __len__(self):
        return self.gates.shape[0]

    def retained_fraction(self) -> float:
        """Fraction of descriptors whose gate clears 0.5."""
        if len(self) == 0:
            return 1.0
        return float(np.mean(self.gates >= 0.5))


@dataclass(frozen=True)
class SupportSubset:
    """Retained support descriptors per class, with provenance rows."""

    class_ids: tuple
    matrices: tuple      # value matrices, one (p*_c, d) per class
    indices: tuple       # rows into the original class pools
    nodes: tuple = None  # autodiff handles onto the same matrices

    def __post_init__(self):
        if len(self.class_ids) < 2:
            raise InvalidInputError("support subset needs at least 2 classes")
        if not (len(self.class_ids) == len(self.matrices) == len(self.indices)):
            raise InvalidInputError("support subset fields must align")
        for cid, mat, idx in zip(self.class_ids, self.matrices, self.indices):
            if mat.shape[0] < 1:
                raise InvalidInputError(f"class {cid} retained no descriptors")
            if mat.shape[0] != len(idx):
                raise InvalidInputError("provenance indices must match matrix rows")

    @property
    def n_way(self) -> int:
        return len(self.class_ids)

    def retained_fraction(self, pool_sizes) -> float:
        kept = sum(m.shape[0] for m in self.matrices)
        return kept / float(sum(pool_sizes))


@dataclass(frozen=True)
class SupportSelection:
    """Support subset plus the per-class attention maps and soft gate graph."""

    subset: SupportSubset
    maps: tuple
    pool_sizes: tuple
    gamma_nodes: tuple = None   # per class: (p_c, N) class-affinity profiles
    gate_nodes: tuple = None    # per class: (p_c, 1) soft gates

    def retained_fraction(self) -> float:
        return self.subset.retained_fraction(self.pool_sizes)


@dataclass(frozen=True)
class QuerySelection:
    """Per-query-descriptor profiles, scores, gates, and partial class scores."""

    gamma: np.ndarray        # (M, N)
    scores: np.ndarray       # (M,) discriminative scores
    gates: np.ndarray        # (M,)
    classes: np.ndarray      # (M,) argmax class position per descriptor
    map: AttentionMap
    partial_node: ad.Node    # (M, N) gamma * gate, summed downstream per image

    @property
    def partials(self) -> np.ndarray:
        return np.asarray(self.partial_node.value)


def _normalized_rows(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=-1, keepdims=True)
    return np.divide(mat, np.where(norms == 0.0, 1.0, norms))


def knn(query_vector, pool, k: int, exclude_index: Optional[int] = None):
    """Indices and cosine similarities of the k nearest pool rows.

    k is clamped to the candidates that remain after exclusion; ties break
    toward the lowest index.  Zero-norm vectors contribute similarity 0.
    """
    qv = np.asarray(query_vector, dtype=np.float64).ravel()
    mat = np.asarray(pool, dtype=np.float64)
    if mat.ndim != 2:
        raise InvalidInputError(f"pool must be 2-D, got shape {mat.shape}")
    if mat.shape[0] == 0:
        raise InvalidInputError("pool is empty")
    if mat.shape[1] != qv.shape[0]:
        raise InvalidInputError(f"query dim {qv.shape[0]} != pool dim {mat.shape[1]}")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    exclude = None
    if exclude_index is not None:
        if not 0 <= exclude_index < mat.shape[0]:
            raise InvalidInputError(f"exclude_index {exclude_index} out of range")
        if mat.shape[0] == 1:
            raise InvalidInputError("pool is empty after exclusion")
        exclude = np.array([exclude_index], dtype=np.int64)
    sims = _normalized_rows(qv[None, :]) @ _normalized_rows(mat).T
    idx = topk_indices(sims, k, exclude=exclude)[0]
    idx = idx[idx >= 0]
    return idx, sims[0, idx]


def support_class_similarity(x, pools: Sequence, k: int,
                             own_class=None, own_row: Optional[int] = None) -> np.ndarray:
    """Class-affinity profile of one support descriptor.

    pools is a sequence of ClassPool (matched by class_id) or raw matrices
    (matched by position).  The descriptor's own pool row is excluded from
    its own class; a single-row own pool yields an empty neighbor sum, 0.
    """
    gamma = np.zeros(len(pools), dtype=np.float64)
    if len(pools) == 0:
        raise InvalidInputError("need at least one class pool")
    for pos, pool in enumerate(pools):
        if isinstance(pool, ClassPool):
            mat, cid = pool.pool, pool.class_id
        else:
            mat, cid = np.asarray(pool), pos
        excl = None
        if own_class is not None and cid == own_class:
            if own_row is None:
                raise InvalidInputError("own_row required when own_class is given")
            excl = own_row
            if mat.shape[0] == 1:
                continue  # empty neighbor set, gamma stays 0
        idx, sims = knn(x, mat, k, exclude_index=excl)
        gamma[pos] = sims.sum()
    return gamma


def discriminative_score(gamma) -> float:
    """R = largest softmax probability of the class-affinity profile."""
    g = np.asarray(gamma, dtype=np.float64).ravel()
    if g.size == 0 or not np.all(np.isfinite(g)):
        raise InvalidInputError("profile must be a nonempty finite vector")
    z = np.exp(g - g.max())
    return float(z.max() / z.sum())


def support_threshold(net: ThresholdNet, x, context) -> float:
    """V* for one descriptor given its pooled cross-class context."""
    x = np.asarray(x, dtype=np.float64).ravel()
    context = np.asarray(context, dtype=np.float64).ravel()
    if x.shape[0] != net.d or context.shape[0] != net.d:
        raise InvalidInputError(
            f"descriptor and context must be {net.d}-vectors, got {x.shape[0]} and {context.shape[0]}")
    with ad.no_grad():
        v = net.apply(ad.constant(np.concatenate([x, context])[None, :]))
    return float(v.value[0, 0])


def _gate_node(score: ad.Node, threshold: ad.Node, sharpness: float) -> ad.Node:
    lam = np.asarray(sharpness, dtype=np.asarray(score.value).dtype)
    return ad.sigmoid(ad.mul(ad.sub(score, threshold), lam))


def gate(score, threshold, sharpness: float):
    """M = 1 / (1 + exp(-sharpness * (score - threshold)))."""
    if sharpness <= 0:
        raise InvalidInputError("gate sharpness must be positive")
    s = np.asarray(score, dtype=np.float64)
    t = np.asarray(threshold, dtype=np.float64)
    with ad.no_grad():
        out = _gate_node(ad.constant(s), ad.constant(t), sharpness).value
    return float(out) if np.ndim(out) == 0 else np.asarray(out)


def _coerce_pools(source, pool_mode: str = "union"):
    """Normalize an Episode or a pool sequence to (nodes, class_ids)."""
    if isinstance(source, Episode):
        groups = source.support_by_class()
        ids = list(range(len(groups)))
        pools = [build_class_pool(groups[c], mode=pool_mode) for c in ids]
        return [ad.constant(p.pool) for p in pools], ids
    nodes, ids = [], []
    for pos, item in enumerate(source):
        if isinstance(item, ClassPool):
            nodes.append(ad.constant(item.pool))
            ids.append(item.class_id)
        elif isinstance(item, ad.Node):
            nodes.append(item)
            ids.append(pos)
        else:
            nodes.append(ad.constant(np.asarray(item)))
            ids.append(pos)
    return nodes, ids


def _profile_against(normed_query: ad.Node, normed_pools: Sequence[ad.Node],
                     k: int, self_class: Optional[int] = None) -> ad.Node:
    """Stacked class-affinity profiles: (rows, N) sums of top-k cosine sims."""
    cols = []
    rows = normed_query.value.shape[0]
    for c, pool in enumerate(normed_pools):
        sims = ad.matmul(normed_query, ad.transpose(pool))
        exclude = np.arange(rows, dtype=np.int64) if c == self_class else None
        idx = topk_indices(np.asarray(sims.value, dtype=np.float64), k, exclude=exclude)
        cols.append(ad.gather_topk_sum(sims, idx))
    return ad.concat(cols, axis=1)


def select_support_subset(source, model: SelectionModel,
                          pool_mode: str = "union") -> SupportSelection:
    """Run support-side selection over an Episode or prebuilt class pools.

    With selection disabled the full pools pass through (gates reported as 1).
    Otherwise every pooled descriptor is scored and gated; membership is
    gate >= 0.5 with a top-1 fallback so no class comes out empty.
    """
    nodes, ids = _coerce_pools(source, pool_mode)
    n = len(nodes)
    if n < 2:
        raise InvalidInputError("support selection needs at least 2 classes")
    sizes = tuple(nd.value.shape[0] for nd in nodes)

    if not model.enable_support_selection:
        mats = tuple(np.asarray(nd.value) for nd in nodes)
        idxs = tuple(np.arange(p, dtype=np.int64) for p in sizes)
        maps = tuple(AttentionMap(np.ones(p), np.full(p, 0.5), np.zeros(p)) for p in sizes)
        subset = SupportSubset(tuple(ids), mats, idxs, nodes=tuple(nodes))
        return SupportSelection(subset, maps, sizes)

    if len(set(sizes)) != 1:
        raise InvalidInputError(f"class pools must share a size for context pooling, got {sizes}")
    p = sizes[0]

    total = nodes[0]
    for nd in nodes[1:]:
        total = ad.add(total, nd)
    inv = np.asarray(1.0 / (n - 1), dtype=np.asarray(total.value).dtype)

    normed = [ad.row_normalize(nd) for nd in nodes]
    kept_nodes, kept_mats, kept_idx = [], [], []
    maps, gamma_nodes, gate_nodes = [], [], []
    for j in range(n):
        gamma = _profile_against(normed[j], normed, model.k_neighbors, self_class=j)
        soft = ad.softmax(gamma, axis=1)
        score, _ = ad.max_with_index(soft, axis=1, keepdims=True)
        context = ad.mul(ad.sub(total, nodes[j]), inv)
        vstar = model.f_gamma.apply(ad.concat([nodes[j], context], axis=1))
        gates = _gate_node(score, vstar, model.lambda1)

        gvals = np.asarray(gates.value)[:, 0]
        keep = np.flatnonzero(gvals >= 0.5)
        if keep.size == 0:
            keep = np.array([int(np.argmax(gvals))], dtype=np.int64)
        node = ad.gather_rows(nodes[j], keep)
        kept_nodes.append(node)
        kept_mats.append(np.asarray(node.value))
        kept_idx.append(keep.astype(np.int64))
        maps.append(AttentionMap(gvals.astype(np.float64),
                                 np.asarray(vstar.value)[:, 0].astype(np.float64),
                                 np.asarray(score.value)[:, 0].astype(np.float64)))
        gamma_nodes.append(gamma)
        gate_nodes.append(gates)

    subset = SupportSubset(tuple(ids), tuple(kept_mats), tuple(kept_idx),
                           nodes=tuple(kept_nodes))
    return SupportSelection(subset, tuple(maps), sizes,
                            tuple(gamma_nodes), tuple(gate_nodes))


def query_descriptor_scores(q, subset: SupportSubset, model: SelectionModel,
                            block: Optional[int] = None) -> QuerySelection:
    """Score and gate query descriptors against a retained support subset.

    q may be a DescriptorSet, an (M, d) array, or an autodiff node; several
    query sets may be stacked row-wise with `block` giving the rows per set
    (top_tau and downstream per-image sums operate per block).
    """
    if isinstance(q, DescriptorSet):
        qn = ad.constant(q.descriptors)
    elif isinstance(q, ad.Node):
        qn = q
    else:
        qn = ad.constant(np.asarray(q))
    rows = qn.value.shape[0]
    block = rows if block is None else int(block)
    if block < 1 or rows % block != 0:
        raise InvalidInputError(f"{rows} query rows do not split into blocks of {block}")
    if subset.nodes is None:
        raise InvalidInputError("subset carries no graph handles; rebuild via select_support_subset")

    normed_q = ad.row_normalize(qn)
    normed_pools = [ad.row_normalize(nd) for nd in subset.nodes]
    gamma = _profile_against(normed_q, normed_pools, model.k_neighbors)
    soft = ad.softmax(gamma, axis=1)
    score, cstar = ad.max_with_index(soft, axis=1, keepdims=True)
    classes = np.asarray(cstar).ravel().astype(np.int64)
    svals = np.asarray(score.value)[:, 0]

    strat = model.strategy
    if not model.enable_query_selection:
        gates = ad.constant(np.ones((rows, 1), dtype=np.asarray(gamma.value).dtype))
        thresholds = np.full(rows, 0.5)
    elif strat.kind == "adaptive":
        means = ad.concat([ad.reduce_mean(nd, axis=0, keepdims=True) for nd in subset.nodes],
                          axis=0)
        context = ad.gather_rows(means, classes)
        vstar = model.f_psi.apply(ad.concat([qn, context], axis=1))
        gates = _gate_node(score, vstar, model.lambda2)
        thresholds = np.asarray(vstar.value)[:, 0].astype(np.float64)
    elif strat.kind == "all":
        gates = ad.constant(np.ones((rows, 1), dtype=np.asarray(gamma.value).dtype))
        thresholds = np.full(rows, 0.5)
    elif strat.kind == "fixed_threshold":
        hard = (svals >= strat.value).astype(np.asarray(gamma.value).dtype)
        gates = ad.constant(hard[:, None])
        thresholds = np.full(rows, strat.value)
    elif strat.kind == "top_tau":
        hard = np.zeros(rows, dtype=np.asarray(gamma.value).dtype)
        thresholds = np.empty(rows, dtype=np.float64)
        tau = int(strat.value)
        for b in range(rows // block):
            sl = slice(b * block, (b + 1) * block)
            order = np.argsort(-svals[sl], kind="stable")
            t = min(tau, block)
            hard[sl][order[:t]] = 1.0
            thresholds[sl] = svals[sl][order[t - 1]]
        gates = ad.constant(hard[:, None])
    else:  # pragma: no cover - Strategy validates kind
        raise InvalidInputError(f"unknown strategy {strat.kind!r}")

    partial = ad.mul(gamma, gates)
    gvals = np.asarray(gates.value)[:, 0].astype(np.float64)
    qmap = AttentionMap(gvals, thresholds, svals.astype(np.float64))
    return QuerySelection(np.asarray(gamma.value), svals.astype(np.float64),
                          gvals, classes, qmap, partial)
