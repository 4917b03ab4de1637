"""Episode sampling, the training loop, evaluation, and the ablation harness.

An episode draws n_way classes and k_shot + queries_per_class samples per
class, all without replacement, and relabels classes to positions 0..N-1.
Training runs sample -> embed -> transform -> select -> score -> loss ->
backward -> step; evaluation aggregates per-episode top-1 accuracy into a
mean with a 95% normal-approximation confidence interval.

All randomness funnels through one root seed: each episode's generator is
derived from (root, *path) spawn keys, so parallel evaluation order can
never change any number.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .datafiles import load_checkpoint, save_checkpoint
from .descriptors import DescriptorSet, Episode, LabeledSample, unflatten
from .embedding import Backbone, TransformLayer, build_backbone, embed_node
from .errors import (ContractViolationError, InvalidInputError,
                     TrainingDivergedError)
from .optim import Schedule, build_optimizer
from .scoring import (EpisodeScores, accuracy, episode_loss, episode_score,
                      support_auxiliary_loss)
from .selection import (SelectionModel, Strategy, SupportSelection,
                        parse_strategy, select_support_subset)


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int
    k_shot: int
    queries_per_class: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 2:
            raise InvalidInputError("n_way must be >= 2")
        if self.k_shot < 1:
            raise InvalidInputError("k_shot must be >= 1")
        if self.queries_per_class < 1:
            raise InvalidInputError("queries_per_class must be >= 1")


@dataclass(frozen=True)
class EvalReport:
    n_episodes: int
    mean_accuracy: float
    ci95_halfwidth: float
    per_episode: tuple
    selection_stats: dict

    def __post_init__(self):
        if not 0.0 <= self.mean_accuracy <= 1.0:
            raise ContractViolationError("mean accuracy outside [0, 1]")
        if len(self.per_episode) != self.n_episodes:
            raise ContractViolationError("per-episode list length mismatch")

    @classmethod
    def from_accuracies(cls, accs: Sequence[float], selection_stats: dict) -> "EvalReport":
        a = np.asarray(accs, dtype=np.float64)
        if a.size < 1:
            raise InvalidInputError("need at least one episode")
        ci = 1.96 * float(a.std(ddof=0)) / np.sqrt(a.size)
        return cls(int(a.size), float(a.mean()), float(ci), tuple(float(x) for x in a),
                   dict(selection_stats))

    def to_dict(self) -> dict:
        return {
            "n_episodes": self.n_episodes,
            "mean_accuracy": self.mean_accuracy,
            "ci95_halfwidth": self.ci95_halfwidth,
            "per_episode": list(self.per_episode),
            "selection_stats": dict(sorted(self.selection_stats.items())),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(doc["n_episodes"], doc["mean_accuracy"], doc["ci95_halfwidth"],
                   tuple(doc["per_episode"]), dict(doc["selection_stats"]))


def derive_rng(root_seed: int, *path: int) -> np.random.Generator:
    """Independent generator for a position in the run's episode tree."""
    return np.random.default_rng(np.random.SeedSequence(root_seed, spawn_key=tuple(path)))


class Dataset:
    """Labeled samples grouped by class, the sampler's substrate."""

    def __init__(self, samples: Sequence[LabeledSample], class_names: Sequence[str] = None):
        if not samples:
            raise InvalidInputError("dataset is empty")
        by_class: Dict[int, List[LabeledSample]] = {}
        for s in samples:
            by_class.setdefault(s.class_id, []).append(s)
        self.class_ids = sorted(by_class)
        self.by_class = by_class
        self.class_names = list(class_names) if class_names else [str(c) for c in self.class_ids]
        dims = {s.descriptor_set.d for s in samples}
        if len(dims) > 1:
            raise InvalidInputError(f"mixed descriptor dims in dataset: {sorted(dims)}")

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    def min_samples_per_class(self) -> int:
        return min(len(v) for v in self.by_class.values())


def sample_episode(dataset: Dataset, spec: EpisodeSpec,
                   rng: Optional[np.random.Generator] = None) -> Episode:
    """Draw one episode; classes and samples without replacement.

    Drawn classes are relabeled to positions 0..n_way-1 in draw order.
    Deterministic for a fixed generator state (default: seeded from spec).
    """
    if rng is None:
        rng = derive_rng(spec.seed)
    if dataset.n_classes < spec.n_way:
        raise InvalidInputError(
            f"need {spec.n_way} classes, dataset has {dataset.n_classes}")
    per_class = spec.k_shot + spec.queries_per_class
    short = [c for c in dataset.class_ids if len(dataset.by_class[c]) < per_class]
    if short:
        raise InvalidInputError(
            f"need {per_class} samples per class, too few in classes {short}")
    chosen = rng.choice(len(dataset.class_ids), size=spec.n_way, replace=False)
    support, queries = [], []
    for position, ci in enumerate(chosen):
        cid = dataset.class_ids[int(ci)]
        pool = dataset.by_class[cid]
        picks = rng.choice(len(pool), size=per_class, replace=False)
        for j in picks[:spec.k_shot]:
            support.append(LabeledSample(pool[int(j)].descriptor_set, position))
        for j in picks[spec.k_shot:]:
            queries.append(LabeledSample(pool[int(j)].descriptor_set, position))
    return Episode(spec.n_way, spec.k_shot, tuple(support), tuple(queries))


@dataclass(frozen=True)
class EpisodeResult:
    scores: EpisodeScores
    selection: SupportSelection
    labels: np.ndarray
    accuracy: float
    loss: Optional[ad.Node] = None
    aux_loss: Optional[ad.Node] = None

    def query_retained(self) -> float:
        return self.scores.query_selection.map.retained_fraction()


class Pipeline:
    """Backbone + transform + selection model, run end to end on episodes."""

    def __init__(self, model: SelectionModel, backbone: Backbone,
                 transform: Optional[TransformLayer], pool_mode: str = "union"):
        if pool_mode not in ("union", "mean"):
            raise InvalidInputError(f"unknown pool mode {pool_mode!r}")
        self.model = model
        self.backbone = backbone
        self.transform = transform
        self.pool_mode = pool_mode

    @classmethod
    def build(cls, d: int, backbone_kind: str = "identity", input_shape=None,
              use_transform: bool = False, transform_normalize: bool = True,
              k_neighbors: int = 1, lambda1: float = 10.0, lambda2: float = 10.0,
              strategy="adaptive", pool_mode: str = "union", seed: int = 0,
              dtype=np.float32, backbone_d_out: int = None, patch: int = 2,
              enable_support_selection: bool = True,
              enable_query_selection: bool = True) -> "Pipeline":
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
        backbone = build_backbone(backbone_kind, input_shape, d_out=backbone_d_out,
                                  patch=patch, rng=rng, dtype=dtype)
        feature_d = backbone.output_dims[2] if backbone.kind != "identity" else d
        transform = None
        if use_transform:
            transform = TransformLayer(feature_d, d, normalize=transform_normalize,
                                       init="identity" if feature_d == d else "random",
                                       rng=np.random.default_rng(
                                           np.random.SeedSequence(seed, spawn_key=(2,))),
                                       dtype=dtype)
            model_d = d
        else:
            model_d = feature_d
        model = SelectionModel.build(model_d, k_neighbors=k_neighbors, lambda1=lambda1,
                                     lambda2=lambda2, strategy=strategy, seed=seed,
                                     dtype=dtype,
                                     enable_support_selection=enable_support_selection,
                                     enable_query_selection=enable_query_selection)
        return cls(model, backbone, transform, pool_mode)

    # -- parameter and state plumbing -------------------------------------

    def parameters(self) -> dict:
        out = dict(self.model.parameters())
        out.update(self.backbone.parameters())
        if self.transform is not None:
            out.update(self.transform.parameters())
        return out

    def state(self) -> dict:
        out = dict(self.backbone.state())
        if self.transform is not None:
            out.update(self.transform.state())
        return out

    # -- episode execution -------------------------------------------------

    def run_episode(self, episode: Episode, train: bool = False,
                    need_loss: Optional[bool] = None,
                    update_running: Optional[bool] = None) -> EpisodeResult:
        need_loss = train if need_loss is None else need_loss
        if need_loss or train:
            return self._run(episode, train, need_loss, update_running)
        with ad.no_grad():
            return self._run(episode, train, need_loss, update_running)

    def _run(self, episode: Episode, train: bool, need_loss: bool,
             update_running: Optional[bool] = None) -> EpisodeResult:
        samples = list(episode.support) + list(episode.queries)
        nodes = [embed_node(self.backbone, unflatten(s.descriptor_set), train=train,
                            update_running=update_running)[0]
                 for s in samples]
        m = nodes[0].value.shape[0]
        stacked = ad.concat(nodes, axis=0) if len(nodes) > 1 else nodes[0]
        if self.transform is not None:
            stacked = self.transform.apply(stacked, train=train,
                                           update_running=update_running)

        groups = [[] for _ in range(episode.n_way)]
        for i, s in enumerate(episode.support):
            groups[s.class_id].append(i)
        pools = []
        for rows_of in groups:
            if self.pool_mode == "union":
                idx = np.concatenate([np.arange(i * m, (i + 1) * m) for i in rows_of])
                pools.append(ad.gather_rows(stacked, idx))
            else:
                shot_nodes = [ad.gather_rows(stacked, np.arange(i * m, (i + 1) * m))
                              for i in rows_of]
                total = shot_nodes[0]
                for nd in shot_nodes[1:]:
                    total = ad.add(total, nd)
                scale = np.asarray(1.0 / len(shot_nodes), dtype=np.asarray(total.value).dtype)
                pools.append(ad.mul(total, scale))

        selection = select_support_subset(pools, self.model, pool_mode=self.pool_mode)

        q_start = len(episode.support) * m
        q_rows = len(episode.queries) * m
        qnode = ad.gather_rows(stacked, np.arange(q_start, q_start + q_rows))
        scores = episode_score(qnode, selection.subset, self.model, block=m)
        labels = np.asarray([q.class_id for q in episode.queries], dtype=np.int64)
        acc = accuracy(scores, labels)

        loss = aux = None
        if need_loss:
            loss = episode_loss(scores, labels)
            if self.model.enable_support_selection:
                aux = support_auxiliary_loss(selection, block=m)
        return EpisodeResult(scores, selection, labels, acc, loss, aux)

    # -- persistence ---------------------------------------------------------

    def save(self, path: str) -> None:
        arrays = {name: np.asarray(p.value) for name, p in self.parameters().items()}
        arrays.update(self.state())
        meta = {
            "d": self.model.d,
            "k_neighbors": self.model.k_neighbors,
            "lambda1": self.model.lambda1,
            "lambda2": self.model.lambda2,
            "strategy": self.model.strategy.describe(),
            "enable_support_selection": self.model.enable_support_selection,
            "enable_query_selection": self.model.enable_query_selection,
            "pool_mode": self.pool_mode,
            "backbone_kind": self.backbone.kind,
            "backbone_input_shape": list(self.backbone.input_shape) if self.backbone.input_shape else None,
            "backbone_d_out": self.backbone.output_dims[2] if self.backbone.kind != "identity" else None,
            "backbone_patch": self.backbone.patch,
            "use_transform": self.transform is not None,
            "transform_normalize": self.transform.norm is not None if self.transform else True,
        }
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path: str, dtype=np.float32) -> "Pipeline":
        arrays, meta = load_checkpoint(path)
        shape = meta.get("backbone_input_shape")
        pipe = cls.build(
            d=int(meta["d"]),
            backbone_kind=meta.get("backbone_kind", "identity"),
            input_shape=tuple(shape) if shape else None,
            use_transform=bool(meta.get("use_transform", False)),
            transform_normalize=bool(meta.get("transform_normalize", True)),
            k_neighbors=int(meta["k_neighbors"]),
            lambda1=float(meta["lambda1"]),
            lambda2=float(meta["lambda2"]),
            strategy=meta.get("strategy", "adaptive"),
            pool_mode=meta.get("pool_mode", "union"),
            backbone_d_out=meta.get("backbone_d_out"),
            patch=int(meta.get("backbone_patch", 2) or 2),
            enable_support_selection=bool(meta.get("enable_support_selection", True)),
            enable_query_selection=bool(meta.get("enable_query_selection", True)),
            dtype=dtype,
        )
        params = pipe.parameters()
        for name, value in arrays.items():
            if name in params:
                want = params[name].value.shape
                got = np.asarray(value).shape
                if want != got:
                    raise InvalidInputError(
                        f"checkpoint array {name} has shape {got}, model expects {want}")
                params[name].value = np.asarray(value, dtype=dtype)
        norms = list(pipe.backbone.norms)
        if pipe.transform is not None and pipe.transform.norm is not None:
            norms.append(pipe.transform.norm)
        for norm in norms:
            key = f"{norm.prefix}.running_mean"
            if key in arrays:
                norm.load_state({k: arrays[k] for k in
                                 (f"{norm.prefix}.running_mean", f"{norm.prefix}.running_var")})
        return pipe


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    decay_every: int = 10
    decay_factor: float = 0.1
    momentum: float = 0.9

    def schedule(self, epochs: int) -> Schedule:
        return Schedule.every(self.decay_every, self.decay_factor, epochs)


def train(pipeline: Pipeline, dataset: Dataset, spec: EpisodeSpec, epochs: int,
          episodes_per_epoch: int, optimizer: OptimizerConfig = OptimizerConfig(),
          seed: int = 0, w_aux: float = 1.0, two_phase: bool = False,
          log_every: int = 0) -> List[Tuple[int, int, float]]:
    """Episodic training; returns the loss curve as (epoch, episode, loss).

    Raises TrainingDivergedError with diagnostics on a non-finite loss.
    With two_phase=True, the first half of the epochs updates only the
    support threshold MLP on the auxiliary loss, the second half updates the
    remaining parameters on the episode loss.
    """
    if epochs < 0 or episodes_per_epoch < 1:
        raise InvalidInputError("epochs must be >= 0 and episodes_per_epoch >= 1")
    params = pipeline.parameters()
    curve: List[Tuple[int, int, float]] = []
    if epochs == 0:
        return curve

    schedule = optimizer.schedule(epochs)

    def make_opt(subset: dict):
        return build_optimizer(optimizer.kind, subset, optimizer.learning_rate,
                               schedule=schedule, momentum=optimizer.momentum)

    gamma_params = {n: p for n, p in params.items() if n.startswith("fgamma.")}
    other_params = {n: p for n, p in params.items() if not n.startswith("fgamma.")}
    split = (epochs + 1) // 2 if two_phase else None
    opt = make_opt(params) if not two_phase else None

    for epoch in range(epochs):
        if two_phase:
            phase_gamma = epoch < split
            opt = make_opt(gamma_params if phase_gamma else other_params)
        for index in range(episodes_per_epoch):
            rng = derive_rng(seed, epoch, index)
            episode = sample_episode(dataset, spec, rng)
            result = pipeline.run_episode(episode, train=True)
            if two_phase and epoch < split:
                if result.aux_loss is None:
                    raise ContractViolationError(
                        "two-phase training needs support selection enabled")
                total = result.aux_loss
            else:
                total = result.loss
                if result.aux_loss is not None and w_aux != 0.0 and not two_phase:
                    total = ad.add(total, ad.mul(result.aux_loss,
                                                 np.asarray(w_aux, dtype=np.asarray(
                                                     result.aux_loss.value).dtype)))
            value = float(np.asarray(total.value))
            if not np.isfinite(value):
                norms = {n: float(np.linalg.norm(p.value)) for n, p in params.items()}
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} episode {index}",
                    diagnostics={"epoch": epoch, "episode": index,
                                 "seed_path": [seed, epoch, index],
                                 "loss": value, "parameter_norms": norms})
            opt.zero_grad()
            ad.backward(total)
            opt.step(epoch=epoch)
            curve.append((epoch, index, value))
            if log_every and (index + 1) % log_every == 0:
                recent = [v for _, _, v in curve[-log_every:]]
                print(f"epoch {epoch} episode {index + 1}/{episodes_per_epoch} "
                      f"loss {np.mean(recent):.4f}")
    opt.zero_grad()
    return curve


def evaluate(pipeline: Pipeline, dataset: Dataset, spec: EpisodeSpec,
             n_episodes: int, seed: int = 0, workers: int = 1) -> EvalReport:
    """Frozen-model evaluation over independently seeded episodes."""
    if n_episodes < 1:
        raise InvalidInputError("n_episodes must be >= 1")
    if workers < 1:
        raise InvalidInputError("workers must be >= 1")

    def one(i: int):
        episode = sample_episode(dataset, spec, derive_rng(seed, i))
        result = pipeline.run_episode(episode, train=False, need_loss=False)
        return (result.accuracy, result.selection.retained_fraction(),
                result.query_retained())

    if workers == 1:
        rows = [one(i) for i in range(n_episodes)]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, range(n_episodes)))
    accs = [r[0] for r in rows]
    stats = {
        "support_retained": float(np.mean([r[1] for r in rows])),
        "query_retained": float(np.mean([r[2] for r in rows])),
    }
    return EvalReport.from_accuracies(accs, stats)


ABLATION_ORDER = ((False, False), (False, True), (True, False), (True, True))


def ablate(pipeline: Pipeline, dataset: Dataset, spec: EpisodeSpec,
           n_episodes: int, seed: int = 0, workers: int = 1) -> List[dict]:
    """Evaluate the four selection-flag combinations on identical seeds.

    Rows follow (support off, query off) -> (off, on) -> (on, off) -> (on, on).
    """
    saved = (pipeline.model.enable_support_selection,
             pipeline.model.enable_query_selection)
    rows = []
    try:
        for sup_on, qry_on in ABLATION_ORDER:
            pipeline.model.enable_support_selection = sup_on
            pipeline.model.enable_query_selection = qry_on
            report = evaluate(pipeline, dataset, spec, n_episodes, seed=seed,
                              workers=workers)
            rows.append({"support_selection": sup_on, "query_selection": qry_on,
                         "report": report})
    finally:
        (pipeline.model.enable_support_selection,
         pipeline.model.enable_query_selection) = saved
    return rows
