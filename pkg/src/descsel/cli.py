"""Command-line surface: gen-synth, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
Every command takes an explicit seed (no wall-clock defaults), and identical
flags produce byte-identical primary outputs, including under --workers > 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .config import RunConfig, apply_overrides, load_config, snapshot
from .datafiles import load_dataset, save_dataset
from .descriptors import DescriptorSet, Episode, LabeledSample
from .episodic import (ABLATION_ORDER, Dataset, EpisodeSpec, EvalReport,
                       OptimizerConfig, Pipeline, ablate, evaluate, train)
from .errors import (ContractViolationError, DataFormatError,
                     InvalidInputError, TrainingDivergedError)
from .gradcheck import gradient_check
from .selection import parse_strategy
from .synthetic import SyntheticSpec, generate_synthetic

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; the contract says 1."""

    def error(self, message):
        raise _UsageError(message)


def _json_text(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def _write(path: str, text: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def _parse_grid(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as e:
        raise _UsageError(f"--grid expects HxW, got {text!r}") from e


def _load_dataset(path: Optional[str]) -> Dataset:
    if not path:
        raise InvalidInputError("a dataset path is required (--data or [data].path)")
    samples, names = load_dataset(path)
    return Dataset(samples, names)


def _check_dims(pipeline: Pipeline, dataset: Dataset) -> None:
    sample = next(iter(dataset.by_class.values()))[0].descriptor_set
    data_d = sample.d
    if pipeline.backbone.kind == "identity":
        expected = pipeline.transform.d_in if pipeline.transform is not None else pipeline.model.d
        if data_d != expected:
            raise InvalidInputError(
                f"checkpoint expects {expected}-dim descriptors, dataset has {data_d}")
    else:
        shape = (sample.height, sample.width, data_d)
        if tuple(pipeline.backbone.input_shape) != shape:
            raise InvalidInputError(
                f"checkpoint backbone expects input {pipeline.backbone.input_shape}, "
                f"dataset grids are {shape}")


def _pipeline_from_config(cfg: RunConfig, dataset: Dataset) -> Pipeline:
    sample = next(iter(dataset.by_class.values()))[0].descriptor_set
    data_d = sample.d
    input_shape = (sample.height, sample.width, data_d)
    if cfg.backbone == "identity":
        feature_d = data_d
        input_shape = None
    else:
        feature_d = cfg.d or data_d
    model_d = cfg.d or feature_d
    if cfg.backbone == "identity" and not cfg.use_transform and model_d != data_d:
        raise InvalidInputError(
            f"[model].d = {model_d} does not match {data_d}-dim data "
            "(enable use_transform or drop d)")
    return Pipeline.build(
        d=model_d, backbone_kind=cfg.backbone, input_shape=input_shape,
        use_transform=cfg.use_transform, transform_normalize=cfg.transform_normalize,
        k_neighbors=cfg.k_neighbors, lambda1=cfg.lambda1, lambda2=cfg.lambda2,
        strategy=cfg.strategy, pool_mode=cfg.pool_mode, seed=cfg.require_seed(),
        backbone_d_out=cfg.d if cfg.backbone != "identity" else None,
        enable_support_selection=cfg.enable_support_selection,
        enable_query_selection=cfg.enable_query_selection)


# -- commands ----------------------------------------------------------------


def _cmd_gen_synth(args) -> int:
    spec = SyntheticSpec(
        classes=args.classes, descriptor_dim=args.dim, grid=_parse_grid(args.grid),
        signal_fraction=args.signal_fraction, cluster_separation=args.separation,
        noise_scale=args.noise, seed=args.seed, samples_per_class=args.samples_per_class,
        distractor_pool_size=args.distractor_pool,
        distractor_radius_factor=args.distractor_radius_factor)
    by_class, masks = generate_synthetic(spec)
    save_dataset(args.out, by_class, masks, force=args.force)
    n = sum(len(v) for v in by_class.values())
    print(f"wrote {n} samples across {spec.classes} classes to {args.out}")
    return EXIT_OK


def _resolved_config(args, need_seed: bool = True) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    overrides = {}
    for key in ("seed", "out", "path", "n_way", "k_shot", "queries_per_class",
                "k_neighbors", "lambda1", "lambda2", "strategy", "pool_mode",
                "backbone", "epochs", "episodes_per_epoch", "learning_rate",
                "episodes", "workers", "w_aux", "d"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    if getattr(args, "data", None) is not None:
        overrides["path"] = args.data
    if getattr(args, "lr", None) is not None:
        overrides["learning_rate"] = args.lr
    if getattr(args, "k", None) is not None:
        overrides["k_neighbors"] = args.k
    if getattr(args, "no_support_selection", False):
        overrides["enable_support_selection"] = False
    if getattr(args, "no_query_selection", False):
        overrides["enable_query_selection"] = False
    if getattr(args, "two_phase", False):
        overrides["two_phase"] = True
    if getattr(args, "use_transform", False):
        overrides["use_transform"] = True
    cfg = apply_overrides(cfg, **overrides)
    parse_strategy(cfg.strategy)  # validate early
    if cfg.strategy == "all" and not cfg.enable_query_selection:
        print("warning: --strategy all with --no-query-selection is redundant "
              "(both keep every query descriptor)", file=sys.stderr)
    if need_seed:
        cfg.require_seed()
    return cfg


def _cmd_train(args) -> int:
    cfg = _resolved_config(args)
    dataset = _load_dataset(cfg.path)
    pipeline = _pipeline_from_config(cfg, dataset)
    spec = EpisodeSpec(cfg.n_way, cfg.k_shot, cfg.queries_per_class, seed=cfg.seed)
    opt = OptimizerConfig(kind=cfg.kind, learning_rate=cfg.learning_rate,
                          decay_every=cfg.decay_every, decay_factor=cfg.decay_factor,
                          momentum=cfg.momentum)
    curve = train(pipeline, dataset, spec, epochs=cfg.epochs,
                  episodes_per_epoch=cfg.episodes_per_epoch, optimizer=opt,
                  seed=cfg.seed, w_aux=cfg.w_aux, two_phase=cfg.two_phase,
                  log_every=args.log_every)
    os.makedirs(cfg.out, exist_ok=True)
    ckpt = os.path.join(cfg.out, "checkpoint.json")
    pipeline.save(ckpt)
    rows = "".join(f"{e},{i},{v!r}\n" for e, i, v in curve)
    _write(os.path.join(cfg.out, "loss.csv"), "epoch,episode,loss\n" + rows)
    _write(os.path.join(cfg.out, "resolved.toml"), snapshot(cfg))
    if curve:
        tail = [v for _, _, v in curve[-100:]]
        print(f"trained {len(curve)} episodes; mean loss of last {len(tail)}: "
              f"{float(np.mean(tail)):.4f}")
    else:
        print("trained 0 episodes; checkpoint equals initialization")
    print(f"wrote {ckpt}")
    return EXIT_OK


def _load_pipeline(args, cfg: RunConfig) -> Pipeline:
    pipeline = Pipeline.load(args.checkpoint)
    if getattr(args, "strategy", None) is not None:
        pipeline.model.strategy = parse_strategy(args.strategy)
    if getattr(args, "no_support_selection", False):
        pipeline.model.enable_support_selection = False
    if getattr(args, "no_query_selection", False):
        pipeline.model.enable_query_selection = False
    return pipeline


def _cmd_eval(args) -> int:
    cfg = _resolved_config(args)
    dataset = _load_dataset(cfg.path)
    pipeline = _load_pipeline(args, cfg)
    _check_dims(pipeline, dataset)
    spec = EpisodeSpec(cfg.n_way, cfg.k_shot, cfg.queries_per_class, seed=cfg.seed)
    report = evaluate(pipeline, dataset, spec, cfg.episodes, seed=cfg.seed,
                      workers=cfg.workers)
    print(f"acc={report.mean_accuracy:.4f}±{report.ci95_halfwidth:.4f} "
          f"n={report.n_episodes}")
    if args.json_out:
        _write(args.json_out, _json_text(report.to_dict()))
    if args.csv_out:
        rows = "".join(f"{i},{a!r}\n" for i, a in enumerate(report.per_episode))
        _write(args.csv_out, "episode,accuracy\n" + rows)
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _resolved_config(args)
    dataset = _load_dataset(cfg.path)
    pipeline = _load_pipeline(args, cfg)
    _check_dims(pipeline, dataset)
    spec = EpisodeSpec(cfg.n_way, cfg.k_shot, cfg.queries_per_class, seed=cfg.seed)
    rows = ablate(pipeline, dataset, spec, cfg.episodes, seed=cfg.seed,
                  workers=cfg.workers)
    header = (f"{'support':<9}{'query':<9}{'accuracy':<11}{'ci95':<9}"
              f"{'support_kept':<14}{'query_kept'}")
    print(header)
    doc = []
    for row in rows:
        rep: EvalReport = row["report"]
        sup = "on" if row["support_selection"] else "off"
        qry = "on" if row["query_selection"] else "off"
        print(f"{sup:<9}{qry:<9}{rep.mean_accuracy:<11.4f}{rep.ci95_halfwidth:<9.4f}"
              f"{rep.selection_stats['support_retained']:<14.4f}"
              f"{rep.selection_stats['query_retained']:.4f}")
        doc.append({"support_selection": row["support_selection"],
                    "query_selection": row["query_selection"],
                    **rep.to_dict()})
    if args.json_out:
        _write(args.json_out, _json_text({"rows": doc}))
    return EXIT_OK


def _toy_episode(rng: np.random.Generator, n_way=2, k_shot=1, queries_per_class=2,
                 shape=(4, 4, 3)):
    h, w, c = shape
    def sample(cls):
        grid = rng.standard_normal((h, w, c))
        return LabeledSample(DescriptorSet(grid.reshape(h * w, c), h, w), cls)
    support = [sample(c) for c in range(n_way) for _ in range(k_shot)]
    queries = [sample(c) for c in range(n_way) for _ in range(queries_per_class)]
    return Episode(n_way, k_shot, tuple(support), tuple(queries))


def _cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    episode = _toy_episode(rng)
    pipeline = Pipeline.build(d=6, backbone_kind="patch-linear", input_shape=(4, 4, 3),
                              backbone_d_out=6, patch=2, use_transform=True,
                              seed=args.seed, dtype=np.float64)
    params = pipeline.parameters()

    def loss_fn():
        result = pipeline.run_episode(episode, train=True, need_loss=True,
                                      update_running=False)
        total = result.loss
        if result.aux_loss is not None:
            total = ad.add(total, result.aux_loss)
        return total

    fn = loss_fn
    if args._sabotage:
        # negative control: a dependence the graph cannot see
        def fn():
            leak = float((params["fgamma.w1"].value * 1e-2).sum())
            return ad.add(loss_fn(), ad.constant(np.float64(leak)))

    report = gradient_check(fn, params, epsilon=args.epsilon, tolerance=args.tolerance)
    if report.passed:
        print(f"gradcheck passed: max rel err {report.max_rel_error:.3e} "
              f"({report.worst()}) over {len(report.per_parameter)} parameter arrays")
        return EXIT_OK
    print(f"gradcheck FAILED: tolerance {report.tolerance:.1e}", file=sys.stderr)
    for name in report.failures():
        print(f"  {name}: max rel err {report.per_parameter[name]:.3e}", file=sys.stderr)
    return EXIT_CHECK


# -- argument wiring ----------------------------------------------------------


def _build_parser() -> _Parser:
    p = _Parser(prog="descsel",
                description="Adaptive local-descriptor selection for few-shot episodes")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="generate a planted-cluster dataset")
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--grid", default="6x6")
    g.add_argument("--signal-fraction", type=float, required=True)
    g.add_argument("--separation", type=float, required=True)
    g.add_argument("--noise", type=float, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--samples-per-class", type=int, default=20)
    g.add_argument("--distractor-pool", type=int, default=None)
    g.add_argument("--distractor-radius-factor", type=float, default=3.0)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=_cmd_gen_synth)

    def common(sp, checkpoint: bool):
        sp.add_argument("--config")
        sp.add_argument("--data", help="dataset directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--n-way", type=int)
        sp.add_argument("--k-shot", type=int)
        sp.add_argument("--queries-per-class", type=int)
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--episodes", type=int)
            sp.add_argument("--workers", type=int)
            sp.add_argument("--strategy")
            sp.add_argument("--no-support-selection", action="store_true")
            sp.add_argument("--no-query-selection", action="store_true")

    t = sub.add_parser("train", help="episodic training")
    common(t, checkpoint=False)
    t.add_argument("--out")
    t.add_argument("--epochs", type=int)
    t.add_argument("--episodes-per-epoch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lambda1", type=float)
    t.add_argument("--lambda2", type=float)
    t.add_argument("--k", type=int, help="neighbor count")
    t.add_argument("--d", type=int, help="descriptor dim after the transform layer")
    t.add_argument("--strategy")
    t.add_argument("--backbone")
    t.add_argument("--pool-mode")
    t.add_argument("--use-transform", action="store_true")
    t.add_argument("--w-aux", type=float)
    t.add_argument("--two-phase", action="store_true")
    t.add_argument("--no-support-selection", action="store_true")
    t.add_argument("--no-query-selection", action="store_true")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="episodic evaluation")
    common(e, checkpoint=True)
    e.add_argument("--json-out")
    e.add_argument("--csv-out")
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="2x2 selection-flag ablation")
    common(a, checkpoint=True)
    a.add_argument("--json-out")
    a.set_defaults(func=_cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--epsilon", type=float, default=1e-5)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--_sabotage", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=_cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, InvalidInputError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ContractViolationError, TrainingDivergedError) as e:
        print(f"check failure: {e}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
