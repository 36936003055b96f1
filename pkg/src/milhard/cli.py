"""``milhard`` command line.

Every subcommand writes one JSON document to stdout and a human-readable
summary to stderr. Exit status: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bagdata import (
    SynthConfig,
    append_bags,
    bag_size_stats,
    generate_synthetic,
    load_bags,
    save_bags,
)
from .errors import BagFormatError, ConfigError, DimensionError, EmptyPoolError, MilHardError
from .experiment import PROFILES, VARIANTS, PipelineConfig, aggregate_record, predict, run_experiment
from .metrics import AggregateReport, MetricSummary, evaluate, format_table
from .milnet import Dims, grad_check_trials, load_checkpoint, save_checkpoint
from .mining import (
    GenConfig,
    augment_training_set,
    build_hard_pool,
    extract_features,
    generate_bags,
    save_pool,
)
from .optim import AdamHyper, init_model, train
from .preprocess import image_to_bag, read_pnm

log = logging.getLogger("milhard")

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _say(text: str) -> None:
    print(text, file=sys.stderr)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, ensure_ascii=False) + "\n")


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# shared option groups


def _add_training_opts(p):
    p.add_argument("--profile", choices=sorted(PROFILES), default="synthetic")
    p.add_argument("--lambda", dest="lam", type=float, default=2.0, help="adaptive weight multiplier (>= 1)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="override the profile learning rate")
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--hidden", type=int, nargs="*", default=None, help="embedder hidden widths")
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--attn-dim", type=int, default=None)
    p.add_argument("--augment", action="store_true", help="online dihedral augmentation (image-derived bags)")


def _pipeline_config(args, **extra) -> PipelineConfig:
    kw = dict(profile=args.profile, lam=args.lam, epochs=args.epochs, learning_rate=args.lr,
              weight_decay=args.weight_decay, seed=args.seed, augment=args.augment)
    defaults = PipelineConfig()
    kw["hidden"] = tuple(args.hidden) if args.hidden is not None else defaults.hidden
    kw["embed_dim"] = args.embed_dim or defaults.embed_dim
    kw["attn_dim"] = args.attn_dim or defaults.attn_dim
    kw.update(extra)
    return PipelineConfig(**kw)


def _train_and_save(dataset, args, out):
    cfg = _pipeline_config(args)
    hyper = cfg.hyper()
    model = init_model(cfg.dims(dataset.feature_dim), args.seed, lam=cfg.lam)
    report = train(model, dataset, hyper, seed=args.seed, augment=cfg.augment)
    save_checkpoint(report.best_model, out, seed=args.seed, epoch=report.best_epoch)
    result = report.to_dict(str(out))
    result["hyper"] = {"learning_rate": hyper.learning_rate, "weight_decay": hyper.weight_decay,
                       "epochs": hyper.epochs, "beta1": hyper.beta1, "beta2": hyper.beta2}
    result["lambda"] = cfg.lam
    if getattr(args, "figures", None):
        from .plotting import loss_curve

        Path(args.figures).mkdir(parents=True, exist_ok=True)
        result["figures"] = [str(loss_curve(report.losses, report.best_epoch, Path(args.figures) / "loss.png"))]
    if getattr(args, "report", None):
        _write_json(result, args.report)
    _say(f"trained {hyper.epochs} epochs on {len(dataset)} bags; best epoch {report.best_epoch} "
         f"(loss {report.losses[report.best_epoch]:.6f}); checkpoint {out}")
    return result


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    cfg = SynthConfig(
        n_bags=args.bags, positive_fraction=args.positive_fraction,
        bag_size_range=(args.min_size, args.max_size), feature_dim=args.feature_dim,
        cluster_spread=args.spread, confuser_rate=args.confuser_rate, witness_rate=args.witness_rate,
        seed=args.seed,
    )
    ds = generate_synthetic(cfg)
    save_bags(ds, args.out)
    n_pos = int(ds.labels.sum())
    _say(f"wrote {len(ds)} bags ({n_pos} positive) with D={ds.feature_dim} to {args.out}")
    return {"out": str(args.out), "bags": len(ds), "positive": n_pos, "config": cfg.to_dict()}


def cmd_preprocess(args):
    written = []
    patch_shape = None
    for image_path in args.image:
        img = read_pnm(image_path)
        bag_id = Path(image_path).stem if len(args.image) > 1 or not args.bag_id else args.bag_id
        bag = image_to_bag(img, args.label, bag_id, patch_side=args.patch_side, min_tissue=args.tissue_fraction)
        patch_shape = (args.patch_side, args.patch_side, img.channels)
        append_bags([bag], args.out, bag.dim, provenance=f"preprocess patch_side={args.patch_side}",
                    patch_shape=patch_shape)
        written.append({"bag_id": bag.bag_id, "instances": bag.size, "feature_dim": bag.dim})
        _say(f"{image_path}: {bag.size} patches kept -> bag {bag.bag_id!r}")
    return {"out": str(args.out), "bags": written}


def cmd_train(args):
    ds = load_bags(args.data)
    return _train_and_save(ds, args, args.out)


def cmd_mine(args):
    ds = load_bags(args.data)
    model, _ = load_checkpoint(args.model)
    pool = build_hard_pool(model, ds)
    if args.pool_out:
        save_pool(pool, args.pool_out)
    result = {"pool_size": pool.size, "false_positive_bags": sorted(set(pool.source_bag_ids)),
              "strategy": args.strategy.upper(), "generated": 0, "out": None}
    if pool.size == 0:
        _say("no false-positive bags: hard pool is empty, nothing to generate")
        return result
    n_neg = int((ds.labels == 0).sum())
    gen = GenConfig(args.strategy, bag_size_stats(ds), bag_count=args.bag_count or max(n_neg, 1),
                    clusters=min(args.clusters, pool.size), seed=args.seed)
    bags = generate_bags(pool, extract_features(model, pool), gen)
    if args.out:
        if Path(args.out).exists():
            Path(args.out).unlink()
        append_bags(bags, args.out, ds.feature_dim, provenance=f"hard negatives from {args.data}",
                    patch_shape=ds.patch_shape)
    result.update(generated=len(bags), out=str(args.out) if args.out else None,
                  sizes=[b.size for b in bags])
    _say(f"pool of {pool.size} hard instances from {len(result['false_positive_bags'])} false-positive bags; "
         f"generated {len(bags)} {gen.strategy} bags")
    return result


def cmd_retrain(args):
    ds = load_bags(args.data)
    hard = load_bags(args.hard)
    augmented = augment_training_set(ds, hard.bags)
    result = _train_and_save(augmented, args, args.out)
    result["train_bags"] = len(augmented)
    result["generated_bags"] = len(hard)
    return result


def cmd_eval(args):
    ds = load_bags(args.data)
    model, _ = load_checkpoint(args.model)
    probs = predict(model, ds)
    metrics = evaluate(probs, ds.labels)
    report = {v: AggregateReport({k: MetricSummary(val, 0.0 if val is not None else None, int(val is not None))
                                  for k, val in metrics.to_dict().items()}, 1)
              for v in [Path(args.model).stem]}
    _say(format_table(report))
    result = {"metrics": metrics.to_dict(), "bags": len(ds),
              "probs": probs.tolist(), "labels": ds.labels.tolist(), "bag_ids": [b.bag_id for b in ds]}
    if args.roc_csv:
        from .plotting import pooled_roc, write_roc_csv

        write_roc_csv(pooled_roc([{"variant": "model", **result}]), args.roc_csv)
    return result


def cmd_gradcheck(args):
    errors = grad_check_trials(args.seed, args.trials, eps=args.eps, lam=args.lam)
    worst = max(errors)
    passed = worst < GRADCHECK_TOLERANCE
    _say(f"gradcheck: {args.trials} random models, max relative error {worst:.3e} "
         f"-> {'PASS' if passed else 'FAIL'} (tolerance {GRADCHECK_TOLERANCE:g})")
    return {"trials": args.trials, "eps": args.eps, "max_relative_error": worst,
            "tolerance": GRADCHECK_TOLERANCE, "passed": passed}


def _variants_for(strategies):
    if not strategies:
        return VARIANTS
    wanted = {s.upper() for s in strategies}
    return tuple(v for v in VARIANTS if "+" not in v or v.split("+")[1] in wanted)


def cmd_run_experiment(args):
    if args.data:
        ds = load_bags(args.data)
    else:
        ds = generate_synthetic(SynthConfig(n_bags=args.bags, confuser_rate=args.confuser_rate, seed=args.seed))
    cfg = _pipeline_config(args, repetitions=args.repetitions, folds=args.folds,
                           variants=_variants_for(args.strategy), clusters=args.clusters,
                           bag_count=args.bag_count)
    record = run_experiment(ds, cfg, jobs=args.jobs)
    if args.out:
        _write_json(record, args.out)
    _say(format_table(_reports_from(record["aggregates"])))
    return record


def _reports_from(aggregates: dict) -> dict[str, AggregateReport]:
    return {v: AggregateReport({k: MetricSummary(**s) for k, s in a["metrics"].items()}, a["runs"])
            for v, a in aggregates.items()}


def cmd_report(args):
    record = json.loads(Path(args.record).read_text(encoding="utf-8"))
    runs = record["runs"] if isinstance(record, dict) else record
    aggregates = aggregate_record(runs)
    table = format_table(_reports_from(aggregates))
    _say(table)
    result = {"aggregates": aggregates, "table": table.splitlines(), "figures": []}
    if args.figures or args.roc_csv:
        from .plotting import metric_bars, pooled_roc, roc_curves, write_roc_csv

        curves = pooled_roc(runs)
        if args.figures:
            d = Path(args.figures)
            d.mkdir(parents=True, exist_ok=True)
            result["figures"].append(str(metric_bars(aggregates, d / "metrics.png")))
            if curves:
                result["figures"].append(str(roc_curves(curves, d / "roc.png")))
        if args.roc_csv:
            result["roc_csv"] = str(write_roc_csv(curves, args.roc_csv))
    return result


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="milhard", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic confuser benchmark")
    p.add_argument("--bags", type=int, default=100)
    p.add_argument("--positive-fraction", type=float, default=0.5)
    p.add_argument("--min-size", type=int, default=SynthConfig.bag_size_range[0])
    p.add_argument("--max-size", type=int, default=SynthConfig.bag_size_range[1])
    p.add_argument("--feature-dim", type=int, default=10)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--confuser-rate", type=float, default=SynthConfig.confuser_rate)
    p.add_argument("--witness-rate", type=float, default=SynthConfig.witness_rate)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("preprocess", help="tile, filter and equalize PPM/PGM images into bags")
    p.add_argument("--image", required=True, nargs="+")
    p.add_argument("--patch-side", type=int, default=27)
    p.add_argument("--tissue-fraction", type=float, default=0.25)
    p.add_argument("--label", type=int, choices=(0, 1), required=True)
    p.add_argument("--bag-id")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="bag file to append to")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a bag file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="also write the training report JSON here")
    p.add_argument("--figures", help="directory for the loss-curve figure")
    p.add_argument("--seed", type=int, default=0)
    _add_training_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("mine", help="mine hard negatives and generate hard bags")
    p.add_argument("--data", required=True, help="training bags")
    p.add_argument("--model", required=True)
    p.add_argument("--strategy", type=str.lower, choices=("sb", "mb", "fmb"), default="fmb")
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--bag-count", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="generated bag file")
    p.add_argument("--pool-out", help="hard pool JSONL")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("retrain", help="train from scratch on training bags plus generated hard bags")
    p.add_argument("--data", required=True)
    p.add_argument("--hard", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--figures")
    p.add_argument("--seed", type=int, default=0)
    _add_training_opts(p)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("eval", help="bag-level metrics of a checkpoint on a bag file")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--roc-csv")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare backprop with central differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--lambda", dest="lam", type=float, default=2.0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("run-experiment", help="cross-validated base / mining / retraining comparison")
    p.add_argument("--data", help="bag file; omitted -> synthetic benchmark from --seed")
    p.add_argument("--bags", type=int, default=100)
    p.add_argument("--confuser-rate", type=float, default=SynthConfig.confuser_rate)
    p.add_argument("--out", help="experiment record JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strategy", type=str.lower, choices=("sb", "mb", "fmb"), nargs="+")
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--bag-count", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    _add_training_opts(p)
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("report", help="mean±se table and figures from an experiment record")
    p.add_argument("record")
    p.add_argument("--figures", help="directory for metric and ROC figures")
    p.add_argument("--roc-csv")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_report)
    return parser


def _setup_logging():
    level = os.environ.get("MILHARD_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        result = args.func(args)
    except UsageError as exc:
        _say(f"usage error: {exc}")
        return 1
    except (ConfigError, BagFormatError, DimensionError, EmptyPoolError, FileNotFoundError) as exc:
        _say(f"error: {exc}")
        return 1
    except (MilHardError, RuntimeError, OSError) as exc:
        _say(f"runtime error: {exc}")
        return 2
    _emit(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
