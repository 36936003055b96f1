"""Cross-validated train → mine → retrain → evaluate pipeline."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .bagdata import Dataset, bag_size_stats, kfold_split
from .errors import ConfigError, EmptyPoolError
from .metrics import RunMetrics, aggregate, evaluate
from .milnet import Dims, MilModel, forward
from .mining import (
    GenConfig,
    augment_training_set,
    build_hard_pool,
    extract_features,
    generate_bags,
)
from .optim import AdamHyper, init_model, train

log = logging.getLogger(__name__)

PROFILES = {
    "colon": {"learning_rate": 5e-5, "weight_decay": 5e-4, "epochs": 120, "folds": 10},
    "ucsb": {"learning_rate": 5e-6, "weight_decay": 1e-4, "epochs": 300, "folds": 4},
    "synthetic": {"learning_rate": 1e-3, "weight_decay": 1e-4, "epochs": 60, "folds": 5},
}

BASE, OURS = "base-λ1", "ours"
VARIANTS = (BASE, OURS, "ours+SB", "ours+MB", "ours+FMB")


def strategy_of(variant: str) -> str | None:
    return variant.split("+", 1)[1] if "+" in variant else None


@dataclass
class PipelineConfig:
    profile: str = "synthetic"
    lam: float = 2.0
    repetitions: int = 5
    folds: int | None = None
    epochs: int | None = None
    learning_rate: float | None = None
    weight_decay: float | None = None
    variants: tuple[str, ...] = VARIANTS
    clusters: int = 4
    bag_count: int | None = None
    hidden: tuple[int, ...] = (64,)
    embed_dim: int = 32
    attn_dim: int = 16
    seed: int = 0
    reshuffle_folds: bool = True
    augment: bool = False

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError("profile", f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        self.variants = tuple(self.variants)
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError("variants", f"unknown variants {bad}")
        if self.lam < 1:
            raise ConfigError("lambda", "must be >= 1")
        if self.repetitions < 1:
            raise ConfigError("repetitions", "must be >= 1")
        if self.clusters < 1:
            raise ConfigError("clusters", "must be >= 1")
        self.hidden = tuple(self.hidden)

    def resolved(self) -> dict:
        p = PROFILES[self.profile]
        return {
            "learning_rate": self.learning_rate if self.learning_rate is not None else p["learning_rate"],
            "weight_decay": self.weight_decay if self.weight_decay is not None else p["weight_decay"],
            "epochs": self.epochs if self.epochs is not None else p["epochs"],
            "folds": self.folds if self.folds is not None else p["folds"],
        }

    def hyper(self) -> AdamHyper:
        r = self.resolved()
        return AdamHyper(learning_rate=r["learning_rate"], weight_decay=r["weight_decay"], epochs=r["epochs"])

    def dims(self, feature_dim: int) -> Dims:
        return Dims(feature_dim, self.embed_dim, self.attn_dim, self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variants"] = list(self.variants)
        d["hidden"] = list(self.hidden)
        d.update(self.resolved())
        return d


def derive_seed(seed: int, *key: int) -> int:
    """Independent child seed for (seed, key...) via numpy's SeedSequence spawning."""
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1, dtype=np.uint32)[0])


@dataclass
class FoldResult:
    repetition: int
    fold: int
    runs: list[dict] = field(default_factory=list)
    mining: dict = field(default_factory=dict)


def predict(model: MilModel, dataset: Dataset) -> np.ndarray:
    return np.array([forward(model, bag).probability for bag in dataset])


def _run_entry(variant, model_report, test: Dataset, n_train: int, note: str | None = None) -> dict:
    probs = predict(model_report.best_model, test)
    labels = test.labels
    return {
        "variant": variant,
        "metrics": evaluate(probs, labels).to_dict(),
        "best_epoch": model_report.best_epoch,
        "final_loss": model_report.losses[-1],
        "train_bags": n_train,
        "probs": probs.tolist(),
        "labels": labels.tolist(),
        "note": note,
    }


def run_fold(config: PipelineConfig, rep: int, fold: int, trainset: Dataset, test: Dataset) -> FoldResult:
    if any(b.origin != "natural" for b in test):
        raise ConfigError("test", "evaluation folds must contain natural bags only")
    hyper = config.hyper()
    dims = config.dims(trainset.feature_dim)
    init_seed = derive_seed(config.seed, rep, fold, 0)
    train_seed = derive_seed(config.seed, rep, fold, 1)
    result = FoldResult(rep, fold)

    if BASE in config.variants:
        rep_base = train(init_model(dims, init_seed, lam=1.0), trainset, hyper, seed=train_seed,
                         augment=config.augment)
        result.runs.append(_run_entry(BASE, rep_base, test, len(trainset)))

    needs_ours = any(v == OURS or strategy_of(v) for v in config.variants)
    if not needs_ours:
        return result
    rep_ours = train(init_model(dims, init_seed, lam=config.lam), trainset, hyper, seed=train_seed,
                     augment=config.augment)
    if OURS in config.variants:
        result.runs.append(_run_entry(OURS, rep_ours, test, len(trainset)))

    strategies = [strategy_of(v) for v in config.variants if strategy_of(v)]
    if not strategies:
        return result
    model = rep_ours.best_model
    pool = build_hard_pool(model, trainset)
    features = extract_features(model, pool)
    n_neg = int((trainset.labels == 0).sum())
    bag_count = config.bag_count if config.bag_count is not None else max(n_neg, 1)
    stats = bag_size_stats(trainset)
    result.mining = {"pool_size": pool.size, "false_positive_sources": len(set(pool.source_bag_ids))}

    for k, strategy in enumerate(strategies):
        variant = f"ours+{strategy}"
        gen = GenConfig(strategy, stats, bag_count=bag_count, clusters=min(config.clusters, max(pool.size, 1)),
                        seed=derive_seed(config.seed, rep, fold, 10 + k))
        try:
            hard = generate_bags(pool, features, gen, id_prefix=f"hn-r{rep}f{fold}")
        except EmptyPoolError:
            log.info("rep %d fold %d: empty hard pool, %s reuses the base adaptive model", rep, fold, variant)
            result.runs.append(_run_entry(variant, rep_ours, test, len(trainset), note="empty pool; base model reused"))
            continue
        augmented = augment_training_set(trainset, hard)
        rep_new = train(init_model(dims, init_seed, lam=config.lam), augmented, hyper, seed=train_seed,
                        augment=config.augment)
        entry = _run_entry(variant, rep_new, test, len(augmented))
        entry["generated_bags"] = len(hard)
        result.runs.append(entry)
    return result


def _job(args):
    config, rep, fold, trainset, test = args
    return run_fold(config, rep, fold, trainset, test)


def run_experiment(dataset: Dataset, config: PipelineConfig, jobs: int = 1) -> dict:
    """All repetitions × folds, then per-variant aggregation. Output is a JSON-ready dict."""
    k = config.resolved()["folds"]
    tasks = []
    for rep in range(config.repetitions):
        split_seed = derive_seed(config.seed, rep if config.reshuffle_folds else 0, 0xF01D)
        for fold, (tr, te) in enumerate(kfold_split(dataset, k, split_seed)):
            tasks.append((config, rep, fold, tr, te))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_job, tasks))
    else:
        results = [_job(t) for t in tasks]

    runs = []
    for res in results:
        for entry in res.runs:
            runs.append({"repetition": res.repetition, "fold": res.fold, **entry, "mining": res.mining or None})
    return {
        "config": config.to_dict(),
        "dataset": {"bags": len(dataset), "feature_dim": dataset.feature_dim, "provenance": dataset.provenance},
        "runs": runs,
        "aggregates": aggregate_record(runs, config.variants),
    }


def aggregate_record(runs: list[dict], variants=None) -> dict:
    variants = variants or list(dict.fromkeys(r["variant"] for r in runs))
    out = {}
    for v in variants:
        metrics = [RunMetrics.from_dict(r["metrics"]) for r in runs if r["variant"] == v]
        if metrics:
            out[v] = aggregate(metrics).to_dict()
    return out


def with_overrides(config: PipelineConfig, **kw) -> PipelineConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
