"""Hard negative mining from false-positive bags, k-means, and SB/MB/FMB bag generation."""

from __future__ import annotations

import json
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bagdata import Bag, BagSizeStats, Dataset
from .errors import BagFormatError, ConfigError, DimensionError, EmptyPoolError
from .milnet import MilModel, embed_instances, forward

DECISION_THRESHOLD = 0.5
STRATEGIES = ("SB", "MB", "FMB")


@dataclass
class FalsePositiveBag:
    bag: Bag
    weights: np.ndarray
    probability: float

    @property
    def mean(self) -> float:
        return float(self.weights.mean())

    @property
    def std(self) -> float:
        return float(self.weights.std(ddof=0))


@dataclass
class HardPool:
    instances: list[np.ndarray] = field(default_factory=list)
    source_bag_ids: list[str] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.instances)

    def __len__(self):
        return self.size

    def matrix(self) -> np.ndarray:
        return np.stack(self.instances) if self.instances else np.empty((0, 0))

    def add(self, x: np.ndarray, source: str, weight: float) -> None:
        self.instances.append(np.asarray(x, dtype=np.float64))
        self.source_bag_ids.append(source)
        self.weights.append(float(weight))


@dataclass
class ClusterSet:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia_history: list[float]
    n_iter: int

    @property
    def c(self) -> int:
        return self.centroids.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.c)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


@dataclass
class GenConfig:
    strategy: str
    size_stats: BagSizeStats
    bag_count: int = 1
    clusters: int = 4
    seed: int = 0

    def __post_init__(self):
        self.strategy = self.strategy.upper()
        if self.strategy not in STRATEGIES:
            raise ConfigError("strategy", f"expected one of {STRATEGIES}, got {self.strategy!r}")
        if self.bag_count < 1:
            raise ConfigError("bag_count", "must be >= 1")
        if self.clusters < 1:
            raise ConfigError("clusters", "must be >= 1")


# ---------------------------------------------------------------------------
# mining


def find_false_positives(model: MilModel, dataset: Dataset | Sequence[Bag],
                         threshold: float = DECISION_THRESHOLD) -> list[FalsePositiveBag]:
    """Negative bags the model scores at or above ``threshold``, with their attention weights."""
    out = []
    for bag in dataset:
        if bag.label != 0:
            continue
        trace = forward(model, bag)
        if trace.probability >= threshold:
            out.append(FalsePositiveBag(bag, trace.weights, trace.probability))
    return out


def select_hard_instances(weights: np.ndarray) -> np.ndarray:
    """Ascending indices i with w_i >= std(w) + mean(w) (population std).

    The comparison is done exactly on the rational values of the floats:
    w_i - mean >= 0 and (w_i - mean)^2 >= var. In float arithmetic a
    uniform vector such as nine copies of 1/9 can miss its own threshold
    by an ulp.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.size < 1:
        raise ConfigError("weights", "need at least one weight")
    exact = [Fraction(x) for x in w.tolist()]
    n = len(exact)
    mean = sum(exact) / n
    dev = [x - mean for x in exact]
    var = sum(d * d for d in dev) / n
    return np.array([i for i, d in enumerate(dev) if d >= 0 and d * d >= var], dtype=np.intp)


def build_hard_pool(model: MilModel, dataset: Dataset | Sequence[Bag],
                    threshold: float = DECISION_THRESHOLD) -> HardPool:
    pool = HardPool()
    for fp in find_false_positives(model, dataset, threshold):
        for i in select_hard_instances(fp.weights):
            pool.add(fp.bag.instances[i], fp.bag.bag_id, fp.weights[i])
    return pool


def extract_features(model: MilModel, pool: HardPool) -> np.ndarray:
    """Embedder outputs for the pooled instances, one row per pool entry."""
    if pool.size == 0:
        return np.empty((0, model.dims.embed_dim))
    return embed_instances(model, pool.matrix())


def save_pool(pool: HardPool, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, src, w in zip(pool.instances, pool.source_bag_ids, pool.weights):
            fh.write(json.dumps({"instance": [float(f"{v:.9g}") for v in x.tolist()],
                                 "source_bag_id": src, "weight": w}, separators=(",", ":")) + "\n")


def load_pool(path) -> HardPool:
    pool = HardPool()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            pool.add(np.array(obj["instance"], dtype=np.float64), str(obj["source_bag_id"]), obj["weight"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise BagFormatError(f"bad pool entry: {exc}", lineno) from exc
    return pool


# ---------------------------------------------------------------------------
# k-means


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kmeans_pp_init(x: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[idx]).min(axis=1)
    for _ in range(1, c):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with a chosen centroid
            nxt = int(rng.choice(np.setdiff1d(np.arange(n), idx)))
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[idx].copy()


def kmeans(features: np.ndarray, c: int, seed: int = 0, max_iter: int = 100) -> ClusterSet:
    """k-means++ seeding then Lloyd iterations until assignments stop changing.

    A cluster left empty after an assignment step takes the point currently
    farthest from its own centroid. ``inertia_history`` records the sum of
    squared distances after every assignment.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("features must be a 2-d array")
    n = x.shape[0]
    if c < 1:
        raise ConfigError("clusters", "must be >= 1")
    if c > n:
        raise ConfigError("clusters", f"{c} clusters requested for {n} points")
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(x, c, rng)
    assign = None
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centroids)
        new = d2.argmin(axis=1)
        cost = d2[np.arange(n), new]
        new, cost = _repair_empty(x, centroids, new, cost, c)
        history.append(float(cost.sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        centroids = np.stack([x[assign == j].mean(axis=0) for j in range(c)])
    return ClusterSet(centroids, assign, history, it)


def _repair_empty(x, centroids, assign, cost, c):
    """Move the point farthest from its centroid into each empty cluster (in place on ``centroids``)."""
    counts = np.bincount(assign, minlength=c)
    if counts.min() > 0:
        return assign, cost
    assign, cost = assign.copy(), cost.copy()
    for j in np.flatnonzero(counts == 0):
        donors = counts[assign] > 1
        k = int(np.argmax(np.where(donors, cost, -np.inf)))
        counts[assign[k]] -= 1
        assign[k] = j
        counts[j] += 1
        centroids[j] = x[k]
        cost[k] = 0.0
    return assign, cost


# ---------------------------------------------------------------------------
# bag generation


def sample_bag_size(stats: BagSizeStats, rng: np.random.Generator) -> int:
    """round(Normal(mu, sigma)) clamped to [z_min, z_max]."""
    draw = stats.mu if stats.sigma == 0 else rng.normal(stats.mu, stats.sigma)
    size = int(np.floor(draw + 0.5))
    return max(1, min(stats.z_max, max(stats.z_min, size)))


def cluster_probabilities(sizes: np.ndarray) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    return sizes / sizes.sum()


def _draw_without_replacement(n_pool: int, size: int, rng: np.random.Generator) -> np.ndarray:
    if size <= n_pool:
        return rng.choice(n_pool, size=size, replace=False)
    # pool exhausted: take it all once, then top up with replacement
    return np.concatenate([rng.permutation(n_pool), rng.integers(0, n_pool, size=size - n_pool)])


def _fmb_bag(members: list[np.ndarray], probs: np.ndarray, size: int, n_pool: int,
             rng: np.random.Generator) -> tuple[list[int], list[int]]:
    chosen: list[int] = []
    picks: list[int] = []
    taken = set()
    for _ in range(size):
        for _attempt in range(max(n_pool, 1)):
            j = int(rng.choice(len(probs), p=probs))
            idx = int(members[j][rng.integers(len(members[j]))])
            if idx not in taken:
                break
        chosen.append(idx)
        picks.append(j)
        taken.add(idx)
    return chosen, picks


def generate_bags(pool: HardPool, features: np.ndarray | None, config: GenConfig,
                  clusters: ClusterSet | None = None, id_prefix: str = "hn") -> list[Bag]:
    """Label-0 bags assembled from the hard pool.

    SB: one bag holding the whole pool. MB: ``bag_count`` bags with Gaussian
    sizes, drawn uniformly from the pool. FMB: same sizes, but each slot
    first picks a feature cluster with probability proportional to its size.
    """
    if pool.size == 0:
        raise EmptyPoolError("nothing to mine: hard-negative pool is empty, skip augmentation")
    x = pool.matrix()
    rng = np.random.default_rng(config.seed)
    tag = config.strategy.lower()
    origin = f"generated_{tag}"

    if config.strategy == "SB":
        return [Bag(f"{id_prefix}-{tag}-0000", 0, x.copy(), origin)]

    bags = []
    if config.strategy == "FMB":
        if clusters is None:
            if features is None or features.shape[0] != pool.size:
                raise DimensionError("FMB needs one feature row per pool entry")
            c = min(config.clusters, pool.size)
            clusters = kmeans(features, c, seed=config.seed)
        probs = cluster_probabilities(clusters.sizes)
        members = [np.flatnonzero(clusters.assignments == j) for j in range(clusters.c)]
    for i in range(config.bag_count):
        size = sample_bag_size(config.size_stats, rng)
        if config.strategy == "MB":
            idx = _draw_without_replacement(pool.size, size, rng)
        else:
            idx, _ = _fmb_bag(members, probs, size, pool.size, rng)
        bags.append(Bag(f"{id_prefix}-{tag}-{i:04d}", 0, x[idx], origin))
    return bags


def augment_training_set(trainset: Dataset, hard_bags: Sequence[Bag]) -> Dataset:
    for bag in hard_bags:
        if bag.dim != trainset.feature_dim:
            raise DimensionError(f"generated bag {bag.bag_id} has dim {bag.dim}, expected {trainset.feature_dim}")
    return trainset.extended(hard_bags) if hard_bags else trainset
