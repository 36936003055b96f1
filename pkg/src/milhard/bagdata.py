"""Bags, datasets, the synthetic benchmark generator, JSONL persistence, k-fold splits."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BagFormatError, ConfigError, DimensionError

ORIGINS = ("natural", "generated_sb", "generated_mb", "generated_fmb")

FEATURE_DIGITS = 9


def round_sig(values: np.ndarray, digits: int = FEATURE_DIGITS) -> np.ndarray:
    """Round every entry to ``digits`` significant digits (decimal, as written to disk)."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    out = np.fromiter((float(f"{x:.{digits}g}") for x in flat), dtype=np.float64, count=flat.size)
    return out.reshape(np.shape(values))


@dataclass(frozen=True, eq=False)
class Bag:
    """A labeled, ordered multiset of instance feature vectors (rows of ``instances``)."""

    bag_id: str
    label: int
    instances: np.ndarray
    origin: str = "natural"

    def __post_init__(self):
        inst = np.array(self.instances, dtype=np.float64)
        if inst.ndim != 2:
            raise DimensionError(f"bag {self.bag_id}: instances must be a 2-d array, got shape {inst.shape}")
        if inst.shape[0] < 1:
            raise DimensionError(f"bag {self.bag_id}: empty bag")
        if not np.all(np.isfinite(inst)):
            raise DimensionError(f"bag {self.bag_id}: non-finite feature value")
        if self.label not in (0, 1):
            raise ConfigError("label", f"bag {self.bag_id}: label must be 0 or 1, got {self.label!r}")
        if self.origin not in ORIGINS:
            raise ConfigError("origin", f"bag {self.bag_id}: unknown origin {self.origin!r}")
        inst.setflags(write=False)
        object.__setattr__(self, "instances", inst)
        object.__setattr__(self, "label", int(self.label))

    @property
    def size(self) -> int:
        return self.instances.shape[0]

    @property
    def dim(self) -> int:
        return self.instances.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (
            self.bag_id == other.bag_id
            and self.label == other.label
            and self.origin == other.origin
            and np.array_equal(self.instances, other.instances)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Dataset:
    bags: tuple[Bag, ...]
    feature_dim: int
    provenance: str = ""
    # optional (side, side, channels) for image-derived bags; enables online augmentation
    patch_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        bags = tuple(self.bags)
        if not bags:
            raise BagFormatError("empty dataset")
        seen = set()
        for bag in bags:
            if bag.dim != self.feature_dim:
                raise DimensionError(
                    f"bag {bag.bag_id}: instance dim {bag.dim} != dataset feature_dim {self.feature_dim}"
                )
            if bag.bag_id in seen:
                raise BagFormatError(f"duplicate bag_id {bag.bag_id!r}")
            seen.add(bag.bag_id)
        object.__setattr__(self, "bags", bags)
        if self.patch_shape is not None:
            object.__setattr__(self, "patch_shape", tuple(int(s) for s in self.patch_shape))

    def __len__(self):
        return len(self.bags)

    def __iter__(self):
        return iter(self.bags)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.feature_dim == other.feature_dim
            and self.provenance == other.provenance
            and self.patch_shape == other.patch_shape
            and self.bags == other.bags
        )

    __hash__ = None

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.bags], dtype=int)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.bags[i] for i in indices), self.feature_dim, self.provenance, self.patch_shape)

    def extended(self, extra: Sequence[Bag]) -> "Dataset":
        return Dataset(self.bags + tuple(extra), self.feature_dim, self.provenance, self.patch_shape)


@dataclass(frozen=True)
class BagSizeStats:
    mu: float
    sigma: float
    z_min: int
    z_max: int

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError("sigma", "must be >= 0")
        if self.z_min < 1:
            raise ConfigError("z_min", "must be >= 1")
        if self.z_max < self.z_min:
            raise ConfigError("z_max", "must be >= z_min")


def bag_size_stats(dataset: Dataset | Sequence[Bag]) -> BagSizeStats:
    """Mean, population std, min and max of the bag sizes."""
    sizes = np.array([b.size for b in dataset], dtype=np.float64)
    if sizes.size == 0:
        raise BagFormatError("empty dataset")
    return BagSizeStats(
        mu=float(sizes.mean()),
        sigma=float(sizes.std(ddof=0)),
        z_min=int(sizes.min()),
        z_max=int(sizes.max()),
    )


# ---------------------------------------------------------------------------
# synthetic benchmark


def _default_means(d: int, spread: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    background = np.zeros(d)
    witness = np.zeros(d)
    witness[0] = 8.0 * spread
    confuser = witness.copy()
    if d > 1:
        confuser[1] = 1.5 * spread
    else:
        confuser[0] -= 1.5 * spread
    return witness, confuser, background


@dataclass
class SynthConfig:
    """Generator settings for the desk-scale surrogate of patch data.

    Positive bags get witness instances (at least one, each slot a witness
    with probability ``witness_rate``); every other slot, in either class,
    is a confuser with probability ``confuser_rate`` and background otherwise.
    Means default to background at the origin, witness 8 spreads away on the
    first axis and confuser 1.5 spreads from the witness.
    """

    n_bags: int = 100
    positive_fraction: float = 0.5
    bag_size_range: tuple[int, int] = (8, 16)
    feature_dim: int = 10
    witness_mean: Sequence[float] | None = None
    confuser_mean: Sequence[float] | None = None
    background_mean: Sequence[float] | None = None
    cluster_spread: float = 1.0
    confuser_rate: float = 0.5
    witness_rate: float = 0.1
    confusers_in_positive: bool = True
    seed: int = 0

    def resolved_means(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        w, c, b = _default_means(self.feature_dim, self.cluster_spread)
        w = w if self.witness_mean is None else np.asarray(self.witness_mean, dtype=np.float64)
        c = c if self.confuser_mean is None else np.asarray(self.confuser_mean, dtype=np.float64)
        b = b if self.background_mean is None else np.asarray(self.background_mean, dtype=np.float64)
        return w, c, b

    def validate(self) -> None:
        if self.n_bags < 1:
            raise ConfigError("n_bags", "must be >= 1")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ConfigError("positive_fraction", "must lie in (0, 1)")
        lo, hi = self.bag_size_range
        if lo < 1 or hi < lo:
            raise ConfigError("bag_size_range", f"need 1 <= lo <= hi, got {self.bag_size_range}")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim", "must be >= 1")
        if not self.cluster_spread > 0:
            raise ConfigError("cluster_spread", "must be > 0")
        if not 0.0 <= self.confuser_rate <= 1.0:
            raise ConfigError("confuser_rate", "must lie in [0, 1]")
        if not 0.0 <= self.witness_rate <= 1.0:
            raise ConfigError("witness_rate", "must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        means = dict(zip(("witness_mean", "confuser_mean", "background_mean"), self.resolved_means()))
        for name, m in means.items():
            if m.shape != (self.feature_dim,):
                raise ConfigError(name, f"length {m.shape} != feature_dim {self.feature_dim}")
        names = list(means)
        for i in range(3):
            for j in range(i + 1, 3):
                if np.array_equal(means[names[i]], means[names[j]]):
                    raise ConfigError(names[j], f"coincides with {names[i]}")

    def to_dict(self) -> dict:
        w, c, b = self.resolved_means()
        return {
            "n_bags": self.n_bags,
            "positive_fraction": self.positive_fraction,
            "bag_size_range": list(self.bag_size_range),
            "feature_dim": self.feature_dim,
            "witness_mean": w.tolist(),
            "confuser_mean": c.tolist(),
            "background_mean": b.tolist(),
            "cluster_spread": self.cluster_spread,
            "confuser_rate": self.confuser_rate,
            "witness_rate": self.witness_rate,
            "confusers_in_positive": self.confusers_in_positive,
            "seed": self.seed,
        }


WITNESS, CONFUSER, BACKGROUND = 0, 1, 2


def generate_synthetic(config: SynthConfig, return_kinds: bool = False):
    """Draw a seeded synthetic dataset.

    With ``return_kinds`` also returns, per bag, an int array tagging each
    instance as WITNESS, CONFUSER or BACKGROUND (for tests and diagnostics).
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    means = np.stack(config.resolved_means())
    n_pos = int(round(config.positive_fraction * config.n_bags))
    labels = np.zeros(config.n_bags, dtype=int)
    labels[:n_pos] = 1
    rng.shuffle(labels)
    lo, hi = config.bag_size_range
    width = len(str(config.n_bags - 1))

    bags, kinds_out = [], []
    for i, label in enumerate(labels):
        n = int(rng.integers(lo, hi + 1))
        kinds = np.where(rng.random(n) < config.confuser_rate, CONFUSER, BACKGROUND)
        if label == 1 and not config.confusers_in_positive:
            kinds[:] = BACKGROUND
        if label == 1:
            witness = rng.random(n) < config.witness_rate
            if not witness.any():
                witness[rng.integers(n)] = True
            kinds[witness] = WITNESS
        noise = rng.standard_normal((n, config.feature_dim))
        x = round_sig(means[kinds] + config.cluster_spread * noise)
        bags.append(Bag(f"b{i:0{width}d}", int(label), x))
        kinds_out.append(kinds)

    provenance = "synthetic " + json.dumps(config.to_dict(), sort_keys=True)
    ds = Dataset(tuple(bags), config.feature_dim, provenance)
    return (ds, kinds_out) if return_kinds else ds


# ---------------------------------------------------------------------------
# persistence


def _fmt(x: float) -> float:
    return float(f"{x:.{FEATURE_DIGITS}g}")


def bag_to_json(bag: Bag) -> str:
    rows = [[_fmt(x) for x in row] for row in bag.instances.tolist()]
    obj = {"bag_id": bag.bag_id, "label": bag.label, "origin": bag.origin, "instances": rows}
    return json.dumps(obj, separators=(",", ":"))


def _header(dataset: Dataset) -> str:
    head = {"feature_dim": dataset.feature_dim, "provenance": dataset.provenance}
    if dataset.patch_shape is not None:
        head["patch_shape"] = list(dataset.patch_shape)
    return json.dumps(head)


def save_bags(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_header(dataset) + "\n")
        for bag in dataset.bags:
            fh.write(bag_to_json(bag) + "\n")


def append_bags(bags: Sequence[Bag], path: str | Path, feature_dim: int, provenance: str = "",
                patch_shape=None) -> None:
    """Append bags to a bag file, writing the header first if the file is new or empty."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    if not fresh:
        head = _read_header(path)
        if head["feature_dim"] != feature_dim:
            raise DimensionError(f"{path}: feature_dim {head['feature_dim']} != {feature_dim}")
    with open(path, "a", encoding="utf-8") as fh:
        if fresh:
            head = {"feature_dim": feature_dim, "provenance": provenance}
            if patch_shape is not None:
                head["patch_shape"] = list(patch_shape)
            fh.write(json.dumps(head) + "\n")
        for bag in bags:
            if bag.dim != feature_dim:
                raise DimensionError(f"bag {bag.bag_id}: dim {bag.dim} != {feature_dim}")
            fh.write(bag_to_json(bag) + "\n")


def _read_header(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    return _parse_header(first, 1)


def _parse_header(line: str, lineno: int) -> dict:
    try:
        head = json.loads(line)
    except json.JSONDecodeError as exc:
        raise BagFormatError(f"malformed header: {exc.msg}", lineno) from exc
    if not isinstance(head, dict) or "feature_dim" not in head:
        raise BagFormatError("header must be an object with feature_dim", lineno)
    if not isinstance(head["feature_dim"], int) or head["feature_dim"] < 1:
        raise BagFormatError("feature_dim must be a positive integer", lineno)
    return head


def load_bags(path: str | Path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    lines = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not lines:
        raise BagFormatError("empty dataset")
    head = _parse_header(lines[0][1], lines[0][0])
    dim = head["feature_dim"]
    bags = []
    for lineno, line in lines[1:]:
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BagFormatError(f"malformed JSON: {exc.msg}", lineno) from exc
        if not isinstance(obj, dict):
            raise BagFormatError("bag line must be a JSON object", lineno)
        missing = {"bag_id", "label", "instances"} - obj.keys()
        if missing:
            raise BagFormatError(f"missing fields {sorted(missing)}", lineno)
        rows = obj["instances"]
        if not isinstance(rows, list) or not rows or not all(isinstance(r, list) for r in rows):
            raise BagFormatError("instances must be a non-empty list of vectors", lineno)
        widths = {len(r) for r in rows}
        if widths != {dim}:
            raise DimensionError(
                f"line {lineno}: bag {obj['bag_id']!r} has instance dims {sorted(widths)}, expected {dim}"
            )
        try:
            bags.append(Bag(str(obj["bag_id"]), obj["label"], np.array(rows, dtype=np.float64),
                            obj.get("origin", "natural")))
        except (ConfigError, DimensionError, TypeError, ValueError) as exc:
            raise BagFormatError(str(exc), lineno) from exc
    if not bags:
        raise BagFormatError("empty dataset")
    shape = head.get("patch_shape")
    return Dataset(tuple(bags), dim, head.get("provenance", ""), tuple(shape) if shape else None)


# ---------------------------------------------------------------------------
# cross-validation


def kfold_split(dataset: Dataset, k: int, seed: int) -> list[tuple[Dataset, Dataset]]:
    """Stratified k-fold split.

    Positives and negatives are shuffled separately, concatenated, and dealt
    round-robin into folds, so fold sizes differ by at most one and each
    fold's class counts are within one bag of the global proportion.
    Both halves of each pair keep the dataset's bag order.
    """
    n = len(dataset)
    if k < 2:
        raise ConfigError("k", "need at least 2 folds")
    if k > n:
        raise ConfigError("k", f"{k} folds but only {n} bags")
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    rng.shuffle(pos)
    rng.shuffle(neg)
    fold_of = np.empty(n, dtype=int)
    for rank, idx in enumerate(np.concatenate([pos, neg])):
        fold_of[idx] = rank % k
    out = []
    for f in range(k):
        test_idx = np.flatnonzero(fold_of == f)
        train_idx = np.flatnonzero(fold_of != f)
        out.append((dataset.subset(train_idx), dataset.subset(test_idx)))
    return out

