"""Adam with decoupled weight decay, Glorot initialization, and the per-bag training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .bagdata import Dataset
from .errors import ConfigError, DimensionError, TrainingError
from .milnet import Dims, MilModel, backward, bce_from_logit, forward, param_layout

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "must be > 0")
        if not 0 <= self.beta1 < 1:
            raise ConfigError("beta1", "must lie in [0, 1)")
        if not 0 <= self.beta2 < 1:
            raise ConfigError("beta2", "must lie in [0, 1)")
        if not self.eps_hat > 0:
            raise ConfigError("eps_hat", "must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, hyper: AdamHyper) -> np.ndarray:
    """One AdamW update; mutates ``state`` and returns the new parameter vector."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape or state.v.shape != params.shape:
        raise DimensionError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}/{state.v.shape}"
        )
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    return params - hyper.learning_rate * (m_hat / (np.sqrt(v_hat) + hyper.eps_hat) + hyper.weight_decay * params)


def init_model(dims: Dims, seed: int, lam: float = 2.0) -> MilModel:
    """Glorot-uniform matrices and vectors, zero biases."""
    rng = np.random.default_rng(seed)
    model = MilModel(dims, lam=lam)
    for name, shape, _ in param_layout(dims):
        arr = model.arrays[name]
        if name.endswith("bias") or name == "classifier.b":
            continue
        if len(shape) == 2:
            fan_out, fan_in = shape
        else:
            # v maps L -> 1 score, w_c maps M -> 1 logit
            fan_in, fan_out = shape[0], 1
        a = np.sqrt(6.0 / (fan_in + fan_out))
        arr[...] = rng.uniform(-a, a, size=shape)
    return model


@dataclass
class TrainReport:
    losses: list[float]
    best_epoch: int
    best_model: MilModel
    seed: int = 0

    def to_dict(self, checkpoint_path: str | None = None) -> dict:
        return {
            "losses": self.losses,
            "best_epoch": self.best_epoch,
            "best_loss": self.losses[self.best_epoch],
            "seed": self.seed,
            "checkpoint": checkpoint_path,
        }


def _augmenter(patch_shape):
    from .preprocess import dihedral

    side, side2, channels = patch_shape

    def apply(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = np.empty_like(x)
        codes = rng.integers(0, 8, size=x.shape[0])
        for j, code in enumerate(codes):
            img = x[j].reshape(channels, side, side2)
            out[j] = np.stack([dihedral(ch, int(code)) for ch in img]).ravel()
        return out

    return apply


def train(model_init: MilModel, trainset: Dataset, hyper: AdamHyper, lam: float | None = None,
          seed: int = 0, augment: bool = False) -> TrainReport:
    """Bag-at-a-time Adam training; returns the checkpoint from the lowest mean-loss epoch.

    The epoch loss is the mean of the per-bag losses seen during that epoch,
    each computed just before that bag's update. With ``augment`` and an
    image-derived dataset, every instance gets a fresh dihedral transform
    each epoch.
    """
    if len(trainset) == 0:
        raise ConfigError("trainset", "empty training set")
    model = model_init.copy() if lam is None else model_init.copy().with_lambda(lam)
    rng = np.random.default_rng(seed)
    aug = None
    if augment:
        if trainset.patch_shape is None:
            raise ConfigError("augment", "dataset has no patch_shape; augmentation needs image-derived bags")
        aug = _augmenter(trainset.patch_shape)
    state = AdamState.zeros(model.flat.size)
    theta = model.flat
    losses: list[float] = []
    best_epoch, best_loss, best_theta = 0, np.inf, theta.copy()
    bags = trainset.bags

    for epoch in range(hyper.epochs):
        order = rng.permutation(len(bags))
        total = 0.0
        for idx in order:
            bag = bags[idx]
            x = bag.instances if aug is None else aug(bag.instances, rng)
            trace = forward(model, x)
            loss = bce_from_logit(trace.logit, bag.label)
            if not np.isfinite(loss) or not np.isfinite(trace.logit):
                raise TrainingError(f"non-finite loss at epoch {epoch}, bag {bag.bag_id}")
            total += loss
            grads = backward(model, trace, bag.label)
            theta[...] = adam_step(theta, grads.flat, state, hyper)
            if not np.all(np.isfinite(theta)):
                raise TrainingError(f"non-finite parameters after update at epoch {epoch}, bag {bag.bag_id}")
        mean_loss = total / len(bags)
        losses.append(mean_loss)
        log.debug("epoch %d mean loss %.6f", epoch, mean_loss)
        if mean_loss < best_loss:
            best_epoch, best_loss, best_theta = epoch, mean_loss, theta.copy()

    return TrainReport(losses, best_epoch, model.with_flat(best_theta), seed)
