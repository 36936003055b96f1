"""Attention-pooled MIL network with adaptive weighting, manual backprop and a gradient checker.

All parameters live in one flat float64 vector (``theta``); the per-layer
arrays exposed on the model are views into it. That keeps the optimizer a
handful of vector ops and makes finite-difference checks a loop over indices.

Forward pass for a bag X (N x D):

    G      = f(X)                             embedder MLP, ReLU hidden, linear output (N x M)
    H      = G U^T                            (N x L)
    score  = softsign(H) v                    (N,)
    w      = softmax(score)
    mask   = w < 1/N                          pseudo-negatives, treated as constant
    z      = sum_j s_j w_j g_j,  s_j = lam if mask_j else 1
    p      = sigmoid(w_c . z + b_c)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .bagdata import Bag
from .errors import ConfigError, DimensionError

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class Dims:
    feature_dim: int
    embed_dim: int = 32
    attn_dim: int = 16
    hidden: tuple[int, ...] = (64,)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for name in ("feature_dim", "embed_dim", "attn_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden", "layer widths must be >= 1")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.feature_dim, *self.hidden, self.embed_dim]

    def to_dict(self) -> dict:
        return {"feature_dim": self.feature_dim, "hidden": list(self.hidden),
                "embed_dim": self.embed_dim, "attn_dim": self.attn_dim}


@lru_cache(maxsize=None)
def param_layout(dims: Dims) -> tuple[tuple[str, tuple[int, ...], int], ...]:
    """(name, shape, offset) for each parameter array, in flat-vector order."""
    shapes = []
    sizes = dims.layer_sizes
    for i in range(len(sizes) - 1):
        shapes.append((f"embedder.{i}.weight", (sizes[i + 1], sizes[i])))
        shapes.append((f"embedder.{i}.bias", (sizes[i + 1],)))
    shapes.append(("attention.U", (dims.attn_dim, dims.embed_dim)))
    shapes.append(("attention.v", (dims.attn_dim,)))
    shapes.append(("classifier.w", (dims.embed_dim,)))
    shapes.append(("classifier.b", ()))
    out, offset = [], 0
    for name, shape in shapes:
        out.append((name, shape, offset))
        offset += int(np.prod(shape, dtype=int))
    return tuple(out)


def n_params(dims: Dims) -> int:
    name, shape, offset = param_layout(dims)[-1]
    return offset + int(np.prod(shape, dtype=int))


class _Packed:
    """A flat vector plus named views laid out by ``param_layout``."""

    def __init__(self, dims: Dims, flat: np.ndarray | None = None):
        size = n_params(dims)
        if flat is None:
            flat = np.zeros(size)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise DimensionError(f"flat parameter vector has shape {flat.shape}, expected ({size},)")
        self.dims = dims
        self.flat = flat
        self.arrays = {}
        for name, shape, offset in param_layout(dims):
            n = int(np.prod(shape, dtype=int))
            self.arrays[name] = flat[offset:offset + n].reshape(shape)

    @property
    def n_layers(self) -> int:
        return len(self.dims.layer_sizes) - 1

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.arrays[f"embedder.{i}.weight"], self.arrays[f"embedder.{i}.bias"])
                for i in range(self.n_layers)]

    @property
    def U(self) -> np.ndarray:
        return self.arrays["attention.U"]

    @property
    def v(self) -> np.ndarray:
        return self.arrays["attention.v"]

    @property
    def w_c(self) -> np.ndarray:
        return self.arrays["classifier.w"]

    @property
    def b_c(self) -> np.ndarray:
        return self.arrays["classifier.b"]


class Gradients(_Packed):
    """d loss / d theta, same layout as the model."""


class MilModel(_Packed):
    """Embedder, attention and classifier parameters plus the adaptive multiplier ``lam``."""

    def __init__(self, dims: Dims, flat: np.ndarray | None = None, lam: float = 2.0):
        if lam < 1:
            raise ConfigError("lambda", f"must be >= 1, got {lam}")
        super().__init__(dims, flat)
        self.lam = float(lam)

    def copy(self) -> "MilModel":
        return MilModel(self.dims, self.flat.copy(), self.lam)

    def with_flat(self, flat: np.ndarray) -> "MilModel":
        return MilModel(self.dims, flat, self.lam)

    def with_lambda(self, lam: float) -> "MilModel":
        return MilModel(self.dims, self.flat, lam)

    def __eq__(self, other):
        if not isinstance(other, MilModel):
            return NotImplemented
        return self.dims == other.dims and self.lam == other.lam and np.array_equal(self.flat, other.flat)

    __hash__ = None


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    preacts: list[np.ndarray]
    activations: list[np.ndarray]  # activations[0] is the input, activations[-1] is G
    embeddings: np.ndarray
    hidden_attn: np.ndarray  # U g_j^T per row, before softsign
    scores: np.ndarray
    weights: np.ndarray
    mask: np.ndarray
    coef: np.ndarray  # w_j scaled by lam on masked rows
    pooled: np.ndarray
    logit: float
    probability: float
    lam: float = field(default=1.0)

    @property
    def n_pseudo_negative(self) -> int:
        return int(self.mask.sum())


def _as_matrix(bag) -> np.ndarray:
    return bag.instances if isinstance(bag, Bag) else np.asarray(bag, dtype=np.float64)


def softsign(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.abs(x))


def sigmoid(x: float) -> float:
    if x >= 0:
        return float(1.0 / (1.0 + np.exp(-x)))
    e = np.exp(x)
    return float(e / (1.0 + e))


def _embed(model: _Packed, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != model.dims.feature_dim:
        raise DimensionError(f"instances have shape {x.shape}, model expects (N, {model.dims.feature_dim})")
    preacts, acts = [], [x]
    a = x
    last = model.n_layers - 1
    for i, (W, b) in enumerate(model.layers):
        pre = a @ W.T + b
        preacts.append(pre)
        a = pre if i == last else np.maximum(pre, 0.0)
        acts.append(a)
    return a, preacts, acts


def embed_instances(model: MilModel, bag) -> np.ndarray:
    """Row j is the embedding of instance j."""
    return _embed(model, _as_matrix(bag))[0]


def attention_weights(U: np.ndarray, v: np.ndarray, G: np.ndarray):
    """Softsign attention scores and their softmax. Returns (scores, weights, pre-softsign H)."""
    if G.ndim != 2 or G.shape[1] != U.shape[1]:
        raise DimensionError(f"embeddings shape {G.shape} incompatible with U {U.shape}")
    H = G @ U.T
    scores = softsign(H) @ v
    e = np.exp(scores - scores.max())
    return scores, e / e.sum(), H


def pseudo_negative_mask(weights: np.ndarray) -> np.ndarray:
    """Instances whose weight is strictly below the bag mean 1/N."""
    return weights < 1.0 / weights.shape[0]


def adaptive_pool(G: np.ndarray, weights: np.ndarray, mask: np.ndarray, lam: float):
    """Weighted sum with masked rows scaled by ``lam``; accumulates in ascending row order.

    Returns (z, coef) where coef_j = w_j * (lam if masked else 1).
    """
    if not (G.shape[0] == weights.shape[0] == mask.shape[0]):
        raise DimensionError("embeddings, weights and mask must have the same length")
    coef = weights * np.where(mask, lam, 1.0)
    # cumsum is a strictly sequential reduction, so summation order is fixed
    z = np.cumsum(coef[:, None] * G, axis=0)[-1]
    return z, coef


def forward(model: MilModel, bag, mask: np.ndarray | None = None) -> ForwardTrace:
    """Full forward pass. ``mask`` overrides the pseudo-negative rule (used by grad_check)."""
    x = _as_matrix(bag)
    G, preacts, acts = _embed(model, x)
    scores, w, H = attention_weights(model.U, model.v, G)
    if mask is None:
        mask = pseudo_negative_mask(w)
    elif mask.shape != w.shape:
        raise DimensionError(f"mask length {mask.shape} != bag size {w.shape}")
    z, coef = adaptive_pool(G, w, mask, model.lam)
    logit = float(model.w_c @ z + model.b_c)
    return ForwardTrace(x, preacts, acts, G, H, scores, w, mask, coef, z, logit, sigmoid(logit), model.lam)


LOGIT_CLAMP = float(np.log((1.0 - PROB_CLAMP) / PROB_CLAMP))


def bce_loss(probability: float, label: int) -> float:
    p = min(max(probability, PROB_CLAMP), 1.0 - PROB_CLAMP)
    return float(-np.log(p) if label == 1 else -np.log1p(-p))


def bce_from_logit(logit: float, label: int) -> float:
    """Same loss as ``bce_loss(sigmoid(logit), label)`` without the cancellation in 1 - p."""
    a = min(max(logit, -LOGIT_CLAMP), LOGIT_CLAMP)
    a = -a if label == 1 else a
    # softplus(a) = log(1 + e^a)
    return float(max(a, 0.0) + np.log1p(np.exp(-abs(a))))


def backward(model: MilModel, trace: ForwardTrace, label: int) -> Gradients:
    """Exact gradient of the BCE loss w.r.t. every parameter; the mask carries no gradient."""
    G = trace.embeddings
    if (G.shape[1] != model.dims.embed_dim or trace.inputs.shape[1] != model.dims.feature_dim
            or len(trace.preacts) != model.n_layers or trace.hidden_attn.shape[1] != model.dims.attn_dim):
        raise DimensionError("trace does not match model dimensions (stale trace?)")
    grads = Gradients(model.dims)
    g = grads.arrays

    delta = trace.probability - label
    g["classifier.w"][:] = delta * trace.pooled
    g["classifier.b"][...] = delta
    dz = delta * model.w_c

    scale = np.where(trace.mask, trace.lam, 1.0)
    dG = np.outer(trace.coef, dz)
    dw = (G @ dz) * scale
    w = trace.weights
    dscore = w * (dw - w @ dw)

    H = trace.hidden_attn
    g["attention.v"][:] = softsign(H).T @ dscore
    dH = np.outer(dscore, model.v) / (1.0 + np.abs(H)) ** 2
    g["attention.U"][:] = dH.T @ G
    dG += dH @ model.U

    da = dG
    for i in range(model.n_layers - 1, -1, -1):
        W, _ = model.layers[i]
        dpre = da if i == model.n_layers - 1 else da * (trace.preacts[i] > 0)
        g[f"embedder.{i}.weight"][:] = dpre.T @ trace.activations[i]
        g[f"embedder.{i}.bias"][:] = dpre.sum(axis=0)
        if i:
            da = dpre @ W
    return grads


def loss_and_grad(model: MilModel, bag, label: int):
    trace = forward(model, bag)
    return bce_from_logit(trace.logit, label), backward(model, trace, label), trace


def _loss_extended(dims: Dims, theta: np.ndarray, x: np.ndarray, mask: np.ndarray, lam, label: int):
    """Forward pass and loss in np.longdouble, so finite differences are not swamped by float64 round-off."""
    views = {}
    for name, shape, offset in param_layout(dims):
        views[name] = theta[offset:offset + int(np.prod(shape, dtype=int))].reshape(shape)
    a = x
    n_layers = len(dims.layer_sizes) - 1
    for i in range(n_layers):
        a = a @ views[f"embedder.{i}.weight"].T + views[f"embedder.{i}.bias"]
        if i < n_layers - 1:
            a = np.maximum(a, 0)
    H = a @ views["attention.U"].T
    s = (H / (1 + np.abs(H))) @ views["attention.v"]
    e = np.exp(s - s.max())
    w = e / e.sum()
    coef = w * np.where(mask, lam, 1)
    z = (coef[:, None] * a).sum(axis=0)
    logit = views["classifier.w"] @ z + views["classifier.b"]
    clamp = np.longdouble(LOGIT_CLAMP)
    logit = min(max(logit, -clamp), clamp)
    t = -logit if label == 1 else logit
    return max(t, 0) + np.log1p(np.exp(-abs(t)))


def numeric_gradient(model: MilModel, bag, label: int, eps: float, mask: np.ndarray) -> np.ndarray:
    """Central differences over every entry of theta with the mask held fixed."""
    theta = model.flat.astype(np.longdouble)
    x = _as_matrix(bag).astype(np.longdouble)
    lam = np.longdouble(model.lam)
    num = np.empty(theta.size)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + eps
        up = _loss_extended(model.dims, theta, x, mask, lam, label)
        theta[i] = orig - eps
        down = _loss_extended(model.dims, theta, x, mask, lam, label)
        theta[i] = orig
        num[i] = float((up - down) / (2 * np.longdouble(eps)))
    return num


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(model: MilModel, bag, label: int, eps: float = 1e-5) -> float:
    """Largest relative error between backprop and central differences."""
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError("eps", f"must lie in [1e-7, 1e-3], got {eps}")
    trace = forward(model, bag)
    analytic = backward(model, trace, label).flat
    numeric = numeric_gradient(model, bag, label, eps, trace.mask)
    return float(relative_error(analytic, numeric).max())


# ---------------------------------------------------------------------------
# checkpoints


def model_to_dict(model: MilModel, seed: int | None = None, epoch: int | None = None) -> dict:
    return {
        "dims": model.dims.to_dict(),
        "lambda": model.lam,
        "embedder": [{"weight": W.tolist(), "bias": b.tolist()} for W, b in model.layers],
        "U": model.U.tolist(),
        "v": model.v.tolist(),
        "w_c": model.w_c.tolist(),
        "b_c": float(model.b_c),
        "seed": seed,
        "epoch": epoch,
    }


def model_from_dict(obj: dict) -> MilModel:
    d = obj["dims"]
    dims = Dims(d["feature_dim"], d["embed_dim"], d["attn_dim"], tuple(d["hidden"]))
    model = MilModel(dims, lam=obj["lambda"])
    if len(obj["embedder"]) != model.n_layers:
        raise DimensionError("checkpoint embedder depth does not match dims")
    try:
        for (W, b), layer in zip(model.layers, obj["embedder"]):
            W[...] = np.array(layer["weight"], dtype=np.float64)
            b[...] = np.array(layer["bias"], dtype=np.float64)
        model.U[...] = np.array(obj["U"], dtype=np.float64)
        model.v[...] = np.array(obj["v"], dtype=np.float64)
        model.w_c[...] = np.array(obj["w_c"], dtype=np.float64)
        model.b_c[...] = float(obj["b_c"])
    except ValueError as exc:
        raise DimensionError(f"checkpoint array shape mismatch: {exc}") from exc
    return model


def save_checkpoint(model: MilModel, path, seed: int | None = None, epoch: int | None = None) -> None:
    # json writes floats with repr(), the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(model_to_dict(model, seed, epoch)) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[MilModel, dict]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return model_from_dict(obj), {"seed": obj.get("seed"), "epoch": obj.get("epoch")}


def random_problem(rng: np.random.Generator, max_d: int = 5, max_m: int = 6, max_l: int = 4, max_n: int = 8,
                   lam: float = 2.0, scale: float = 0.5):
    """A random small (model, instances, label) triple; parameters ~ N(0, scale^2)."""
    dims = Dims(int(rng.integers(1, max_d + 1)), int(rng.integers(1, max_m + 1)), int(rng.integers(1, max_l + 1)),
                (int(rng.integers(1, 7)),))
    model = MilModel(dims, scale * rng.standard_normal(n_params(dims)), lam)
    x = rng.standard_normal((int(rng.integers(1, max_n + 1)), dims.feature_dim))
    return model, x, int(rng.integers(0, 2))


def near_kink(model: MilModel, bag, margin: float) -> bool:
    """True if some ReLU input lies within ``margin`` of zero, where central differences are unreliable."""
    trace = forward(model, bag)
    return any(np.abs(a).min() < margin for a in trace.preacts)


def grad_check_trials(seed: int, trials: int, eps: float = 1e-5, lam: float = 2.0) -> list[float]:
    """Max relative error on ``trials`` random problems, redrawing any that sit next to a ReLU kink."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < trials:
        model, x, label = random_problem(rng, lam=lam)
        if near_kink(model, x, 100 * eps):
            continue
        out.append(grad_check(model, x, label, eps))
    return out
