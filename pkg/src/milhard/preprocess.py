"""Image-to-bag preprocessing: tiling, HSV, per-channel Otsu filtering, equalization, dihedral augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bagdata import Bag
from .errors import BagFormatError, ConfigError, DimensionError


@dataclass(frozen=True, eq=False)
class RasterImage:
    """8-bit raster stored as (height, width, channels)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise DimensionError(f"image must be HxW, HxWx1 or HxWx3, got {arr.shape}")
        object.__setattr__(self, "data", arr.astype(np.uint8, copy=False))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class Patch:
    data: np.ndarray  # (side, side, channels) uint8
    source_offset: tuple[int, int] = (0, 0)

    @property
    def side(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class OtsuResult:
    threshold: int
    between_class_variance: float


def tile_image(img: RasterImage, patch_side: int) -> list[Patch]:
    """Non-overlapping row-major tiling from the top-left corner; partial border tiles are dropped."""
    if patch_side < 1:
        raise ConfigError("patch_side", "must be >= 1")
    rows, cols = img.height // patch_side, img.width // patch_side
    s = patch_side
    return [
        Patch(img.data[r * s:(r + 1) * s, c * s:(c + 1) * s].copy(), (r * s, c * s))
        for r in range(rows)
        for c in range(cols)
    ]


def rgb_to_hsv(r: int, g: int, b: int) -> tuple[float, float, float]:
    """Hexcone conversion; h in degrees [0, 360), s and v in [0, 1]. Hue is 0 for grays."""
    h, s, v = rgb_to_hsv_array(np.array([[r, g, b]], dtype=np.uint8))[0]
    return float(h), float(s), float(v)


def rgb_to_hsv_array(rgb: np.ndarray) -> np.ndarray:
    """Vectorized hexcone conversion over the last axis (8-bit RGB in, float HSV out)."""
    x = np.asarray(rgb, dtype=np.float64) / 255.0
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    mx = x.max(axis=-1)
    mn = x.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(
        mx == r,
        ((g - b) / safe) % 6.0,
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(delta > 0, 60.0 * h, 0.0) % 360.0
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def quantize_hsv(hsv: np.ndarray) -> np.ndarray:
    """Map HSV floats onto 0..255 integer levels (hue scaled by 255/360) for histogramming."""
    scale = np.array([255.0 / 360.0, 255.0, 255.0])
    return np.clip(np.floor(hsv * scale + 0.5), 0, 255).astype(np.int64)


def otsu_threshold(hist: Sequence[float]) -> OtsuResult:
    """Threshold t maximizing w0*w1*(mu0 - mu1)^2 for classes {<= t} and {> t}.

    Every t in 0..255 is scored; the smallest maximizer wins. Scores are
    compared exactly as rationals, using
    w0*w1*(mu0 - mu1)^2 = (s0*n1 - s1*n0)^2 / (T^2 * n0 * n1),
    so plateaus of equal variance resolve to the smallest t rather than to
    whichever candidate rounding favours. A histogram with a single occupied
    level returns that level with variance 0.
    """
    h = np.asarray(hist, dtype=np.float64)
    if h.shape != (256,):
        raise DimensionError(f"histogram must have 256 bins, got {h.shape}")
    if np.any(h < 0) or not np.all(np.isfinite(h)):
        raise ConfigError("hist", "counts must be finite and non-negative")
    # floats are dyadic rationals: rescale to integers, which leaves the argmax unchanged
    ratios = [x.as_integer_ratio() for x in h.tolist()]
    scale = max(d for _, d in ratios)
    counts = [n * (scale // d) for n, d in ratios]
    total = sum(counts)
    if total == 0:
        raise ConfigError("hist", "empty histogram")
    occupied = np.flatnonzero(h)
    if occupied.size == 1:
        return OtsuResult(int(occupied[0]), 0.0)
    moment = sum(i * c for i, c in enumerate(counts))
    best_t, best_num, best_den = 0, 0, 1
    n0 = s0 = 0
    for t in range(255):
        n0 += counts[t]
        s0 += t * counts[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (s0 * n1 - (moment - s0) * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return OtsuResult(best_t, best_num / (best_den * total * total))


def channel_histogram(values: np.ndarray) -> np.ndarray:
    return np.bincount(np.asarray(values, dtype=np.int64).ravel(), minlength=256)[:256]


def image_thresholds(img: RasterImage) -> tuple[np.ndarray, np.ndarray]:
    """Quantized HSV image and per-channel Otsu thresholds computed over the whole image.

    Single-channel images are treated as gray RGB (saturation 0, value = intensity).
    """
    rgb = img.data if img.channels == 3 else np.repeat(img.data, 3, axis=2)
    q = quantize_hsv(rgb_to_hsv_array(rgb))
    thresholds = np.array([otsu_threshold(channel_histogram(q[..., c])).threshold for c in range(3)])
    return q, thresholds


KeepRule = Callable[[np.ndarray, np.ndarray], np.ndarray]


def saturation_rule(hsv_q: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Tissue pixels have saturation above the saturation-channel threshold."""
    return hsv_q[..., 1] > thresholds[1]


def darkness_rule(hsv_q: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Tissue pixels are darker than the value-channel threshold (for gray images)."""
    return hsv_q[..., 2] <= thresholds[2]


def tissue_fraction(hsv_patch: np.ndarray, thresholds: np.ndarray, keep_rule: KeepRule = saturation_rule) -> float:
    return float(np.mean(keep_rule(hsv_patch, thresholds)))


def filter_patches(patches: Sequence[Patch], thresholds: np.ndarray, keep_rule: KeepRule = saturation_rule,
                   min_tissue: float = 0.25) -> list[Patch]:
    """Keep patches whose tissue-pixel fraction strictly exceeds ``min_tissue``."""
    kept = []
    for p in patches:
        rgb = p.data if p.channels == 3 else np.repeat(p.data, 3, axis=2)
        q = quantize_hsv(rgb_to_hsv_array(rgb))
        if tissue_fraction(q, thresholds, keep_rule) > min_tissue:
            kept.append(p)
    return kept


def equalize_channel(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64)
    n = v.size
    cdf = np.cumsum(np.bincount(v.ravel(), minlength=256))
    cdf_min = cdf[v.min()]
    if cdf_min == n:
        return v.astype(np.uint8)
    out = np.floor(255.0 * (cdf[v] - cdf_min) / (n - cdf_min) + 0.5)
    return np.clip(out, 0, 255).astype(np.uint8)


def histogram_equalize(patch: Patch) -> Patch:
    """Per-channel CDF remap; a constant channel is left as is."""
    out = np.stack([equalize_channel(patch.data[..., c]) for c in range(patch.channels)], axis=-1)
    return Patch(out, patch.source_offset)


def dihedral(a: np.ndarray, code: int) -> np.ndarray:
    """Dihedral transform ``code`` in 0..7: rotate by 90*(code % 4) degrees, then flip left-right if code >= 4."""
    out = np.rot90(a, k=code % 4, axes=(0, 1))
    if code >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def dihedral_inverse(a: np.ndarray, code: int) -> np.ndarray:
    if code >= 4:
        a = a[:, ::-1]
    return np.ascontiguousarray(np.rot90(a, k=-(code % 4), axes=(0, 1)))


def augment(patch: Patch, rng: np.random.Generator) -> Patch:
    if patch.data.shape[0] != patch.data.shape[1]:
        raise DimensionError("augmentation needs a square patch")
    return Patch(dihedral(patch.data, int(rng.integers(0, 8))), patch.source_offset)


def patch_features(patch: Patch) -> np.ndarray:
    """Channel-major, row-major flattening scaled to [0, 1]."""
    return np.transpose(patch.data, (2, 0, 1)).ravel().astype(np.float64) / 255.0


def patches_to_bag(patches: Sequence[Patch], label: int, bag_id: str = "image") -> Bag:
    if not patches:
        raise ConfigError("patches", f"empty bag {bag_id!r}: no patch survived filtering")
    return Bag(bag_id, label, np.stack([patch_features(p) for p in patches]))


def image_to_bag(img: RasterImage, label: int, bag_id: str, patch_side: int = 27,
                 min_tissue: float = 0.25, keep_rule: KeepRule | None = None) -> Bag:
    """Tile, filter on HSV Otsu thresholds, equalize each patch, and flatten into a bag."""
    if keep_rule is None:
        keep_rule = saturation_rule if img.channels == 3 else darkness_rule
    _, thresholds = image_thresholds(img)
    kept = filter_patches(tile_image(img, patch_side), thresholds, keep_rule, min_tissue)
    return patches_to_bag([histogram_equalize(p) for p in kept], label, bag_id)


# ---------------------------------------------------------------------------
# netpbm I/O


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise BagFormatError("truncated netpbm header")
        tokens.append(buf[start:i])
    return tokens, i + 1  # exactly one whitespace byte separates header from raster


def read_pnm(path: str | Path) -> RasterImage:
    """Read a binary PGM (P5) or PPM (P6) with maxval <= 255."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _tokens(buf, 4)
    if magic not in (b"P5", b"P6"):
        raise BagFormatError(f"{path}: unsupported netpbm type {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval <= 255:
        raise BagFormatError(f"{path}: only 8-bit images supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset) if len(buf) - offset >= need else None
    if raster is None:
        raise BagFormatError(f"{path}: raster truncated")
    return RasterImage(raster.reshape(h, w, channels))


def write_pnm(img: RasterImage, path: str | Path) -> None:
    magic = b"P6" if img.channels == 3 else b"P5"
    head = magic + f"\n{img.width} {img.height}\n255\n".encode()
    Path(path).write_bytes(head + np.ascontiguousarray(img.data).tobytes())
