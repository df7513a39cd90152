"""Intensity normalization, model-input resizing, and flip augmentation.

Conventions pinned for reproducibility: percentiles use linear
interpolation between order statistics, rounding to uint8 is
half-to-even, and bilinear resizing uses half-pixel centers with no
corner alignment.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .bundle import BoxPrompt
from .errors import ValidationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MODEL_INPUT_SIZE = 256


@dataclass(frozen=True)
class WindowSpec:
    """CT intensity window: center level and full width, in HU."""

    level: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValidationError(f"window width must be > 0, got {self.width}")


@dataclass(frozen=True)
class PadInfo:
    """Geometry of one resize-longest-edge-then-pad transform."""

    scale: float
    resized_h: int
    resized_w: int
    pad_right: int
    pad_bottom: int
    original_h: int
    original_w: int

    @property
    def target(self) -> int:
        return self.resized_h + self.pad_bottom

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError("scale must be > 0")
        if self.resized_h + self.pad_bottom != self.resized_w + self.pad_right:
            raise ValidationError("padded extent must be square")


def load_window_presets(path: str | Path | None = None) -> dict[str, WindowSpec]:
    """Read window presets from a TOML file (packaged defaults if None)."""
    if path is None:
        text = resources.files("segforge").joinpath("presets.toml").read_text()
    else:
        text = Path(path).read_text()
    raw = tomllib.loads(text)
    return {name: WindowSpec(float(v["level"]), float(v["width"])) for name, v in raw.items()}


def window_ct(volume: np.ndarray, w: WindowSpec) -> np.ndarray:
    """Clip HU values to level±width/2 and rescale to uint8 [0, 255]."""
    volume = np.asarray(volume, dtype=np.float64)
    if not np.isfinite(volume).all():
        raise ValidationError("CT volume contains non-finite values")
    lo = w.level - w.width / 2.0
    # divide before scaling so window-center values hit exact .5 steps
    scaled = (np.clip(volume, lo, lo + w.width) - lo) / w.width * 255.0
    return np.rint(scaled).astype(np.uint8)


def percentile_clip_rescale(volume: np.ndarray, mask_nonzero: bool = True) -> np.ndarray:
    """Clip to the foreground's [0.5, 99.5] percentiles, rescale to uint8.

    Foreground is the nonzero voxels when ``mask_nonzero`` is set, else
    the whole array. A degenerate percentile range yields all zeros.
    """
    volume = np.asarray(volume, dtype=np.float64)
    if not np.isfinite(volume).all():
        raise ValidationError("volume contains non-finite values")
    fg = volume[volume != 0] if mask_nonzero else volume.ravel()
    if fg.size < 2:
        raise ValidationError(f"need at least 2 foreground voxels, got {fg.size}")
    lo, hi = np.percentile(fg, [0.5, 99.5], method="linear")
    if hi == lo:
        return np.zeros(volume.shape, dtype=np.uint8)
    scaled = (np.clip(volume, lo, hi) - lo) / (hi - lo) * 255.0
    return np.rint(scaled).astype(np.uint8)


def intensity_normalize(
    image: np.ndarray,
    modality: str,
    window: WindowSpec | str | None = None,
    presets: dict[str, WindowSpec] | None = None,
) -> np.ndarray:
    """Apply the modality intensity policy, returning uint8.

    uint8 input passes through untouched; CT is windowed (default
    soft_tissue preset); everything else is percentile-clipped.
    """
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    if modality == "CT":
        if not isinstance(window, WindowSpec):
            presets = presets if presets is not None else load_window_presets()
            name = window if isinstance(window, str) else "soft_tissue"
            if name not in presets:
                raise ValidationError(f"unknown window preset {name!r}")
            window = presets[name]
        return window_ct(image, window)
    return percentile_clip_rescale(image)


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers; returns float32.

    Source coordinates are (o + 0.5) * in/out - 0.5, clamped to the
    valid range; channels (trailing axis of size 3) resample per-channel.
    """
    image = np.asarray(image, dtype=np.float32)
    in_h, in_w = image.shape[:2]
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ys - y0).astype(np.float32)
    fx = (xs - x0).astype(np.float32)

    fy = fy[:, None]
    fx = fx[None, :]
    if image.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    p00 = image[np.ix_(y0, x0)]
    p01 = image[np.ix_(y0, x1)]
    p10 = image[np.ix_(y1, x0)]
    p11 = image[np.ix_(y1, x1)]
    top = p00 * (1.0 - fx) + p01 * fx
    bottom = p10 * (1.0 - fx) + p11 * fx
    return top * (1.0 - fy) + bottom * fy


def resize_longest_pad(
    image: np.ndarray, target: int = MODEL_INPUT_SIZE
) -> tuple[np.ndarray, PadInfo]:
    """Resize so the longest edge equals ``target``, pad right/bottom with zeros."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if h < 1 or w < 1:
        raise ValidationError("image must have positive extent")
    long_edge = max(h, w)
    scale = target / long_edge
    new_h = target if h == long_edge else max(1, round(h * target / long_edge))
    new_w = target if w == long_edge else max(1, round(w * target / long_edge))
    resized = bilinear_resize(image, new_h, new_w)
    pad_bottom = target - new_h
    pad_right = target - new_w
    pad_spec = [(0, pad_bottom), (0, pad_right)] + [(0, 0)] * (image.ndim - 2)
    padded = np.pad(resized, pad_spec, mode="constant")
    info = PadInfo(
        scale=scale,
        resized_h=new_h,
        resized_w=new_w,
        pad_right=pad_right,
        pad_bottom=pad_bottom,
        original_h=h,
        original_w=w,
    )
    return padded, info


def normalize_minmax(image: np.ndarray) -> np.ndarray:
    """Map the fixed [0, 255] range to [0, 1] by dividing by 255."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        if image.min() < 0 or image.max() > 255:
            raise ValidationError("float input to normalize_minmax must lie in [0, 255]")
    return image.astype(np.float32) / np.float32(255.0)


def random_flip(
    image: np.ndarray,
    mask: np.ndarray,
    box: BoxPrompt | None,
    p: float = 0.5,
    seed: int | np.random.Generator = 0,
) -> tuple[np.ndarray, np.ndarray, BoxPrompt | None]:
    """Flip image, mask, and box together, horizontally then vertically.

    Each flip is sampled independently with probability ``p``; two
    draws are always consumed so outcomes stay aligned across calls.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    do_h = rng.random() < p
    do_v = rng.random() < p
    return apply_flips(image, mask, box, do_h, do_v)


def apply_flips(
    image: np.ndarray,
    mask: np.ndarray,
    box: BoxPrompt | None,
    horizontal: bool,
    vertical: bool,
) -> tuple[np.ndarray, np.ndarray, BoxPrompt | None]:
    """Deterministically flip; horizontal reflects x (W axis), vertical y (H axis)."""
    if image.shape[:2] != mask.shape[:2]:
        raise ValidationError("image and mask shapes must match")
    h, w = image.shape[:2]
    if horizontal:
        image = image[:, ::-1].copy()
        mask = mask[:, ::-1].copy()
    if vertical:
        image = image[::-1].copy()
        mask = mask[::-1].copy()
    if box is not None:
        x0, y0, x1, y1 = box.box_2d()
        if horizontal:
            x0, x1 = w - x1, w - x0
        if vertical:
            y0, y1 = h - y1, h - y0
        box = BoxPrompt(box.target_label, (x0, y0, x1, y1))
    return image, mask, box
