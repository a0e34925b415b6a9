"""Crop, bilinear resize and the down-then-up degradation used for the low-res domain.

Images are float64 arrays shaped ``(C, H, W)`` with values in ``[0, 1]``.
Resizing acts on the last two axes, so a stack ``(N, C, H, W)`` works too.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class ResolutionSpec:
    net_input: int = 64
    target_low: int = 16

    def __post_init__(self):
        if not 0 < self.target_low <= self.net_input:
            raise ValueError(
                f"need 0 < target_low <= net_input, got target_low={self.target_low}, net_input={self.net_input}"
            )


ALEXNET_RESOLUTION = ResolutionSpec(net_input=227, target_low=50)


def crop_bbox(image: np.ndarray, bbox) -> np.ndarray:
    top, left, height, width = (int(v) for v in bbox)
    h, w = image.shape[-2:]
    if height < 1 or width < 1:
        raise ValueError(f"bbox must have positive height and width, got {bbox}")
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ValueError(f"bbox {bbox} outside image of size {h}x{w}")
    return image[..., top:top + height, left:left + width].copy()


@lru_cache(maxsize=64)
def interpolation_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row ``d`` holds the bilinear weights of output sample ``d`` over the input samples.

    Half-pixel centres: ``s = (d + 0.5) * in/out - 0.5``, clamped to the edges.
    """
    if in_size < 1 or out_size < 1:
        raise ValueError(f"sizes must be >= 1, got in={in_size}, out={out_size}")
    m = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for d in range(out_size):
        s = min(max((d + 0.5) * scale - 0.5, 0.0), in_size - 1)
        lo = int(np.floor(s))
        hi = min(lo + 1, in_size - 1)
        frac = s - lo
        m[d, lo] += 1.0 - frac
        m[d, hi] += frac
    m.setflags(write=False)
    return m


def _apply(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # rows @ img @ cols.T over the trailing two axes
    out = np.matmul(np.matmul(rows, image), cols.T)
    lo = image.min(axis=(-2, -1), keepdims=True)
    hi = image.max(axis=(-2, -1), keepdims=True)
    return np.clip(out, lo, hi)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    if (h, w) == (out_h, out_w):
        return image.copy()
    return _apply(image, interpolation_matrix(h, out_h), interpolation_matrix(w, out_w))


def degrade(image: np.ndarray, spec: ResolutionSpec) -> np.ndarray:
    """Downsample to ``target_low`` then upsample back to ``net_input``."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-2:] != (spec.net_input, spec.net_input):
        raise ValueError(
            f"degrade expects {spec.net_input}x{spec.net_input} input, got {image.shape[-2]}x{image.shape[-1]}"
        )
    low = resize_bilinear(image, spec.target_low, spec.target_low)
    return resize_bilinear(low, spec.net_input, spec.net_input)
