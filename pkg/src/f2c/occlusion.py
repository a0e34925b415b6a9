"""Occlusion sensitivity: how far the logits move when a gray patch covers each pixel."""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netpbm import write_netpbm
from .resample import resize_bilinear

GRAY = 128 / 255
CHUNK = 128


@dataclass(frozen=True)
class OcclusionConfig:
    patch_size: int = 7
    stride: int = 1
    gray_value: float = GRAY

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd and positive, got {self.patch_size}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if not 0.0 <= self.gray_value <= 1.0:
            raise ValueError(f"gray_value must lie in [0, 1], got {self.gray_value}")


@dataclass
class HeatMap:
    raw: np.ndarray
    normalized: np.ndarray
    config: OcclusionConfig


def normalize(raw: np.ndarray) -> np.ndarray:
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def probe_positions(side: int, stride: int):
    return list(range(0, side, stride))


def occlude(image: np.ndarray, y: int, x: int, config: OcclusionConfig) -> np.ndarray:
    """Copy of ``image`` with the patch centred at (y, x) set to gray, clipped at the borders."""
    half = config.patch_size // 2
    out = image.copy()
    out[..., max(0, y - half):y + half + 1, max(0, x - half):x + half + 1] = config.gray_value
    return out


def _forward_fn(model):
    return model.forward if hasattr(model, "forward") else model


def _sq_dist(a: np.ndarray, b: np.ndarray) -> float:
    # fsum is exactly rounded, so reordering the outputs cannot change the result
    return math.fsum(((a - b) ** 2).tolist())


def occlusion_heatmap(model, image: np.ndarray, config: OcclusionConfig = OcclusionConfig()) -> HeatMap:
    """Heat at position p is ``||f(I) - f(I')||**2`` with I' the image grayed around p.

    ``model`` is a :class:`~f2c.model.Model` or any callable mapping a
    ``(N, C, H, W)`` stack to ``(N, K)`` outputs. Positions whose occluded
    image is identical to the input score exactly zero.

    Positions are evaluated in fixed groups of ``CHUNK`` (the last one padded),
    so every group is the same computation wherever it runs; BLAS results can
    depend on the batch size, which is why the grouping is not a parameter.
    """
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    if config.patch_size >= min(h, w):
        raise ValueError(f"patch_size {config.patch_size} must be smaller than the image side {min(h, w)}")
    f = _forward_fn(model)
    base = np.asarray(f(image[None]))[0]
    ys = probe_positions(h, config.stride)
    xs = probe_positions(w, config.stride)
    coords = [(y, x) for y in ys for x in xs]
    raw = np.zeros(len(coords))
    for start in range(0, len(coords), CHUNK):
        group = coords[start:start + CHUNK]
        batch = np.repeat(image[None], CHUNK, axis=0)
        for j, (y, x) in enumerate(group):
            batch[j] = occlude(image, y, x, config)
        outs = np.asarray(f(batch))
        for j in range(len(group)):
            if not np.array_equal(batch[j], image):
                raw[start + j] = _sq_dist(outs[j], base)
    raw = raw.reshape(len(ys), len(xs))
    return HeatMap(raw=raw, normalized=normalize(raw), config=config)


def apply_heatmap_filter(image: np.ndarray, heatmap: HeatMap) -> np.ndarray:
    """Pixelwise product of the image with its normalized heat map."""
    norm = heatmap.normalized
    if norm.shape != image.shape[-2:]:
        norm = resize_bilinear(norm[None], *image.shape[-2:])[0]
    if norm.shape != image.shape[-2:]:
        raise ValueError(f"heat map {heatmap.normalized.shape} incompatible with image {image.shape}")
    return np.clip(image * norm[None], 0.0, 1.0)


def mean_heat_in_box(heatmap: HeatMap, box) -> float:
    """Mean normalized heat inside a (top, left, height, width) box, stride-1 maps only."""
    top, left, height, width = box
    return float(heatmap.normalized[top:top + height, left:left + width].mean())


def export_heatmap(heatmap: HeatMap, path) -> Path:
    path = Path(path)
    write_netpbm(path, heatmap.normalized[None])
    return path


def export_image(image: np.ndarray, path) -> Path:
    path = Path(path)
    write_netpbm(path, image)
    return path
