"""Datasets: synthetic fine-grained benchmark, auxiliary coarse set, directory loader.

The synthetic classes all draw their silhouette from the same small pool of
base shapes, so silhouette carries no class information. What separates the
classes is a small binary glyph stamped at a jittered spot inside the shape,
the analogue of a make logo on a car. Downsampling smears the glyph into a
blob, which is the resolution gap the staged training is meant to bridge.
"""

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .netpbm import NetpbmError, read_netpbm, write_netpbm
from .resample import crop_bbox, resize_bilinear

GLYPH_FILL = 0.5
TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 10
    samples_per_class: int = 200
    image_side: int = 64
    mark_side: int = 9
    base_shape_count: int = 4
    noise_std: float = 0.05
    seed: int = 0
    jitter: int = 6

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if not 0 < self.mark_side < self.image_side / 4:
            raise ValueError(
                f"mark_side must be positive and < image_side/4 ({self.image_side / 4}), got {self.mark_side}"
            )
        if self.base_shape_count < 1:
            raise ValueError("base_shape_count must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.jitter < 0 or self.mark_side + 2 * self.jitter > self.image_side:
            raise ValueError(f"jitter {self.jitter} does not fit a {self.image_side}px image")


@dataclass
class LabeledSample:
    image: np.ndarray
    label: int
    id: str


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int
    ids: List[str]
    class_names: List[str]
    mark_boxes: Optional[np.ndarray] = None  # (N, 4) top,left,height,width of the glyph, synthetic only
    _views: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> LabeledSample:
        return LabeledSample(self.images[i], int(self.labels[i]), self.ids[i])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        return Dataset(
            self.images[indices],
            self.labels[indices],
            [self.ids[i] for i in indices],
            list(self.class_names),
            None if self.mark_boxes is None else self.mark_boxes[indices],
        )

    def per_class_subset(self, per_class: int) -> "Dataset":
        """First ``per_class`` samples of every class, in dataset order."""
        keep = []
        for c in range(self.num_classes):
            idx = np.flatnonzero(self.labels == c)
            if per_class > len(idx):
                raise ValueError(f"class {c} has {len(idx)} samples, {per_class} requested")
            keep.extend(idx[:per_class])
        return self.subset(np.sort(np.asarray(keep, dtype=int)))

    def view(self, key, fn):
        """Memoised transformed copy of ``images`` (e.g. the degraded stack)."""
        if key not in self._views:
            self._views[key] = fn(self.images)
        return self._views[key]


# -- shapes and glyphs ---------------------------------------------------------

_SIDES = (0, 4, 6, 3, 5)  # 0 means ellipse / circle


def shape_mask(index: int, side: int, cy: float, cx: float, radius: float) -> np.ndarray:
    """Boolean silhouette of base shape ``index`` centred at (cy, cx)."""
    sides = _SIDES[index % len(_SIDES)]
    variant = index // len(_SIDES)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if sides == 0:
        # circle, then ellipses of growing eccentricity at alternating orientation
        aspect = 1.0 + 0.22 * variant
        a, b = radius * np.sqrt(aspect), radius / np.sqrt(aspect)
        if variant % 2:
            dy, dx = dx, dy
        return (dx / a) ** 2 + (dy / b) ** 2 <= 1.0
    rot = variant * np.pi / (2 * sides) / 2 + (np.pi / sides if sides % 2 == 0 else 0.0)
    theta = np.arctan2(dy, dx) - rot
    r = np.hypot(dy, dx)
    sector = 2 * np.pi / sides
    local = np.mod(theta, sector) - sector / 2
    edge = radius * np.cos(np.pi / sides) / np.cos(local)
    return r <= edge


def _stroke_glyphs(m: int) -> List[np.ndarray]:
    """Logo-like glyphs built from bars, rings and diagonals on an ``m x m`` grid."""
    yy, xx = np.mgrid[0:m, 0:m]
    c = (m - 1) / 2
    t = max(1, m // 4)  # stroke width
    lo, hi = int(c - t / 2 + 0.5), int(c - t / 2 + 0.5) + t
    r = np.hypot(yy - c, xx - c)
    hbar = (yy >= lo) & (yy < hi)
    vbar = (xx >= lo) & (xx < hi)
    diag = np.abs(yy - xx) < t * 0.75
    anti = np.abs(yy + xx - (m - 1)) < t * 0.75
    frame = (yy < t) | (yy >= m - t) | (xx < t) | (xx >= m - t)
    glyphs = [
        hbar | vbar,                                  # plus
        diag | anti,                                  # cross
        frame,                                        # hollow square
        r <= c + 0.5,                                 # disk
        (yy < t) | hbar | (yy >= m - t),              # three horizontal bars
        (xx < t) | vbar | (xx >= m - t),              # three vertical bars
        (xx < t) | (yy >= m - t),                     # L
        (yy < t) | vbar,                              # T
        (r <= c + 0.5) & (r > c + 0.5 - t),           # ring
        ((yy * 3 // m) + (xx * 3 // m)) % 2 == 0,     # 3x3 checker
        diag,                                         # backslash
        (yy >= lo) & (xx >= lo),                      # filled quadrant
    ]
    return [g.astype(bool) for g in glyphs]


def make_glyphs(num_classes: int, mark_side: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct binary glyphs: the stroke library first, then random half-lit patterns."""
    glyphs = []
    seen = set()
    for g in _stroke_glyphs(mark_side):
        if len(glyphs) == num_classes:
            break
        if g.tobytes() not in seen and g.any():
            seen.add(g.tobytes())
            glyphs.append(g)
    n_on = (mark_side * mark_side) // 2
    while len(glyphs) < num_classes:
        flat = np.zeros(mark_side * mark_side, dtype=bool)
        flat[rng.choice(flat.size, n_on, replace=False)] = True
        if flat.tobytes() in seen:
            continue
        seen.add(flat.tobytes())
        glyphs.append(flat.reshape(mark_side, mark_side))
    return np.stack(glyphs)


def random_glyphs(count: int, mark_side: int, rng: np.random.Generator) -> np.ndarray:
    n_on = (mark_side * mark_side) // 2
    out = np.zeros((count, mark_side * mark_side), dtype=bool)
    for g in out:
        g[rng.choice(g.size, n_on, replace=False)] = True
    return out.reshape(count, mark_side, mark_side)


def _render(rng, side, shape_index, glyph, jitter, noise_std):
    mark = glyph.shape[0]
    img = np.full((side, side), rng.uniform(0.1, 0.25))
    center = side / 2 - 0.5
    cy, cx = center + rng.uniform(-2, 2, size=2)
    radius = side * rng.uniform(0.36, 0.42)
    fill = rng.uniform(0.4, 0.55)
    img[shape_mask(shape_index, side, cy, cx, radius)] = fill
    oy, ox = rng.integers(-jitter, jitter + 1, size=2)
    top = int(round(center - mark / 2 + 0.5)) + int(oy)
    left = int(round(center - mark / 2 + 0.5)) + int(ox)
    top = min(max(top, 0), side - mark)
    left = min(max(left, 0), side - mark)
    patch = img[top:top + mark, left:left + mark]
    patch[glyph] = np.minimum(patch[glyph] + GLYPH_FILL, 1.0)
    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0), (top, left, mark, mark)


def class_glyphs(spec: SynthSpec) -> np.ndarray:
    return make_glyphs(spec.num_classes, spec.mark_side, np.random.default_rng([spec.seed, 7]))


def _split(images, labels, boxes, prefix, class_names, per_class):
    n_train = int(round(per_class * TRAIN_FRACTION))
    order = np.arange(len(labels))
    within = order % per_class
    tr = order[within < n_train]
    te = order[within >= n_train]
    ids = [f"{prefix}-c{labels[i]:03d}-{within[i]:05d}" for i in order]

    def make(idx):
        return Dataset(images[idx], labels[idx], [ids[i] for i in idx], list(class_names), boxes[idx])

    return make(tr), make(te)


def generate_synthetic(spec: SynthSpec = SynthSpec()):
    """Return ``(train, test, class_names)``; train/test is an 80/20 split per class."""
    glyphs = class_glyphs(spec)
    rng = np.random.default_rng([spec.seed, 1])
    n = spec.num_classes * spec.samples_per_class
    images = np.empty((n, 1, spec.image_side, spec.image_side))
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    boxes = np.empty((n, 4), dtype=int)
    for i, c in enumerate(labels):
        shape_index = int(rng.integers(spec.base_shape_count))
        images[i, 0], boxes[i] = _render(rng, spec.image_side, shape_index, glyphs[c], spec.jitter, spec.noise_std)
    names = [f"class{c:02d}" for c in range(spec.num_classes)]
    train, test = _split(images, labels, boxes, "fine", names, spec.samples_per_class)
    return train, test, names


AUX_SHAPES = 20


def auxiliary_spec(spec: SynthSpec, num_shapes: int = AUX_SHAPES, samples_per_class: int = 60) -> SynthSpec:
    """Auxiliary variant of ``spec``: more shape categories, its own seed stream."""
    return replace(spec, base_shape_count=num_shapes, num_classes=num_shapes, samples_per_class=samples_per_class)


def generate_auxiliary(spec: SynthSpec):
    """Coarse set labelled by base shape; glyphs are random per image and carry no label.

    Returns ``(train, test, class_names)`` like :func:`generate_synthetic`.
    """
    rng = np.random.default_rng([spec.seed, 2])
    k = spec.base_shape_count
    n = k * spec.samples_per_class
    images = np.empty((n, 1, spec.image_side, spec.image_side))
    labels = np.repeat(np.arange(k), spec.samples_per_class)
    boxes = np.empty((n, 4), dtype=int)
    pool = random_glyphs(64, spec.mark_side, np.random.default_rng([spec.seed, 3]))
    for i, c in enumerate(labels):
        glyph = pool[rng.integers(len(pool))]
        images[i, 0], boxes[i] = _render(rng, spec.image_side, int(c), glyph, spec.jitter, spec.noise_std)
    names = [f"shape{c:02d}" for c in range(k)]
    train, test = _split(images, labels, boxes, "aux", names, spec.samples_per_class)
    return train, test, names


def image_hash(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()


# -- template-matching reference classifier -----------------------------------


def template_match_predict(images: np.ndarray, glyphs: np.ndarray, search: Optional[Sequence[int]] = None) -> np.ndarray:
    """Predict the class whose glyph best correlates with some window of the image.

    Score is normalised cross-correlation between the zero-mean glyph and the
    window, maximised over all window positions (or over ``search`` =
    (top0, top1, left0, left1) bounds when given).
    """
    from numpy.lib.stride_tricks import sliding_window_view

    m = glyphs.shape[-1]
    t = glyphs.reshape(len(glyphs), -1).astype(np.float64)
    t = t - t.mean(axis=1, keepdims=True)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    preds = np.empty(len(images), dtype=int)
    for i, img in enumerate(images):
        g = img[0] if img.ndim == 3 else img
        if search is not None:
            t0, t1, l0, l1 = search
            g = g[t0:t1 + m, l0:l1 + m]
        win = sliding_window_view(g, (m, m)).reshape(-1, m * m)
        win = win - win.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(win, axis=1)
        norms[norms == 0] = np.inf
        scores = (win @ t.T) / norms[:, None]
        preds[i] = int(np.argmax(scores.max(axis=0)))
    return preds


# -- batching ------------------------------------------------------------------


def batches(dataset, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Seeded shuffle of ``range(len(dataset))`` cut into index batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = dataset if isinstance(dataset, int) else len(dataset)
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# -- directory trees -----------------------------------------------------------

IMAGE_SUFFIXES = (".pgm", ".ppm")


class DatasetLoadError(ValueError):
    pass


def _read_bbox(path: Path):
    text = path.read_text(encoding="utf-8").strip()
    parts = text.split()
    try:
        values = [int(p) for p in parts]
    except ValueError:
        values = []
    if len(values) != 4:
        raise DatasetLoadError(f"{path}: malformed bbox line {text!r}, expected 'top left height width'")
    return values


def _match_channels(img, channels, path):
    if img.shape[0] == channels:
        return img
    if channels == 1:
        return img.mean(axis=0, keepdims=True)
    if channels == 3 and img.shape[0] == 1:
        return np.repeat(img, 3, axis=0)
    raise DatasetLoadError(f"{path}: cannot convert {img.shape[0]} channels to {channels}")


def load_directory(root, net_input: int, channels: Optional[int] = None) -> Dataset:
    """Load ``root/<class>/<image>.pgm|ppm`` with optional ``<image>.bbox`` sidecars.

    Class indices follow sorted directory names; images are cropped to their
    bbox (when present) and resized to ``net_input`` square.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetLoadError(f"{root}: not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise DatasetLoadError(f"{root}: need at least 2 class directories, found {len(class_dirs)}")
    images, labels, ids = [], [], []
    for label, cdir in enumerate(class_dirs):
        for f in sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            try:
                img = read_netpbm(f)
            except NetpbmError as exc:
                raise DatasetLoadError(str(exc)) from exc
            sidecar = f.with_suffix(".bbox")
            if sidecar.exists():
                try:
                    img = crop_bbox(img, _read_bbox(sidecar))
                except ValueError as exc:
                    raise DatasetLoadError(f"{sidecar}: {exc}") from exc
            if channels is None:
                channels = img.shape[0]
            img = _match_channels(img, channels, f)
            images.append(resize_bilinear(img, net_input, net_input))
            labels.append(label)
            ids.append(f"{cdir.name}/{f.name}")
    if not images:
        raise DatasetLoadError(f"{root}: no .pgm/.ppm images found")
    return Dataset(np.stack(images), np.asarray(labels), ids, [d.name for d in class_dirs])


def write_directory(dataset: Dataset, root) -> None:
    """Inverse of :func:`load_directory` for square images (no bbox sidecars)."""
    root = Path(root)
    suffix = ".pgm" if dataset.images.shape[1] == 1 else ".ppm"
    for name in dataset.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for img, label, sid in zip(dataset.images, dataset.labels, dataset.ids):
        write_netpbm(root / dataset.class_names[label] / f"{sid}{suffix}", img)
