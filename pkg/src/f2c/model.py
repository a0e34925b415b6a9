"""MiniNet: a small conv stack with a fully connected head.

The layer vocabulary is conv -> relu -> (maxpool 2x2) per block, then
dense -> relu -> dropout per hidden FC layer, then a linear output layer
whose pre-softmax values are the network output.
"""

import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as T

POOL = 2
OUTPUT = "out"


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    pool: bool = True


@dataclass(frozen=True)
class ModelSpec:
    input_side: int = 64
    input_channels: int = 1
    conv_blocks: Tuple[ConvBlock, ...] = (
        ConvBlock(8, 5, 1, 2, True),
        ConvBlock(16, 3, 1, 1, True),
        ConvBlock(32, 3, 1, 1, True),
    )
    fc_dims: Tuple[int, ...] = (128, 64)
    num_classes: int = 10
    dropout_p: float = 0.5

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_channels not in (1, 3):
            raise ValueError(f"input_channels must be 1 or 3, got {self.input_channels}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        self.feature_sizes()

    def feature_sizes(self):
        """Spatial side after each conv block; raises if the stack collapses."""
        side = self.input_side
        sizes = []
        for i, b in enumerate(self.conv_blocks):
            side = T.conv_output_size(side, b.kernel, b.stride, b.pad)
            if b.pool:
                side = (side - POOL) // POOL + 1 if side >= POOL else 0
            if side < 1:
                raise ValueError(f"feature map collapses below 1x1 at conv block {i + 1}")
            sizes.append(side)
        return sizes

    def flat_features(self) -> int:
        side = self.feature_sizes()[-1] if self.conv_blocks else self.input_side
        channels = self.conv_blocks[-1].out_channels if self.conv_blocks else self.input_channels
        return channels * side * side

    def with_classes(self, k: int) -> "ModelSpec":
        return replace(self, num_classes=k)

    def param_shapes(self) -> Dict[str, tuple]:
        shapes = {}
        c = self.input_channels
        for i, b in enumerate(self.conv_blocks, 1):
            shapes[f"conv{i}.weight"] = (b.out_channels, c, b.kernel, b.kernel)
            shapes[f"conv{i}.bias"] = (b.out_channels,)
            c = b.out_channels
        d = self.flat_features()
        for i, width in enumerate(self.fc_dims, 1):
            shapes[f"fc{i}.weight"] = (width, d)
            shapes[f"fc{i}.bias"] = (width,)
            d = width
        shapes[f"{OUTPUT}.weight"] = (self.num_classes, d)
        shapes[f"{OUTPUT}.bias"] = (self.num_classes,)
        return shapes

    def to_text(self) -> str:
        blocks = ",".join(
            f"{b.out_channels}:{b.kernel}:{b.stride}:{b.pad}:{int(b.pool)}" for b in self.conv_blocks
        )
        lines = [
            f"input_side={self.input_side}",
            f"input_channels={self.input_channels}",
            f"conv_blocks={blocks}",
            f"fc_dims={','.join(str(d) for d in self.fc_dims)}",
            f"num_classes={self.num_classes}",
            f"dropout_p={self.dropout_p!r}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
        blocks = []
        if kv.get("conv_blocks"):
            for item in kv["conv_blocks"].split(","):
                oc, k, s, p, pool = (int(v) for v in item.split(":"))
                blocks.append(ConvBlock(oc, k, s, p, bool(pool)))
        fc = tuple(int(v) for v in kv["fc_dims"].split(",")) if kv.get("fc_dims") else ()
        return cls(
            input_side=int(kv["input_side"]),
            input_channels=int(kv["input_channels"]),
            conv_blocks=tuple(blocks),
            fc_dims=fc,
            num_classes=int(kv["num_classes"]),
            dropout_p=float(kv["dropout_p"]),
        )


@dataclass
class Model:
    spec: ModelSpec
    params: Dict[str, np.ndarray]
    training: bool = False

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()}, self.training)

    def check_shapes(self):
        declared = self.spec.param_shapes()
        if list(declared) != list(self.params):
            raise ValueError(f"parameter names {list(self.params)} do not match spec {list(declared)}")
        for name, shape in declared.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != declared {shape}")

    def forward(self, image) -> np.ndarray:
        """Logits for one ``(C, H, W)`` image or a ``(N, C, H, W)`` stack, inference mode."""
        x = np.asarray(image, dtype=np.float64)
        single = x.ndim == 3
        expected = (self.spec.input_channels, self.spec.input_side, self.spec.input_side)
        if x.shape[-3:] != expected or x.ndim not in (3, 4):
            raise ValueError(f"input shape {x.shape} does not match model input {expected}")
        logits, _ = self._run(x[None] if single else x, training=False, rng=None)
        return logits[0] if single else logits

    def forward_train(self, batch, rng) -> Tuple[np.ndarray, list]:
        return self._run(np.asarray(batch, dtype=np.float64), training=self.training, rng=rng)

    def _run(self, x, training, rng):
        # Conv activations stay channel-major (C, N, H, W) between layers so the
        # patch matrices are built from contiguous slices. Pooling runs before
        # the ReLU: max commutes with a monotone map, values and gradients agree.
        p = self.params
        cache = []
        x = x.transpose(1, 0, 2, 3)
        for i, b in enumerate(self.spec.conv_blocks, 1):
            w = p[f"conv{i}.weight"]
            z, cols = T.conv2d_cm(x, w, p[f"conv{i}.bias"], b.stride, b.pad)
            entry = {"kind": "conv", "name": f"conv{i}", "in_shape": x.shape, "cols": cols, "block": b}
            if b.pool:
                entry["pool"] = z.shape
                z, entry["argmax"] = T._pool_blocks(z, POOL)
            entry["pre"] = z
            x = T.relu(z)
            cache.append(entry)
        cache.append({"kind": "flatten", "shape": x.shape})
        x = x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)
        for i in range(1, len(self.spec.fc_dims) + 1):
            z = T.dense(x, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
            a = T.relu(z)
            a, mask = T.dropout(a, self.spec.dropout_p, training, rng)
            cache.append({"kind": "fc", "name": f"fc{i}", "x": x, "z": z, "mask": mask})
            x = a
        logits = output_layer(x, p[f"{OUTPUT}.weight"], p[f"{OUTPUT}.bias"])
        cache.append({"kind": "out", "name": OUTPUT, "x": x})
        return logits, cache

    def backward(self, cache, grad_logits) -> Dict[str, np.ndarray]:
        """Parameter gradients given d(loss)/d(logits) and the cache of ``forward_train``."""
        p = self.params
        grads = {}
        g = grad_logits
        for entry in reversed(cache):
            kind = entry["kind"]
            if kind == "out" or kind == "fc":
                name = entry["name"]
                if kind == "fc":
                    g = T.dropout_backward(g, entry["mask"])
                    g = T.relu_backward(entry["z"], g)
                lg = T.dense_backward(entry["x"], p[f"{name}.weight"], g)
                grads[f"{name}.weight"] = lg.param_grads["weight"]
                grads[f"{name}.bias"] = lg.param_grads["bias"]
                g = lg.input_grad
            elif kind == "flatten":
                c, n, h, w = entry["shape"]
                g = g.reshape(n, c, h, w).transpose(1, 0, 2, 3)
            else:
                name, b = entry["name"], entry["block"]
                g = T.relu_backward(entry["pre"], g)
                if "pool" in entry:
                    g = T._unpool_blocks(g, entry["argmax"], entry["pool"], POOL)
                lg = T.conv2d_cm_backward(
                    entry["in_shape"], p[f"{name}.weight"], g, b.stride, b.pad, entry["cols"],
                    need_input_grad=name != "conv1",
                )
                grads[f"{name}.weight"] = lg.param_grads["weight"]
                grads[f"{name}.bias"] = lg.param_grads["bias"]
                g = lg.input_grad
        return {name: grads[name] for name in p}


INIT_STD = 0.01


def output_layer(x, weights, bias):
    """``x @ weights.T + bias`` with one matrix-vector product per class.

    A single gemm may round a column differently depending on where it sits,
    so reordering the classes could change logits in the last bit. Per-class
    products make each logit independent of the class order.
    """
    return np.stack([x @ row for row in weights], axis=-1) + bias


def _init_layer(shape, rng, std):
    return rng.normal(0.0, std, size=shape) if len(shape) > 1 else np.zeros(shape)


def build(spec: ModelSpec, rng: np.random.Generator, init_std: Optional[float] = INIT_STD) -> Model:
    """Fresh model with Gaussian weights and zero biases.

    ``init_std=None`` scales each layer's std by ``sqrt(2 / fan_in)``.
    """
    params = {}
    for name, shape in spec.param_shapes().items():
        if init_std is None and len(shape) > 1:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in) if name != f"{OUTPUT}.weight" else INIT_STD
        else:
            std = init_std
        params[name] = _init_layer(shape, rng, std)
    return Model(spec, params)


def transfer_all_but_output(pretrained: Model, new_num_classes: int, rng: np.random.Generator) -> Model:
    """Copy every layer except the output layer, which is re-drawn for ``new_num_classes``."""
    if new_num_classes < 2:
        raise ValueError(f"new_num_classes must be >= 2, got {new_num_classes}")
    spec = pretrained.spec.with_classes(new_num_classes)
    params = {k: v.copy() for k, v in pretrained.params.items()}
    shapes = spec.param_shapes()
    params[f"{OUTPUT}.weight"] = rng.normal(0.0, INIT_STD, size=shapes[f"{OUTPUT}.weight"])
    params[f"{OUTPUT}.bias"] = np.zeros(shapes[f"{OUTPUT}.bias"])
    return Model(spec, params, pretrained.training)


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"F2CK"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class InconsistentCheckpointError(CheckpointError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save(model: Model, path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(_pack_str(model.spec.to_text()))
    buf.write(struct.pack("<I", len(model.params)))
    for name, arr in model.params.items():
        buf.write(_pack_str(name))
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what):
        n = self.u32(what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InconsistentCheckpointError(f"{what} is not valid UTF-8") from exc


def load(path) -> Model:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    try:
        spec = ModelSpec.from_text(r.string("model spec"))
    except (KeyError, ValueError) as exc:
        raise InconsistentCheckpointError(f"{path}: malformed model spec ({exc})") from exc
    count = r.u32("tensor count")
    params = {}
    for i in range(count):
        name = r.string(f"name of tensor #{i}")
        ndim = struct.unpack("<B", r.take(1, f"rank of tensor {name!r}"))[0]
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"dims of tensor {name!r}"))
        n = int(np.prod(dims)) if ndim else 1
        raw = r.take(4 * n, f"values of tensor {name!r}")
        params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
    if r.pos != len(r.data):
        raise InconsistentCheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes after last tensor")
    model = Model(spec, params)
    try:
        model.check_shapes()
    except ValueError as exc:
        raise InconsistentCheckpointError(f"{path}: {exc}") from exc
    for name, arr in params.items():
        if not np.all(np.isfinite(arr)):
            raise InconsistentCheckpointError(f"{path}: tensor {name!r} has non-finite values")
    return model
