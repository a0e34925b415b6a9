"""Binary PGM (P5) / PPM (P6) reading and writing."""

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _tokens(data: bytes, path):
    """Yield (token, end_offset) for the four header fields, skipping comments."""
    pos = 0
    n = len(data)
    found = 0
    while found < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError(f"{path}: header ended early")
        found += 1
        yield data[start:pos], pos


def read_netpbm(path) -> np.ndarray:
    """Return a float64 ``(C, H, W)`` array scaled to ``[0, 1]``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise NetpbmError(f"{path}: cannot read ({exc.strerror})") from exc
    fields = []
    end = 0
    for tok, end in _tokens(data, path):
        fields.append(tok)
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{path}: unsupported magic {magic!r}, expected P5 or P6")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise NetpbmError(f"{path}: malformed header {b' '.join(fields)!r}") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise NetpbmError(f"{path}: invalid header values width={width} height={height} maxval={maxval}")
    if end >= len(data) or not data[end:end + 1].isspace():
        raise NetpbmError(f"{path}: missing whitespace after header")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raster = data[end + 1:end + 1 + count * dtype.itemsize]
    if len(raster) != count * dtype.itemsize:
        raise NetpbmError(f"{path}: raster has {len(raster)} bytes, expected {count * dtype.itemsize}")
    pixels = np.frombuffer(raster, dtype=dtype).astype(np.float64) / maxval
    return pixels.reshape(height, width, channels).transpose(2, 0, 1).copy()


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def encode_netpbm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise NetpbmError(f"expected (1|3, H, W) image, got shape {image.shape}")
    c, h, w = image.shape
    magic = "P5" if c == 1 else "P6"
    header = f"{magic}\n{w} {h}\n255\n".encode("ascii")
    return header + to_bytes(image).transpose(1, 2, 0).tobytes()


def write_netpbm(path, image: np.ndarray) -> None:
    path = Path(path)
    data = encode_netpbm(image)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"{path}: cannot write image ({exc.strerror})") from exc
