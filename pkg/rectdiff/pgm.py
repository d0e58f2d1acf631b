"""
Binary portable graymap (P5, 8-bit) reading and writing.

Images live in [-1, 1]; they are mapped linearly to 0..255 on write.
"""
import logging
import os
from typing import List, Sequence

import numpy as np

from .errors import ImageFormatError

logger = logging.getLogger(__name__)

MAX_VAL = 255


def quantize(image: np.ndarray) -> np.ndarray:
    unit = (np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0) + 1.0) / 2.0
    return np.round(unit * MAX_VAL).astype(np.uint8)


def dequantize(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float64) / MAX_VAL * 2.0 - 1.0


def _as_plane(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ImageFormatError(f"graymap needs a single-channel image, got shape {img.shape}")
    return img


def to_bytes(image: np.ndarray) -> bytes:
    q = quantize(_as_plane(image))
    height, width = q.shape
    return f"P5\n{width} {height}\n{MAX_VAL}\n".encode("ascii") + q.tobytes()


def write_pgm(path: str, image: np.ndarray) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(to_bytes(image))


def _header_tokens(buf: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated graymap header")
        tokens.append(buf[start:pos].decode("ascii", errors="replace"))
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def from_bytes(buf: bytes) -> np.ndarray:
    """Decode a P5 graymap into a uint8 (H, W) array."""
    tokens, pos = _header_tokens(buf, 4)
    if tokens[0] != "P5":
        raise ImageFormatError(f"not a binary graymap (magic {tokens[0]!r})")
    try:
        width, height, max_val = (int(tok) for tok in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"bad graymap header {tokens}")
    if max_val != MAX_VAL:
        raise ImageFormatError(f"only 8-bit graymaps are supported, got maxval {max_val}")
    raster = buf[pos:pos + width * height]
    if len(raster) != width * height:
        raise ImageFormatError(f"graymap raster has {len(raster)} bytes, expected {width * height}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width)


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return from_bytes(f.read())


def load_image(path: str) -> np.ndarray:
    """Read a graymap back into [-1, 1] as a (1, H, W) array."""
    return dequantize(read_pgm(path))[None]


def dump_images(directory: str, prefix: str, images: Sequence[np.ndarray], ids: Sequence[int] = None) -> List[str]:
    ids = range(len(images)) if ids is None else ids
    paths = []
    for image_id, image in zip(ids, images):
        path = os.path.join(directory, f"{prefix}_{int(image_id):04d}.pgm")
        write_pgm(path, image)
        paths.append(path)
    logger.debug("wrote %d graymaps to %s", len(paths), directory)
    return paths
