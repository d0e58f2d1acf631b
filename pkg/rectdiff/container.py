"""
Self-describing binary container for checkpoints and datasets.

Layout (all integers little-endian):

    magic    4 bytes  b"RDIF"
    version  u16
    kind     u8       1 denoiser, 2 rectifier, 3 dataset
    n_meta   u32      then n_meta × (u16 key length, key, u32 value length, value)
    n_entry  u32      then n_entry × (u16 id length, id, u16 tag length, tag, u8 ndim, ndim × u32)
    payload           float64 little-endian arrays in entry order

Reading checks every length against the bytes actually present; a round trip
is bit-exact.
"""
import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .errors import ContainerError

logger = logging.getLogger(__name__)

MAGIC = b"RDIF"
VERSION = 1
KINDS = {"denoiser": 1, "rectifier": 2, "dataset": 3}
_KIND_NAMES = {v: k for k, v in KINDS.items()}


@dataclass
class Container:
    kind: str
    meta: Dict[str, str] = field(default_factory=dict)
    # id -> (tag, array), insertion ordered
    entries: Dict[str, Tuple[str, np.ndarray]] = field(default_factory=dict)

    def add(self, entry_id: str, tag: str, array: np.ndarray) -> None:
        if entry_id in self.entries:
            raise ContainerError(f"duplicate entry id {entry_id!r}")
        self.entries[entry_id] = (tag, np.asarray(array, dtype=np.float64))

    def array(self, entry_id: str) -> np.ndarray:
        try:
            return self.entries[entry_id][1]
        except KeyError:
            raise ContainerError(f"entry {entry_id!r} missing from {self.kind} container")


def _pack_str(s: str, width: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<" + width, len(raw)) + raw


def to_bytes(c: Container) -> bytes:
    if c.kind not in KINDS:
        raise ContainerError(f"unknown container kind {c.kind!r}")
    parts = [MAGIC, struct.pack("<HB", VERSION, KINDS[c.kind]), struct.pack("<I", len(c.meta))]
    for key, value in c.meta.items():
        parts += [_pack_str(key, "H"), _pack_str(str(value), "I")]
    parts.append(struct.pack("<I", len(c.entries)))
    for entry_id, (tag, arr) in c.entries.items():
        parts += [_pack_str(entry_id, "H"), _pack_str(tag, "H"), struct.pack("<B", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in c.entries.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError(f"truncated container: wanted {n} bytes at offset {self.pos}, "
                                 f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def string(self, width: str) -> str:
        (n,) = self.unpack(width)
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ContainerError(f"corrupt string in container header: {e}")


def from_bytes(buf: bytes, expected_kind: str = None) -> Container:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise ContainerError("corrupt header: bad magic bytes")
    version, kind_code = r.unpack("HB")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version} (this build reads version {VERSION})")
    if kind_code not in _KIND_NAMES:
        raise ContainerError(f"corrupt header: unknown kind code {kind_code}")
    kind = _KIND_NAMES[kind_code]
    if expected_kind is not None and kind != expected_kind:
        raise ContainerError(f"expected a {expected_kind} container, found {kind}")

    c = Container(kind)
    (n_meta,) = r.unpack("I")
    for _ in range(n_meta):
        key = r.string("H")
        c.meta[key] = r.string("I")
    (n_entry,) = r.unpack("I")
    table = []
    for _ in range(n_entry):
        entry_id, tag = r.string("H"), r.string("H")
        (ndim,) = r.unpack("B")
        table.append((entry_id, tag, r.unpack(f"{ndim}I") if ndim else ()))
    for entry_id, tag, shape in table:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        c.add(entry_id, tag, arr)
    if r.pos != len(buf):
        raise ContainerError(f"corrupt container: {len(buf) - r.pos} trailing bytes")
    return c


def save(path: str, c: Container) -> str:
    """Write the container and return the sha256 of the written bytes."""
    data = to_bytes(c)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)
    digest = hashlib.sha256(data).hexdigest()
    logger.info("wrote %s container %s (%d entries, sha256 %s)", c.kind, path, len(c.entries), digest[:12])
    return digest


def load(path: str, expected_kind: str = None) -> Container:
    with open(path, "rb") as f:
        return from_bytes(f.read(), expected_kind)
