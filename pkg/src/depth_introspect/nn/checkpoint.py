"""Versioned binary parameter checkpoints.

Layout (all integers little-endian u32)::

    magic    b"DEDNCKPT"
    version  1
    n_layers
    per layer:
        tag_len, kind tag (ascii)
        n_arrays
        per array: ndim, dims..., float32 payload
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Sequence, Union

import numpy as np

MAGIC = b"DEDNCKPT"
VERSION = 1
_MAX_NDIM = 8


class CheckpointError(ValueError):
    pass


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def dumps(entries: Sequence[tuple[str, Sequence[np.ndarray]]]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_u32(VERSION))
    buf.write(_u32(len(entries)))
    for kind, arrays in entries:
        tag = kind.encode("ascii")
        buf.write(_u32(len(tag)))
        buf.write(tag)
        buf.write(_u32(len(arrays)))
        for a in arrays:
            a = np.asarray(a)
            buf.write(_u32(a.ndim))
            for d in a.shape:
                buf.write(_u32(d))
            buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos} (wanted {n} more)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def loads(blob: bytes) -> list[tuple[str, list[np.ndarray]]]:
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries = []
    for _ in range(r.u32()):
        tag_len = r.u32()
        if tag_len > 64:
            raise CheckpointError(f"implausible kind tag length {tag_len}")
        kind = r.take(tag_len).decode("ascii")
        arrays = []
        for _ in range(r.u32()):
            ndim = r.u32()
            if ndim > _MAX_NDIM:
                raise CheckpointError(f"implausible rank {ndim}")
            shape = tuple(r.u32() for _ in range(ndim))
            count = int(np.prod(shape, dtype=np.int64))
            payload = r.take(4 * count)
            arrays.append(np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32))
        entries.append((kind, arrays))
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after last layer")
    return entries


def save(path: Union[str, Path], layers) -> None:
    """Write every layer of ``layers`` (objects with ``spec.kind`` and ``state_arrays()``)."""
    Path(path).write_bytes(dumps([(l.spec.kind, l.state_arrays()) for l in layers]))


def load(path: Union[str, Path], layers) -> None:
    """Restore ``layers`` in place; kinds and shapes must match the file."""
    entries = loads(Path(path).read_bytes())
    layers = list(layers)
    if len(entries) != len(layers):
        raise CheckpointError(f"checkpoint has {len(entries)} layers, model has {len(layers)}")
    for layer, (kind, arrays) in zip(layers, entries):
        if kind != layer.spec.kind:
            raise CheckpointError(f"{layer.name}: checkpoint kind {kind!r} != model kind {layer.spec.kind!r}")
        try:
            layer.load_state_arrays(arrays)
        except ValueError as exc:
            raise CheckpointError(str(exc)) from exc
