"""Binary model checkpoints.

Layout (little-endian)::

    b"TCFN"  u16 version  u32 count
    count x { u16 name_len, name (UTF-8), u8 rank, rank x u32 dims, f32 data }

Values are stored as float32, so a float64 model loses precision on save;
loading and saving again is byte-identical. Non-trainable state (batch-norm
running statistics, fuzzy centroids, standardization statistics) is written
with a ``state:`` name prefix.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .autodiff import Parameter

MAGIC = b"TCFN"
VERSION = 1
STATE_PREFIX = "state:"


class CheckpointError(ValueError):
    pass


def encode(params: Iterable[Parameter]) -> bytes:
    params = list(params)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names")
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(params))]
    for p in params:
        name = (p.name if p.trainable else STATE_PREFIX + p.name).encode("utf-8")
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<B", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode(buf: bytes, source: str = "<bytes>") -> dict[str, tuple[np.ndarray, bool]]:
    """Return name -> (float64 array, trainable)."""
    def need(pos, n):
        if pos + n > len(buf):
            raise CheckpointError(f"{source}: truncated checkpoint")

    need(0, 10)
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    pos = 10
    out: dict[str, tuple[np.ndarray, bool]] = {}
    for _ in range(count):
        need(pos, 2)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(pos, nlen + 1)
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        rank = buf[pos]
        pos += 1
        need(pos, 4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        need(pos, 4 * n)
        data = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float64).reshape(dims)
        pos += 4 * n
        trainable = not name.startswith(STATE_PREFIX)
        out[name if trainable else name[len(STATE_PREFIX) :]] = (data, trainable)
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes")
    return out


def save(params: Iterable[Parameter], path) -> None:
    Path(path).write_bytes(encode(params))


def load(path) -> dict[str, tuple[np.ndarray, bool]]:
    path = Path(path)
    return decode(path.read_bytes(), source=str(path))


def restore(params: Iterable[Parameter], entries: dict[str, tuple[np.ndarray, bool]]) -> None:
    """Copy checkpoint entries into ``params`` by name, checking shapes."""
    for p in params:
        if p.name not in entries:
            raise CheckpointError(f"checkpoint has no entry for {p.name}")
        data, _ = entries[p.name]
        if data.shape != p.shape:
            raise CheckpointError(f"{p.name}: checkpoint shape {data.shape} != model shape {p.shape}")
        p.tensor.data = data.copy()
