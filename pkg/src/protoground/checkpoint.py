"""Flat tensor archive: hierarchical names -> shape + little-endian float32.

Layout::

    magic (8 bytes) | version u32 | count u32
    per entry: name_len u16 | name utf-8 | ndim u8 | dims u32 * ndim | float32 payload
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import Tensor

CKPT_MAGIC = b"PGCKPT\x00\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(tensors: Mapping[str, Tensor], path: str | Path) -> None:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().numpy().astype("<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path: str | Path) -> dict[str, Tensor]:
    data = Path(path).read_bytes()

    def need(offset, n, what):
        if offset + n > len(data):
            raise CheckpointError(f"{path}: truncated {what} at offset {offset} (need {n} bytes, {len(data) - offset} left)")

    need(0, 16, "header")
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r} at offset 0")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset 8")
    off = 16
    out = {}
    for _ in range(count):
        need(off, 2, "name length")
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        need(off, n, "name")
        name = data[off : off + n].decode("utf-8")
        off += n
        need(off, 1, f"rank of {name!r}")
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        need(off, 4 * ndim, f"shape of {name!r}")
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = 4 * int(np.prod(shape, dtype=np.int64))
        need(off, size, f"payload of {name!r}")
        arr = np.frombuffer(data, dtype="<f4", count=size // 4, offset=off).reshape(shape)
        out[name] = torch.from_numpy(arr.astype(np.float32))
        off += size
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes after offset {off}")
    return out


def load_into(module: torch.nn.Module, tensors: Mapping[str, Tensor], skip_prefix: str | None = None) -> None:
    """Copy archive tensors into a module's state, checking names and shapes."""
    state = module.state_dict()
    expected = {k for k in state if skip_prefix is None or not k.startswith(skip_prefix)}
    missing, unexpected = expected - set(tensors), set(tensors) - expected
    if missing or unexpected:
        raise CheckpointError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
    with torch.no_grad():
        for k, v in tensors.items():
            if tuple(state[k].shape) != tuple(v.shape):
                raise CheckpointError(f"{k}: expected shape {tuple(state[k].shape)}, got {tuple(v.shape)}")
            state[k].copy_(v)
