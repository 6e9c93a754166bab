"""Binary checkpoints: parameters plus optimizer state.

Layout (all little-endian):
    magic   8 bytes  b"AVFORGE1"
    version u32
    nparams u32
    per parameter, in insertion order:
        name    u16 length + utf-8 bytes
        ndim    u8
        dims    u32 * ndim
        flags   u8 (bit 0: trainable)
        data    float32 * prod(dims)
    optstate u8 (1 if optimizer state follows)
    per parameter, same order:
        step    u64
        m, v    float32 * prod(dims) each
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .optim import ParamStore
from .tensor import Tensor

MAGIC = b"AVFORGE1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(store: ParamStore, path: str, with_optim: bool = True) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(store.params)))
        for name, p in store.params.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            dims = p.data.shape
            f.write(struct.pack("<B", len(dims)))
            for d in dims:
                f.write(struct.pack("<I", d))
            f.write(struct.pack("<B", 1 if p.requires_grad else 0))
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        f.write(struct.pack("<B", 1 if with_optim else 0))
        if with_optim:
            for name in store.params:
                f.write(struct.pack("<Q", store.steps[name]))
                f.write(np.ascontiguousarray(store.m[name], dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(store.v[name], dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> ParamStore:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise CheckpointError(f"bad magic in {path}")
        version, nparams = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        store = ParamStore()
        shapes = []
        for _ in range(nparams):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            dims = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            (flags,) = struct.unpack("<B", f.read(1))
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(dims).copy()
            store.add(name, Tensor(data), trainable=bool(flags & 1))
            shapes.append((name, dims, count))
        (has_optim,) = struct.unpack("<B", f.read(1))
        if has_optim:
            for name, dims, count in shapes:
                (step,) = struct.unpack("<Q", f.read(8))
                store.steps[name] = step
                store.m[name] = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(dims).copy()
                store.v[name] = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(dims).copy()
    return store
