"""Bit-exact model checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes  b"MONOUNET"
    version      u32      1
    spec_len     u32      length of the spec block
    spec         utf-8    "key=value\\n" lines of the ModelSpec
    n_tensors    u32
    per tensor:
      name_len   u32
      name       utf-8    state_dict key
      dtype      u8       0 = float32, 1 = float64
      ndim       u8
      shape      ndim x u32
      data       product(shape) little-endian IEEE-754 values, row-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .network import ModelSpec, MonoUNet

MAGIC = b"MONOUNET"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {torch.float32: 0, torch.float64: 1}


class CheckpointError(ValueError):
    pass


def dumps(model: MonoUNet) -> bytes:
    spec = "".join(f"{k}={v}\n" for k, v in model.spec.describe().items()).encode()
    state = model.state_dict()
    out = [MAGIC, struct.pack("<II", VERSION, len(spec)), spec, struct.pack("<I", len(state))]
    for name, t in state.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        code = _CODES[t.dtype]
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<BB", code, t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
        out.append(t.numpy().astype(_DTYPES[code], copy=False).tobytes())
    return b"".join(out)


def loads(blob: bytes) -> MonoUNet:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a MonoUNet checkpoint (bad magic)")
    version, spec_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    lines = bytes(take(spec_len)).decode().splitlines()
    spec = ModelSpec.from_description(dict(line.split("=", 1) for line in lines))
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint")
    model = MonoUNet(spec)
    dtypes = {t.dtype for t in state.values()}
    if dtypes == {torch.float64}:
        model = model.double()
    model.load_state_dict(state, strict=True)
    return model


def save(model: MonoUNet, path: str | Path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path: str | Path) -> MonoUNet:
    return loads(Path(path).read_bytes())
