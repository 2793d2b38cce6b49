"""Flat binary parameter checkpoints.

Layout (little-endian): magic "CDRW", version u32, count u32, then per
parameter: name length u16, name bytes (utf-8), rank u8, one u32 per dim,
f32 values in C order. Parameters are written sorted by name so files are
byte-reproducible.
"""

from __future__ import annotations

import struct

import numpy as np

from cdrecon import autodiff as ad
from cdrecon.errors import DataError

MAGIC = b"CDRW"
VERSION = 1


def save_checkpoint(params: dict, path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(params)))
        for name in sorted(params):
            data = np.asarray(params[name].data, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            for d in data.shape:
                f.write(struct.pack("<I", d))
            f.write(data.tobytes(order="C"))


def load_checkpoint(path) -> dict:
    """Read a checkpoint into a name -> np.float32 array dict."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise DataError(f"{path}: bad checkpoint magic")
        version, count = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if rank else 1
            raw = f.read(4 * n)
            if len(raw) != 4 * n:
                raise DataError(f"{path}: truncated checkpoint at {name}")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return out


def apply_checkpoint(params: dict, loaded: dict) -> None:
    """Copy loaded arrays into existing parameter tensors (shape-checked)."""
    for name, p in params.items():
        if name not in loaded:
            raise DataError(f"checkpoint missing parameter {name}")
        arr = loaded[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise DataError(
                f"checkpoint shape mismatch for {name}: {arr.shape} vs {p.data.shape}"
            )
        p.data = arr.astype(ad.default_dtype())
