"""Flat binary parameter container.

Layout (little-endian)::

    b"CAPW"  u32 version
    repeated until end of file:
        u32 name length, name (utf-8), u32 rank, rank * u32 dims, float32 data

Operator hyper-parameters travel as the tensor ``meta.shape``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .learned import LearnedOperator, OperatorShape

MAGIC = b"CAPW"
VERSION = 1
_SHAPE_FIELDS = ("dim", "S", "delta", "k", "time_dim", "width", "hidden", "n_blocks", "loc_scale")


class CheckpointError(ValueError):
    pass


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray], version: int = VERSION) -> None:
    parts = [MAGIC, struct.pack("<I", version)]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a CAPW file")
    if len(buf) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos, out = 8, {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + size > len(buf):
                raise CheckpointError(f"{path}: tensor {name!r} truncated")
            out[name] = np.frombuffer(buf, "<f4", size // 4, pos).reshape(dims).astype(float)
            pos += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed tensor record") from exc
    return version, out


def save_operator(path: str | Path, op: LearnedOperator) -> None:
    meta = np.array([getattr(op.shape, f) for f in _SHAPE_FIELDS], dtype=float)
    write_tensors(path, {"meta.shape": meta, **op.params})


def load_operator(path: str | Path) -> LearnedOperator:
    _, tensors = read_tensors(path)
    meta = tensors.pop("meta.shape", None)
    if meta is None or meta.shape != (len(_SHAPE_FIELDS),):
        raise CheckpointError(f"{path}: missing operator shape")
    kw = {f: (float(v) if f == "loc_scale" else int(v)) for f, v in zip(_SHAPE_FIELDS, meta)}
    shape = OperatorShape(**kw)
    op = LearnedOperator(shape)
    missing = set(op.params) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    for k, v in op.params.items():
        if tensors[k].shape != v.shape:
            raise CheckpointError(f"{path}: tensor {k} has shape {tensors[k].shape}, expected {v.shape}")
    op.params = {k: tensors[k] for k in op.params}
    return op
