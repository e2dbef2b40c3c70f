"""Little-endian binary checkpoints.

Layout::

    magic    8 bytes  b"EDITSEQ1"
    version  u32
    meta     u32 length + UTF-8 JSON (model config, vocabulary, run info)
    epoch    u32
    tensors  u32 count, then per tensor:
             u16 name length, name, u8 ndim, u32 dims..., float64 values (row-major)
    optims   u32 count, then per optimiser:
             u16 name length, name, u64 step, 4 x f64 (lr, beta1, beta2, eps),
             tensor block (as above) holding ``m/<param>`` and ``v/<param>``
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .objectives import AdamState

MAGIC = b"EDITSEQ1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_str(f, s: str, fmt: str = "<H"):
    b = s.encode("utf-8")
    f.write(struct.pack(fmt, len(b)))
    f.write(b)


def _read(f, fmt: str):
    size = struct.calcsize(fmt)
    raw = f.read(size)
    if len(raw) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, raw)


def _read_str(f, fmt: str = "<H") -> str:
    (n,) = _read(f, fmt)
    raw = f.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint")
    return raw.decode("utf-8")


def _write_tensors(f, tensors: dict[str, np.ndarray]):
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes(order="C") handles layout; keeps 0-d shape
        _write_str(f, name)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes(order="C"))


def _read_tensors(f) -> dict[str, np.ndarray]:
    (count,) = _read(f, "<I")
    out = {}
    for _ in range(count):
        name = _read_str(f)
        (ndim,) = _read(f, "<B")
        shape = _read(f, f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        raw = f.read(8 * n)
        if len(raw) != 8 * n:
            raise CheckpointError(f"truncated data for tensor {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return out


def save(path: str | Path, meta: dict, tensors: dict[str, np.ndarray],
         optimizers: dict[str, AdamState] | None = None, epoch: int = 0) -> None:
    """Write atomically: a partial file never replaces an existing checkpoint."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_str(buf, json.dumps(meta, sort_keys=True), "<I")
    buf.write(struct.pack("<I", epoch))
    _write_tensors(buf, tensors)
    optimizers = optimizers or {}
    buf.write(struct.pack("<I", len(optimizers)))
    for name, st in optimizers.items():
        _write_str(buf, name)
        buf.write(struct.pack("<Q4d", st.step, st.lr, st.beta1, st.beta2, st.eps))
        moments = {f"m/{k}": v for k, v in st.m.items()}
        moments.update({f"v/{k}": v for k, v in st.v.items()})
        _write_tensors(buf, moments)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict[str, AdamState], int]:
    """Return ``(meta, tensors, optimizers, epoch)``."""
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = _read(f, "<I")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(_read_str(f, "<I"))
        (epoch,) = _read(f, "<I")
        tensors = _read_tensors(f)
        (n_opt,) = _read(f, "<I")
        optimizers = {}
        for _ in range(n_opt):
            name = _read_str(f)
            step, lr, b1, b2, eps = _read(f, "<Q4d")
            moments = _read_tensors(f)
            m = {k[2:]: v for k, v in moments.items() if k.startswith("m/")}
            v = {k[2:]: v for k, v in moments.items() if k.startswith("v/")}
            optimizers[name] = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step, m=m, v=v)
    return meta, tensors, optimizers, epoch
