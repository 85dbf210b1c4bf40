"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"DINCKPT\\0"
    version    uint32
    hdr_len    uint32
    header     hdr_len bytes of UTF-8 JSON: {"model": ModelConfig, "meta": {...}, "count": n}
    n records, each:
        name_len uint16, name (UTF-8)
        dtype    uint8   (1 = float32, 2 = float64)
        ndim     uint8, then ndim x uint32 dims
        data     raw little-endian values, row-major
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import DinParams, ModelConfig

MAGIC = b"DINCKPT\0"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: DinParams, cfg: ModelConfig, meta: dict | None = None) -> Path:
    """Write atomically (temp file + rename) so an interrupted save never clobbers a good file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    named = list(params.named_parameters())
    header = json.dumps({"model": cfg.to_dict(), "meta": meta or {}, "count": len(named)}, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for name, t in named:
            arr = t.data
            code = _CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    os.replace(tmp, path)
    return path


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a DIN checkpoint")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    header = json.loads(buf[off:off + hlen].decode())
    off += hlen
    arrays: dict[str, np.ndarray] = {}
    for _ in range(header["count"]):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape).astype(dt.newbyteorder("="))
        off += count * dt.itemsize
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return ModelConfig.from_dict(header["model"]), arrays, header["meta"]


def load_into(params: DinParams, arrays: dict[str, np.ndarray]) -> None:
    named = dict(params.named_parameters())
    missing = set(named) - set(arrays)
    extra = set(arrays) - set(named)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
    for name, t in named.items():
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} vs model {t.shape}")
        t.data = arrays[name].copy()


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, DinParams, dict]:
    from .model import init_params

    cfg, arrays, meta = read_checkpoint(path)
    dtype = next(iter(arrays.values())).dtype if arrays else np.float32
    params = init_params(cfg, seed=0, dtype=dtype)
    load_into(params, arrays)
    return cfg, params, meta
