"""Chunked little-endian checkpoint files.

Layout::

    b"JDCM"  u16 version
    u32 length, UTF-8 JSON metadata (codec config, step, lambda, rng state...)
    repeated until EOF:
        u16 name length, name bytes, u8 dtype (0 = f32), u8 rank,
        u32 x rank dims, raw little-endian float32 payload

Arrays are written in insertion order and the JSON uses sorted keys, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"JDCM"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


def encode_arrays(arrays: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = []
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", DTYPE_F32, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes())
    return b"".join(parts)


def dumps(meta: dict, arrays: "OrderedDict[str, np.ndarray]") -> bytes:
    mb = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<HI", VERSION, len(mb)) + mb + encode_arrays(arrays)


def loads(buf: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a JDCM checkpoint")
    try:
        version, mlen = struct.unpack_from("<HI", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 10
        meta = json.loads(buf[pos : pos + mlen].decode("utf-8"))
        pos += mlen
        arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            dtype, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            if dtype != DTYPE_F32:
                raise CheckpointError(f"array {name}: unknown dtype code {dtype}")
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(buf):
                raise CheckpointError(f"array {name} is truncated")
            arrays[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return meta, arrays


def save(path: str | os.PathLike, meta: dict, arrays) -> None:
    data = dumps(meta, arrays)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def params_hash(arrays: "OrderedDict[str, np.ndarray]") -> bytes:
    """First 8 bytes of SHA-256 over the serialized parameter arrays."""
    return hashlib.sha256(encode_arrays(arrays)).digest()[:8]


# ------------------------------------------------------------- model helpers


def model_arrays(model) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, np.asarray(t.data, dtype=np.float32)) for k, t in model.params.items())


def model_hash(model) -> bytes:
    return params_hash(model_arrays(model))


def save_model(path, model, extra_meta: dict | None = None, extra_arrays=None) -> None:
    meta = {"config": model.config.to_dict(), "step": model.step, "lambda": model.lam}
    meta.update(extra_meta or {})
    arrays = model_arrays(model)
    if extra_arrays:
        arrays.update(extra_arrays)
    save(path, meta, arrays)


def load_model(path):
    """Return (model, meta, arrays that are not model parameters)."""
    from .autodiff import Tensor
    from .codec import CodecConfig, CodecModel

    meta, arrays = load(path)
    if "config" not in meta:
        raise CheckpointError("checkpoint lacks a codec config")
    config = CodecConfig.from_dict(meta["config"])
    template = CodecModel.create(config)
    params = OrderedDict()
    for name, t in template.params.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {name}")
        arr = arrays.pop(name)
        if arr.shape != t.shape:
            raise CheckpointError(f"parameter {name}: shape {arr.shape}, expected {t.shape}")
        params[name] = Tensor(arr, requires_grad=True, name=name)
    model = CodecModel(config=config, params=params, step=int(meta.get("step", 0)), lam=float(meta.get("lambda", 0.0)))
    return model, meta, arrays
