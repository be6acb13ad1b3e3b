"""Binary parameter container: "ATLG" magic, version, length-prefixed named tensors.

Record layout after the 8-byte header (magic + u32 version + u32 tensor count):

    u32 name length | name (utf-8) | u8 dtype code | u32 rank |
    u64 extent per rank | raw little-endian payload

Also used for latent datasets (one tensor per shape id) and for full training
state (model/optimizer tensors plus a JSON blob stored as a uint8 tensor).
"""
from __future__ import annotations

import json
import os
import struct
from typing import Dict

import numpy as np
import torch

from .util import DataError

MAGIC = b"ATLG"
VERSION = 1

_DTYPE_CODES = {
    torch.float32: (0, "<f4"),
    torch.float64: (1, "<f8"),
    torch.int64: (2, "<i8"),
    torch.uint8: (3, "|u1"),
}
_CODE_DTYPES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPE_CODES.items()}

META_KEY = "__meta_json__"


def save_tensors(path: str | os.PathLike, tensors: Dict[str, torch.Tensor]) -> None:
    """Atomically write named tensors (write temp file, then rename)."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, tensor in tensors.items():
            t = tensor.detach().cpu().contiguous()
            if t.dtype not in _DTYPE_CODES:
                raise DataError(f"unsupported dtype {t.dtype} for tensor {name!r}")
            code, np_dtype = _DTYPE_CODES[t.dtype]
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BI", code, t.dim()))
            for extent in t.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(t.numpy().astype(np_dtype, copy=False).tobytes())
    os.replace(tmp, path)


def load_tensors(path: str | os.PathLike) -> Dict[str, torch.Tensor]:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise DataError(f"{path}: bad magic bytes, not an ATLG container")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    offset = 12
    out: Dict[str, torch.Tensor] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            code, rank = struct.unpack_from("<BI", data, offset)
            offset += 5
            shape = []
            for _ in range(rank):
                (extent,) = struct.unpack_from("<Q", data, offset)
                offset += 8
                shape.append(extent)
            if code not in _CODE_DTYPES:
                raise DataError(f"{path}: unknown dtype code {code} for {name!r}")
            dtype, np_dtype = _CODE_DTYPES[code]
            numel = int(np.prod(shape, dtype=np.int64)) if shape else 1
            nbytes = numel * np.dtype(np_dtype).itemsize
            payload = data[offset:offset + nbytes]
            if len(payload) != nbytes:
                raise DataError(f"{path}: truncated payload for tensor {name!r}")
            offset += nbytes
            arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape).copy()
            out[name] = torch.from_numpy(arr).to(dtype)
    except struct.error as exc:
        raise DataError(f"{path}: truncated container ({exc})") from exc
    return out


def save_state(path: str | os.PathLike, tensors: Dict[str, torch.Tensor],
               meta: dict) -> None:
    """Save tensors plus a JSON metadata blob in one container."""
    blob = torch.from_numpy(
        np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8).copy()
    )
    merged = dict(tensors)
    merged[META_KEY] = blob
    save_tensors(path, merged)


def load_state(path: str | os.PathLike) -> tuple[Dict[str, torch.Tensor], dict]:
    tensors = load_tensors(path)
    blob = tensors.pop(META_KEY, None)
    if blob is None:
        return tensors, {}
    meta = json.loads(bytes(blob.numpy().tobytes()).decode("utf-8"))
    return tensors, meta
