"""Binary PPM (P6) and PGM (P5) image I/O, maxval 255.

Float images in [0, 1] quantize to u8 by round-to-nearest; reads dequantize
back to float32 via /255.
"""
from __future__ import annotations

import os

import numpy as np
import torch

from .util import DataError


def _quantize(img: torch.Tensor) -> np.ndarray:
    arr = img.detach().cpu().numpy()
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: str | os.PathLike, rgb: torch.Tensor) -> None:
    if rgb.dim() != 3 or rgb.shape[-1] != 3:
        raise DataError(f"PPM wants (H, W, 3), got {tuple(rgb.shape)}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(rgb).tobytes())


def write_pgm(path: str | os.PathLike, gray: torch.Tensor) -> None:
    if gray.dim() != 2:
        raise DataError(f"PGM wants (H, W), got {tuple(gray.shape)}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(gray).tobytes())


def _read_header(data: bytes, magic: bytes, path: str) -> tuple[int, int, int]:
    if not data.startswith(magic):
        raise DataError(f"{path}: expected {magic.decode()} image")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    if fields[2] != 255:
        raise DataError(f"{path}: only maxval 255 supported")
    return fields[0], fields[1], pos + 1


def read_ppm(path: str | os.PathLike) -> torch.Tensor:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, body = _read_header(data, b"P6", path)
    raw = np.frombuffer(data[body:body + w * h * 3], dtype=np.uint8)
    if raw.size != w * h * 3:
        raise DataError(f"{path}: truncated pixel data")
    return torch.from_numpy(raw.reshape(h, w, 3).astype(np.float32) / 255.0)


def read_pgm(path: str | os.PathLike) -> torch.Tensor:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, body = _read_header(data, b"P5", path)
    raw = np.frombuffer(data[body:body + w * h], dtype=np.uint8)
    if raw.size != w * h:
        raise DataError(f"{path}: truncated pixel data")
    return torch.from_numpy(raw.reshape(h, w).astype(np.float32) / 255.0)
