"""Shared plumbing: seeding, float precision mode, finiteness guards."""
from __future__ import annotations

import contextlib
import hashlib
import math

import torch


class DataError(Exception):
    """Bad or missing input data (file contents, shapes, value ranges)."""


class NonFiniteError(RuntimeError):
    """A tensor that must be finite contains NaN or Inf."""


def assert_finite(t: torch.Tensor, name: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return t


_PRECISIONS = {"float32": torch.float32, "float64": torch.float64}


def set_precision(mode: str) -> None:
    """Set the global float mode for newly created tensors.

    Training runs in "float32"; "float64" exists for gradient checking.
    """
    torch.set_default_dtype(_PRECISIONS[mode])


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the global float mode."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(_PRECISIONS[mode])
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def derive_seed(seed: int, *tags) -> int:
    """Stable 63-bit sub-seed from a base seed and arbitrary hashable tags."""
    digest = hashlib.sha256(repr((seed,) + tags).encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def generator(seed: int, *tags) -> torch.Generator:
    """CPU generator seeded from (seed, *tags); plain seed when no tags given."""
    g = torch.Generator(device="cpu")
    g.manual_seed(derive_seed(seed, *tags) if tags else int(seed))
    return g


def psnr(pred: torch.Tensor, target: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for values in [0, 1]."""
    mse = float(((pred - target) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return -10.0 * math.log10(mse)
