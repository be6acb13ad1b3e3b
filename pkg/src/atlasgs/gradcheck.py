"""Central finite-difference gradient oracle.

Kept deliberately independent of autograd internals: the numeric side only
ever calls the forward function, so it can referee any differentiable path
in the library.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import torch

from .util import NonFiniteError


def check_gradient(f: Callable[[], torch.Tensor],
                   params: Sequence[torch.Tensor],
                   eps: float = 1e-5) -> float:
    """Compare autograd gradients of a scalar ``f()`` against central differences.

    ``params`` are leaf tensors with ``requires_grad=True`` that ``f`` closes
    over. Every coordinate is probed with (f(p+eps) - f(p-eps)) / (2 eps) and
    the max over coordinates of |a - n| / max(|a|, |n|, 1e-8) is returned.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss = f()
    if loss.dim() != 0:
        raise ValueError("f must return a scalar")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)

    max_rel = 0.0
    with torch.no_grad():
        for p, grad in zip(params, analytic):
            a_flat = (torch.zeros_like(p) if grad is None else grad).reshape(-1)
            p_flat = p.reshape(-1)
            for i in range(p_flat.numel()):
                orig = p_flat[i].item()
                p_flat[i] = orig + eps
                f_plus = float(f())
                p_flat[i] = orig - eps
                f_minus = float(f())
                p_flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NonFiniteError("non-finite value at finite-difference probe")
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a_i = float(a_flat[i])
                rel = abs(a_i - numeric) / max(abs(a_i), abs(numeric), 1e-8)
                max_rel = max(max_rel, rel)
    return max_rel


def check_module_gradient(module: torch.nn.Module,
                          loss_fn: Callable[[], torch.Tensor],
                          eps: float = 1e-5,
                          max_coords_per_param: int | None = None,
                          gen: torch.Generator | None = None) -> float:
    """check_gradient over a module's parameters.

    ``max_coords_per_param`` caps the probed coordinates per parameter
    (random subset) for spot checks on larger models; None probes all.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    if max_coords_per_param is None:
        return check_gradient(loss_fn, params, eps=eps)

    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    max_rel = 0.0
    with torch.no_grad():
        for p, grad in zip(params, analytic):
            a_flat = (torch.zeros_like(p) if grad is None else grad).reshape(-1)
            p_flat = p.reshape(-1)
            n = p_flat.numel()
            if n > max_coords_per_param:
                idx = torch.randperm(n, generator=gen)[:max_coords_per_param]
            else:
                idx = torch.arange(n)
            for i in idx.tolist():
                orig = p_flat[i].item()
                p_flat[i] = orig + eps
                f_plus = float(loss_fn())
                p_flat[i] = orig - eps
                f_minus = float(loss_fn())
                p_flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NonFiniteError("non-finite value at finite-difference probe")
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a_i = float(a_flat[i])
                rel = abs(a_i - numeric) / max(abs(a_i), abs(numeric), 1e-8)
                max_rel = max(max_rel, rel)
    return max_rel
