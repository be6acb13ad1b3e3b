"""Neural primitives: seeded linear layers, MLPs, and pre-norm attention blocks.

Reverse-mode differentiation is provided by torch autograd. The calling
convention for roles mirrors the usual torch one: trainable parameters are
``nn.Parameter``, intermediates are graph tensors, constants carry
``requires_grad=False``. After ``loss.backward()`` every parameter reachable
from the loss holds a ``.grad`` of identical shape.

All attention here works on ``(..., seq, dim)`` inputs; leading axes are
batch. A process-wide score-pair counter can be armed to audit how many
(query token, key token) pairs each attention layer scores, which is what the
local-attention complexity checks measure.
"""
from __future__ import annotations

import contextlib
import math
from typing import Sequence

import torch
from torch import nn


class ScorePairCounter:
    """Counts (query, key) token pairs scored by attention while armed."""

    def __init__(self) -> None:
        self.active = False
        self.pairs = 0
        self.per_layer: list[int] = []

    def add(self, pairs: int) -> None:
        if self.active:
            self.pairs += pairs
            self.per_layer.append(pairs)


score_counter = ScorePairCounter()


@contextlib.contextmanager
def count_score_pairs():
    """Arm the global attention score-pair counter for the enclosed block."""
    score_counter.active = True
    score_counter.pairs = 0
    score_counter.per_layer = []
    try:
        yield score_counter
    finally:
        score_counter.active = False


def init_linear_(layer: nn.Linear, gen: torch.Generator) -> nn.Linear:
    """Seeded uniform(+-1/sqrt(fan_in)) init for weight and bias."""
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=gen)
    return layer


def make_linear(in_features: int, out_features: int, gen: torch.Generator,
                bias: bool = True) -> nn.Linear:
    return init_linear_(nn.Linear(in_features, out_features, bias=bias), gen)


def zero_linear_(layer: nn.Linear) -> nn.Linear:
    with torch.no_grad():
        layer.weight.zero_()
        if layer.bias is not None:
            layer.bias.zero_()
    return layer


class MLP(nn.Module):
    """Plain GELU MLP over the last axis; ``dims`` lists every layer width."""

    def __init__(self, dims: Sequence[int], gen: torch.Generator):
        super().__init__()
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.layers = nn.ModuleList(
            make_linear(a, b, gen) for a, b in zip(dims[:-1], dims[1:])
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = torch.nn.functional.gelu(x)
        return x


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention, heads split from a shared model width.

    Permutation-equivariant in query rows and permutation-invariant in
    key/value rows, which downstream set-latent modules rely on.
    """

    def __init__(self, dim: int, heads: int, gen: torch.Generator):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.wq = make_linear(dim, dim, gen)
        self.wk = make_linear(dim, dim, gen)
        self.wv = make_linear(dim, dim, gen)
        self.wo = make_linear(dim, dim, gen)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        # (..., seq, dim) -> (..., heads, seq, head_dim)
        new = x.shape[:-1] + (self.heads, self.head_dim)
        return x.reshape(new).transpose(-3, -2)

    def forward(self, query: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        if query.shape[-1] != self.dim or kv.shape[-1] != self.dim:
            raise ValueError(
                f"expected model dim {self.dim}, got {query.shape[-1]} / {kv.shape[-1]}"
            )
        q = self._split(self.wq(query))
        k = self._split(self.wk(kv))
        v = self._split(self.wv(kv))
        scores = (q @ k.transpose(-1, -2)) * self.scale
        if score_counter.active:
            batch = int(math.prod(query.shape[:-2])) if query.dim() > 2 else 1
            score_counter.add(batch * query.shape[-2] * kv.shape[-2])
        attn = torch.softmax(scores, dim=-1)
        out = attn @ v
        out = out.transpose(-3, -2).reshape(query.shape)
        return self.wo(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, gen: torch.Generator, mult: int = 4):
        super().__init__()
        self.fc1 = make_linear(dim, dim * mult, gen)
        self.fc2 = make_linear(dim * mult, dim, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class SelfAttentionBlock(nn.Module):
    """Pre-norm transformer block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int, heads: int, gen: torch.Generator):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, gen)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        x = x + self.ffn(self.norm2(x))
        return x


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention block; queries attend over a key/value set."""

    def __init__(self, dim: int, heads: int, gen: torch.Generator):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, gen)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, gen)

    def forward(self, query: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        query = query + self.attn(self.norm_q(query), self.norm_kv(kv))
        query = query + self.ffn(self.norm2(query))
        return query


class SelfAttentionStack(nn.Module):
    def __init__(self, dim: int, heads: int, depth: int, gen: torch.Generator):
        super().__init__()
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(dim, heads, gen) for _ in range(depth)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class CrossAttentionStack(nn.Module):
    def __init__(self, dim: int, heads: int, depth: int, gen: torch.Generator):
        super().__init__()
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(dim, heads, gen) for _ in range(depth)
        )

    def forward(self, query: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            query = block(query, kv)
        return query
