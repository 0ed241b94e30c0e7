"""Feature fusion: per-source token projections and one multi-head self-attention layer."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Linear, Module, Tensor

TOKEN_ORDER = ("global", "point", "pixel")


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    # the shift is a constant: softmax is invariant to it
    shift = logits.data.max(axis=axis, keepdims=True)
    e = dc.exp(logits - shift)
    return e / e.sum(axis=axis, keepdims=True)


class TokenProjector(Module):
    """One learned linear map per feature source, each to ``channels``."""

    def __init__(self, dims: tuple[int, int, int], channels: int, rng: np.random.Generator):
        self.proj = [Linear(d, channels, rng, gain=1.0) for d in dims]
        self.channels = channels

    def __call__(self, f_global: Tensor, f_point: Tensor, f_pixel: Tensor) -> Tensor:
        toks = [p(f) for p, f in zip(self.proj, (f_global, f_point, f_pixel))]
        return dc.stack(toks, axis=1)  # (P, 3, C)


class SelfAttention(Module):
    """Multi-head self-attention over the 3 tokens with a residual connection.

    ``head_dim`` defaults to ``channels // heads`` and then requires divisibility.
    """

    def __init__(self, channels: int, heads: int, rng: np.random.Generator, head_dim: int | None = None):
        if head_dim is None:
            if channels % heads:
                raise ValueError(f"{channels} channels are not divisible by {heads} heads")
            head_dim = channels // heads
        self.heads = heads
        self.head_dim = head_dim
        inner = heads * head_dim
        self.q = Linear(channels, inner, rng, gain=1.0, bias=False)
        self.k = Linear(channels, inner, rng, gain=1.0, bias=False)
        self.v = Linear(channels, inner, rng, gain=1.0, bias=False)
        self.out = Linear(inner, channels, rng, gain=1.0)

    def _split(self, x: Tensor) -> Tensor:
        p, t, _ = x.shape
        return x.reshape(p, t, self.heads, self.head_dim).transpose(0, 2, 1, 3)  # (P, H, T, d)

    def attention(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        """Pre-residual, pre-output-mix attended values (P, H, T, d) and weights (P, H, T, T)."""
        q, k, v = self._split(self.q(tokens)), self._split(self.k(tokens)), self._split(self.v(tokens))
        logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.head_dim))
        weights = softmax(logits, axis=-1)
        return weights @ v, weights

    def __call__(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        attended, weights = self.attention(tokens)
        p, h, t, d = attended.shape
        merged = attended.transpose(0, 2, 1, 3).reshape(p, t, h * d)
        return tokens + self.out(merged), weights


def fuse(tokens_out: Tensor, mode: str = "concat") -> Tensor:
    """Reduce (P, 3, C) attended tokens to one feature per point."""
    p, t, c = tokens_out.shape
    if mode == "concat":
        return tokens_out.reshape(p, t * c)
    if mode == "mean":
        return tokens_out.mean(axis=1)
    raise ValueError(f"unknown reduction {mode!r}")


class FusionTransformer(Module):
    def __init__(self, dims: tuple[int, int, int], channels: int, heads: int, rng: np.random.Generator,
                 head_dim: int | None = None, reduction: str = "concat"):
        self.tokens = TokenProjector(dims, channels, rng)
        self.attn = SelfAttention(channels, heads, rng, head_dim)
        self.reduction = reduction
        self.out_dim = channels * (3 if reduction == "concat" else 1)

    def __call__(self, f_global: Tensor, f_point: Tensor, f_pixel: Tensor) -> Tensor:
        toks = self.tokens(f_global, f_point, f_pixel)
        out, _ = self.attn(toks)
        return fuse(out, self.reduction)
