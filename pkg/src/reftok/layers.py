"""Transformer building blocks shared by the tokenizer and the generator."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn


def sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """Standard 1D sin/cos embedding: first half sin, second half cos."""
    if dim % 2:
        raise ValueError("1D sincos dim must be even")
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.einsum("m,d->md", np.asarray(positions, dtype=np.float64).reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def axis_dims(dim: int) -> tuple[int, int, int]:
    """Split ``dim`` into even (t, y, x) shares; the remainder goes to t."""
    base = (dim // 3) // 2 * 2
    return dim - 2 * base, base, base


def sincos_3d(tau: int, eta: int, omega: int, dim: int) -> np.ndarray:
    """(tau*eta*omega, dim) table: concatenation of 1D sincos over t, y and x.

    Rows follow (t, y, x) row-major order. Any odd leftover column is zero.
    """
    dt, dy, dx = axis_dims(dim)
    dt_even = dt // 2 * 2
    t, y, x = np.meshgrid(np.arange(tau), np.arange(eta), np.arange(omega), indexing="ij")
    parts = [sincos_1d(t, dt_even), sincos_1d(y, dy), sincos_1d(x, dx)]
    if dt_even != dt:
        parts.insert(1, np.zeros((t.size, dt - dt_even)))
    return np.concatenate(parts, axis=1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, mask=None):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
        if mask is not None:
            # mask[i, j] is True when query i may read key j
            att = att.masked_fill(~mask, float("-inf"))
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.trunc_normal_(module.weight, std=0.02)


def gather_tokens(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """x: (B, N, D), index: (B, M) -> (B, M, D)."""
    return torch.gather(x, 1, index.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
