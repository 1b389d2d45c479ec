"""Minimal pre-norm transformer building blocks.

Kept deliberately small and dropout-free: every forward pass is a pure
deterministic function of (parameters, input), which the oracle tests and
the bitwise resumability contract rely on.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class SelfAttention(nn.Module):
    """Multi-head self-attention over the second axis of [B, L, d]."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, need_weights: bool = False):
        b, l, d = x.shape
        qkv = self.qkv(x).reshape(b, l, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each [B, heads, L, head_dim]
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.head_dim**0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, l, d)
        out = self.proj(out)
        return (out, attn) if need_weights else (out, None)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, need_weights: bool = False):
        a, w = self.attn(self.norm1(x), need_weights=need_weights)
        x = x + a
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return (x, w) if need_weights else (x, None)

    def zero_residual_branches_(self) -> None:
        """Make the block the identity map (test hook)."""
        with torch.no_grad():
            self.attn.proj.weight.zero_()
            self.attn.proj.bias.zero_()
            self.fc2.weight.zero_()
            self.fc2.bias.zero_()
