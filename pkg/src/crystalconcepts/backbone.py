"""Pre-norm transformer backbone shared by every network in the package."""

import math

import torch
from torch import nn


class PreNormBlock(nn.Module):
    def __init__(self, hidden, heads, dropout=0.0, ff_mult=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden)
        self.attn = nn.MultiheadAttention(hidden, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(hidden)
        self.ff = nn.Sequential(
            nn.Linear(hidden, ff_mult * hidden),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(ff_mult * hidden, hidden),
        )

    def forward(self, h, pad_mask=None):
        x = self.norm1(h)
        a, _ = self.attn(x, x, x, key_padding_mask=pad_mask, need_weights=False)
        h = h + a
        return h + self.ff(self.norm2(h))


class Backbone(nn.Module):
    """Learned positions, then pre-norm blocks.

    ``layer_cond`` (broadcastable to the hidden states) is added to the input
    of every block.
    """

    def __init__(self, hidden, layers, heads, max_len, dropout=0.0):
        super().__init__()
        if hidden % heads:
            raise ValueError(f"hidden size {hidden} is not divisible by {heads} heads")
        self.positions = nn.Parameter(0.02 * torch.randn(max_len, hidden))
        self.blocks = nn.ModuleList(PreNormBlock(hidden, heads, dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(hidden)

    def forward(self, h, pad_mask=None, layer_cond=None):
        if h.shape[1] > self.positions.shape[0]:
            raise ValueError(f"sequence of length {h.shape[1]} exceeds {self.positions.shape[0]} positions")
        h = h + self.positions[: h.shape[1]]
        for block in self.blocks:
            if layer_cond is not None:
                h = h + layer_cond
            h = block(h, pad_mask)
        return self.norm(h)


def sinusoidal_embedding(steps, dim):
    """Standard sinusoidal encoding of integer diffusion steps."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = steps.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def masked_mean(h, pad_mask):
    if pad_mask is None:
        return h.mean(dim=1)
    live = (~pad_mask).to(h.dtype).unsqueeze(-1)
    return (h * live).sum(dim=1) / live.sum(dim=1).clamp_min(1.0)
