"""Transformer noise predictor over padded sets of rows."""

import torch
from torch import nn

from .backbone import Backbone, sinusoidal_embedding
from .errors import ConfigError


class SetDenoiser(nn.Module):
    """Predicts diffusion noise for a ``(B, max_rows, in_dim)`` tensor.

    Rows get a learned position vector by index.  The timestep embedding
    (sinusoidal, then linear) and, when ``cond_dim`` is set, a per-row
    condition embedding are added to the hidden states at the start of every
    block.  Dropped or absent conditions use a learned null vector.  A live-row
    indicator is appended to the input as one extra channel.
    """

    def __init__(self, in_dim, hidden, layers, heads, max_rows, cond_dim=None, dropout=0.0):
        super().__init__()
        if hidden % heads:
            raise ConfigError(f"hidden size {hidden} is not divisible by {heads} heads")
        self.in_dim = in_dim
        self.hidden = hidden
        self.cond_dim = cond_dim
        self.inp = nn.Linear(in_dim + 1, hidden)
        self.time = nn.Linear(hidden, hidden)
        if cond_dim is not None:
            self.cond = nn.Linear(cond_dim, hidden)
            self.null = nn.Parameter(0.02 * torch.randn(hidden))
        self.backbone = Backbone(hidden, layers, heads, max_len=max_rows, dropout=dropout)
        self.out = nn.Linear(hidden, in_dim)

    def token_embedding(self, x, pad_mask=None):
        live = torch.ones(x.shape[:2], dtype=x.dtype) if pad_mask is None else (~pad_mask).to(x.dtype)
        return self.inp(torch.cat([x, live.unsqueeze(-1)], dim=-1))

    def condition_embedding(self, s, cond, drop, like):
        emb = self.time(sinusoidal_embedding(s, self.hidden))[:, None, :].expand_as(like)
        if self.cond_dim is None:
            return emb
        null = self.null.expand_as(like)
        if cond is None:
            return emb + null
        if cond.shape[:2] != like.shape[:2] or cond.shape[-1] != self.cond_dim:
            raise ConfigError(f"condition of shape {tuple(cond.shape)} for rows {tuple(like.shape[:2])}")
        c = self.cond(cond)
        if drop is not None:
            c = torch.where(drop.view(-1, 1, 1), null, c)
        return emb + c

    def forward(self, x, s, cond=None, drop=None, pad_mask=None):
        if x.shape[-1] != self.in_dim:
            raise ConfigError(f"input has {x.shape[-1]} channels, expected {self.in_dim}")
        h = self.token_embedding(x, pad_mask)
        h = self.backbone(h, pad_mask=pad_mask, layer_cond=self.condition_embedding(s, cond, drop, h))
        return self.out(h)
