"""Cross-modality attention: a single multi-head layer and the two-layer stack."""

from __future__ import annotations

import math

import torch
import torch.nn as nn


class MultiHeadCrossAttention(nn.Module):
    """Scaled dot-product cross attention with optional key padding mask.

    Stores the most recent attention weights (B, heads, T, S) in
    ``last_attention`` for inspection.
    """

    def __init__(self, feat_dim: int, n_heads: int = 4):
        super().__init__()
        if feat_dim % n_heads != 0:
            raise ValueError("feat_dim must be divisible by n_heads")
        self.n_heads = n_heads
        self.head_dim = feat_dim // n_heads
        self.q_proj = nn.Linear(feat_dim, feat_dim)
        self.k_proj = nn.Linear(feat_dim, feat_dim)
        self.v_proj = nn.Linear(feat_dim, feat_dim)
        self.out_proj = nn.Linear(feat_dim, feat_dim)
        self.last_attention: torch.Tensor | None = None

    def forward(self, queries: torch.Tensor, keys_values: torch.Tensor,
                key_mask: torch.Tensor | None = None) -> torch.Tensor:
        squeeze = queries.dim() == 2
        if squeeze:
            queries = queries.unsqueeze(0)
            keys_values = keys_values.unsqueeze(0)
            if key_mask is not None:
                key_mask = key_mask.unsqueeze(0)
        B, T, C = queries.shape
        S = keys_values.shape[1]
        if key_mask is not None and (~key_mask.bool()).all(dim=-1).any():
            raise ValueError("a query has all keys masked")

        def split(x, proj):
            return proj(x).view(B, -1, self.n_heads, self.head_dim).transpose(1, 2)

        q = split(queries, self.q_proj)
        k = split(keys_values, self.k_proj)
        v = split(keys_values, self.v_proj)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask.bool().view(B, 1, 1, S), float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(B, T, C)
        out = self.out_proj(out)
        return out.squeeze(0) if squeeze else out


class CrossAttentionLayer(nn.Module):
    """Pre-norm attention sublayer + feed-forward sublayer, both residual."""

    def __init__(self, feat_dim: int, n_heads: int = 4, ff_mult: int = 2):
        super().__init__()
        self.attn = MultiHeadCrossAttention(feat_dim, n_heads)
        self.norm1 = nn.LayerNorm(feat_dim)
        self.ff = nn.Sequential(
            nn.Linear(feat_dim, ff_mult * feat_dim),
            nn.ReLU(),
            nn.Linear(ff_mult * feat_dim, feat_dim),
        )
        self.norm2 = nn.LayerNorm(feat_dim)

    def forward(self, queries, keys_values, key_mask=None):
        x = queries + self.attn(self.norm1(queries), keys_values, key_mask)
        return x + self.ff(self.norm2(x))


class CrossAttentionStack(nn.Module):
    """The shared fusion stack used by every downstream head (default 2 layers)."""

    def __init__(self, feat_dim: int = 256, n_layers: int = 2, n_heads: int = 4):
        super().__init__()
        self.layers = nn.ModuleList(
            CrossAttentionLayer(feat_dim, n_heads) for _ in range(n_layers)
        )

    def forward(self, queries, keys_values, key_mask=None):
        x = queries
        for layer in self.layers:
            x = layer(x, keys_values, key_mask)
        return x


def fuse(queries, keys_values, key_mask, stack: CrossAttentionStack):
    return stack(queries, keys_values, key_mask)
