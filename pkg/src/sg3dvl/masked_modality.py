"""Masked language and masked object modeling: masking, heads, and losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .fusion import MultiHeadCrossAttention
from .geometry import Aabb, box_position_vector

WORD_MASK_RATIO = 0.2
OBJECT_MASK_RATIO = 0.75
LOGIT_CLAMP = 30.0
POSITION_DIM = 27


def mask_count(ratio: float, n: int) -> int:
    """Half-up rounding of ratio * n, floored at 1."""
    return max(1, int(np.floor(ratio * n + 0.5)))


@dataclass
class MaskPlan:
    """Masked index sets per sequence (words) and per scene (objects)."""
    masked_word_positions: list[list[int]] = field(default_factory=list)
    masked_object_positions: list[list[int]] = field(default_factory=list)
    word_ratio: float = WORD_MASK_RATIO
    object_ratio: float = OBJECT_MASK_RATIO

    def word_mask_bool(self, b: int, l: int) -> torch.Tensor:
        out = torch.zeros(b, l, dtype=torch.bool)
        for i, positions in enumerate(self.masked_word_positions):
            out[i, positions] = True
        return out

    def object_mask_bool(self, b: int, m: int) -> torch.Tensor:
        out = torch.zeros(b, m, dtype=torch.bool)
        for i, positions in enumerate(self.masked_object_positions):
            out[i, positions] = True
        return out


def mask_words(token_ids: torch.Tensor, lengths: torch.Tensor, unk_id: int,
               rng: np.random.Generator, ratio: float = WORD_MASK_RATIO):
    """Replace a sampled subset of real-token positions with the 'unk' id.

    Returns (masked_ids, plan); the untouched token_ids serve as labels.
    """
    if (lengths < 3).any():
        raise ValueError("mask_words requires sequence lengths >= 3")
    masked = token_ids.clone()
    plan = MaskPlan(word_ratio=ratio)
    for b in range(token_ids.shape[0]):
        l_b = int(lengths[b])
        k = mask_count(ratio, l_b)
        positions = sorted(rng.choice(l_b, size=k, replace=False).tolist())
        masked[b, positions] = unk_id
        plan.masked_word_positions.append(positions)
    return masked, plan


def mask_object_positions(m: int, rng: np.random.Generator,
                          ratio: float = OBJECT_MASK_RATIO) -> list[int]:
    k = mask_count(ratio, m)
    return sorted(rng.choice(m, size=k, replace=False).tolist())


class PositionalEmbedding(nn.Module):
    """Affine map from the 27-dim box position attributes to the feature space."""

    def __init__(self, feat_dim: int = 256):
        super().__init__()
        self.linear = nn.Linear(POSITION_DIM, feat_dim)

    def forward(self, position_attrs: torch.Tensor) -> torch.Tensor:
        return self.linear(position_attrs)


def box_position_batch(boxes_batch: list[list[Aabb]]) -> torch.Tensor:
    """(B, M, 27) position attributes for a batch of box lists."""
    arr = np.stack([[box_position_vector(b) for b in boxes] for boxes in boxes_batch])
    return torch.tensor(arr, dtype=torch.get_default_dtype())


def assemble_object_tokens(f_o: torch.Tensor, object_mask: torch.Tensor,
                           mask_token: torch.Tensor, e_o: torch.Tensor) -> torch.Tensor:
    """Full token set S_o: mask token substituted in place, positional clue added."""
    keep = (~object_mask).unsqueeze(-1).to(f_o.dtype)
    return f_o * keep + mask_token * object_mask.unsqueeze(-1).to(f_o.dtype) + e_o


class MomHead(nn.Module):
    """Cross-attention (object tokens query words) + 3 feed-forward layers to categories."""

    def __init__(self, feat_dim: int = 256, n_classes: int = 9, n_heads: int = 4):
        super().__init__()
        self.mask_token = nn.Parameter(torch.zeros(feat_dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.pos_embed = PositionalEmbedding(feat_dim)
        self.attn = MultiHeadCrossAttention(feat_dim, n_heads)
        self.mlp = nn.Sequential(
            nn.Linear(feat_dim, feat_dim), nn.ReLU(),
            nn.Linear(feat_dim, feat_dim), nn.ReLU(),
            nn.Linear(feat_dim, n_classes),
        )

    def forward(self, f_o: torch.Tensor, object_mask: torch.Tensor,
                position_attrs: torch.Tensor, f_w: torch.Tensor,
                word_mask: torch.Tensor | None = None) -> torch.Tensor:
        if f_w.shape[-2] == 0:
            raise ValueError("empty word sequence")
        e_o = self.pos_embed(position_attrs)
        s_o = assemble_object_tokens(f_o, object_mask, self.mask_token, e_o)
        fused = self.attn(s_o, f_w, word_mask)
        return self.mlp(fused)


class MlmHead(nn.Module):
    """Cross-attention (masked words query objects) + 3 feed-forward layers to vocab."""

    def __init__(self, feat_dim: int = 256, vocab_size: int = 60, n_heads: int = 4):
        super().__init__()
        self.attn = MultiHeadCrossAttention(feat_dim, n_heads)
        self.mlp = nn.Sequential(
            nn.Linear(feat_dim, feat_dim), nn.ReLU(),
            nn.Linear(feat_dim, feat_dim), nn.ReLU(),
            nn.Linear(feat_dim, vocab_size),
        )

    def forward(self, f_w_mask: torch.Tensor, f_o: torch.Tensor,
                object_key_mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.mlp(self.attn(f_w_mask, f_o, object_key_mask))


def _masked_cross_entropy(logits: torch.Tensor, targets: torch.Tensor,
                          mask: torch.Tensor, name: str) -> torch.Tensor:
    if not mask.any():
        warnings.warn(f"{name}: empty mask, returning 0")
        return logits.sum() * 0.0
    sel = logits[mask].clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    return F.cross_entropy(sel, targets[mask])


def mom_loss(logits: torch.Tensor, semantic_targets: torch.Tensor,
             plan: MaskPlan) -> torch.Tensor:
    """Cross-entropy over masked object positions only."""
    mask = plan.object_mask_bool(*logits.shape[:2]).to(logits.device)
    return _masked_cross_entropy(logits, semantic_targets, mask, "mom_loss")


def mlm_loss(logits: torch.Tensor, word_targets: torch.Tensor,
             plan: MaskPlan) -> torch.Tensor:
    """Cross-entropy over masked word positions only."""
    mask = plan.word_mask_bool(*logits.shape[:2]).to(logits.device)
    return _masked_cross_entropy(logits, word_targets, mask, "mlm_loss")
