"""Three-level contrastive alignment: word-object, sentence-referred-object, scene."""

from __future__ import annotations

import warnings

import torch
import torch.nn.functional as F

from .proposals import ProposalSet
from .scene_synth import CATEGORIES

DEFAULT_TAU = 0.07
LOGIT_CLAMP = 30.0


def build_word_object_targets(name_spans_batch, max_len: int, psets: list[ProposalSet],
                              soft_targets: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Target similarity matrix S (B, M, L) and its validity mask.

    S[i, j, k] is 1 (or the match IoU when soft) iff token k is a name-span
    token whose category equals proposal j's matched ground-truth category
    and the proposal clears the 0.25 IoU gate. Only name-span columns are
    valid; one name may match several proposals.
    """
    b = len(psets)
    m = len(psets[0])
    s = torch.zeros(b, m, max_len)
    valid = torch.zeros(b, m, max_len, dtype=torch.bool)
    for i, (spans, pset) in enumerate(zip(name_spans_batch, psets)):
        for (k, category, _role) in spans:
            valid[i, :, k] = True
            cat_id = CATEGORIES.index(category)
            for j, prop in enumerate(pset.proposals):
                if prop.objectness_target == 1 and prop.semantic_target == cat_id:
                    s[i, j, k] = prop.iou_with_match if soft_targets else 1.0
    return s, valid


def word_object_loss(f_o: torch.Tensor, f_w: torch.Tensor,
                     targets: torch.Tensor, valid_mask: torch.Tensor) -> torch.Tensor:
    """Masked binary cross-entropy on sigmoid word-object similarities.

    Features are L2-normalized before the dot product; logits are clamped so
    saturated targets stay finite. The mean runs over valid entries only.
    """
    if not valid_mask.any():
        warnings.warn("word_object_loss: no valid entries, returning 0")
        return (f_o.sum() + f_w.sum()) * 0.0
    o = F.normalize(f_o, dim=-1)
    w = F.normalize(f_w, dim=-1)
    logits = torch.einsum("bmc,blc->bml", o, w).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    elementwise = F.binary_cross_entropy_with_logits(
        logits, targets.to(logits.dtype), reduction="none")
    mask = valid_mask.to(logits.dtype)
    return (elementwise * mask).sum() / mask.sum()


def info_nce(anchors: torch.Tensor, positives: torch.Tensor,
             tau: float = DEFAULT_TAU) -> torch.Tensor:
    """In-batch InfoNCE over L2-normalized features: anchor i vs positive i."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    b = anchors.shape[0]
    if b == 1:
        warnings.warn("info_nce: batch of 1 has no negatives, returning 0")
        return (anchors.sum() + positives.sum()) * 0.0
    a = F.normalize(anchors, dim=-1)
    p = F.normalize(positives, dim=-1)
    logits = (a @ p.t()) / tau
    labels = torch.arange(b, device=logits.device)
    return F.cross_entropy(logits, labels)


def sentence_referred_object_loss(node_feats_referred: torch.Tensor,
                                  f_s: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Align each referred object's post-graph node feature with its sentence feature."""
    return info_nce(node_feats_referred, f_s, tau)


def scene_level_loss(f_sc: torch.Tensor, f_des: torch.Tensor,
                     tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Align pooled scene features with scene-description sentence features."""
    return info_nce(f_sc, f_des, tau)


def sg_mcl_total(l_wo: torch.Tensor, l_sro: torch.Tensor,
                 l_scene: torch.Tensor) -> torch.Tensor:
    return l_wo + l_sro + l_scene
