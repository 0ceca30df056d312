"""Fine-tuning heads (grounding, captioning, QA) and task metrics."""

from __future__ import annotations

import math
from collections import Counter

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Aabb, iou_aabb
from .proposals import ProposalSet
from .scene_synth import CATEGORIES, COLORS

GROUNDING_IOU = 0.25
CAPTION_MAX_LEN = 16

ANSWER_SPACE = COLORS + CATEGORIES


def answer_id(answer: str) -> int:
    return ANSWER_SPACE.index(answer)


# grounding -----------------------------------------------------------------

class GroundingHead(nn.Module):
    """Three feed-forward layers mapping fused proposal features to one logit each."""

    def __init__(self, feat_dim: int = 256):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(feat_dim, feat_dim), nn.ReLU(),
            nn.Linear(feat_dim, feat_dim), nn.ReLU(),
            nn.Linear(feat_dim, 1),
        )

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        return self.mlp(fused).squeeze(-1)


def build_grounding_target(pset: ProposalSet, referred_box: Aabb) -> torch.Tensor:
    """Multi-hot over proposals with IoU > 0.25 to the referred box, normalized to sum 1."""
    multi_hot = torch.tensor(
        [float(iou_aabb(p.box, referred_box) > GROUNDING_IOU) for p in pset.proposals])
    total = multi_hot.sum()
    if total == 0:
        raise ValueError("no proposal overlaps the referred object above the IoU gate")
    return multi_hot / total


def grounding_loss(scores: torch.Tensor, target_dist: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between softmax(scores) and the normalized multi-hot target."""
    log_p = F.log_softmax(scores, dim=-1)
    return -(target_dist.to(log_p.dtype) * log_p).sum(dim=-1).mean()


# captioning ----------------------------------------------------------------

class CaptionDecoder(nn.Module):
    """GRU decoder conditioned on the referred object's fused feature."""

    def __init__(self, vocab_size: int, feat_dim: int = 256, embed_dim: int = 128):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, embed_dim)
        self.init_proj = nn.Linear(feat_dim, feat_dim)
        self.cell = nn.GRUCell(embed_dim, feat_dim)
        self.out = nn.Linear(feat_dim, vocab_size)

    def teacher_forced_logits(self, object_feat: torch.Tensor,
                              token_ids: torch.Tensor) -> torch.Tensor:
        """Logits for positions 2..L given inputs 1..L-1, shape (B, L-1, vocab)."""
        h = torch.tanh(self.init_proj(object_feat))
        logits = []
        for t in range(token_ids.shape[1] - 1):
            h = self.cell(self.embedding(token_ids[:, t]), h)
            logits.append(self.out(h))
        return torch.stack(logits, dim=1)

    @torch.no_grad()
    def greedy_decode(self, object_feat: torch.Tensor, bos_id: int, eos_id: int,
                      max_len: int = CAPTION_MAX_LEN) -> list[int]:
        h = torch.tanh(self.init_proj(object_feat.unsqueeze(0)))
        token = torch.tensor([bos_id])
        out: list[int] = []
        for _ in range(max_len):
            h = self.cell(self.embedding(token), h)
            token = self.out(h).argmax(dim=-1)
            if int(token) == eos_id:
                break
            out.append(int(token))
        return out


def caption_loss(logits: torch.Tensor, token_ids: torch.Tensor,
                 lengths: torch.Tensor) -> torch.Tensor:
    """Teacher-forced cross-entropy against targets 2..L, masked past each length."""
    b, lm1, v = logits.shape
    targets = token_ids[:, 1:]
    valid = torch.arange(1, lm1 + 1, device=logits.device)[None, :] < lengths[:, None]
    flat = logits.reshape(-1, v)[valid.reshape(-1)]
    return F.cross_entropy(flat, targets.reshape(-1)[valid.reshape(-1)])


# question answering --------------------------------------------------------

class QaHead(nn.Module):
    """Answer classification from pooled fused object features and the question feature."""

    def __init__(self, feat_dim: int = 256, n_answers: int = len(ANSWER_SPACE)):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(2 * feat_dim, feat_dim), nn.ReLU(),
            nn.Linear(feat_dim, n_answers),
        )

    def forward(self, fused_obj: torch.Tensor, question_feat: torch.Tensor) -> torch.Tensor:
        pooled = fused_obj.mean(dim=-2)
        return self.mlp(torch.cat([pooled, question_feat], dim=-1))


def qa_answer_loss(logits: torch.Tensor, answer_ids: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of answer logits against one-hot labels."""
    one_hot = F.one_hot(answer_ids, num_classes=logits.shape[-1]).to(logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, one_hot)


# caption metrics ------------------------------------------------------------

def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate, reference) -> float:
    """Sentence BLEU-4 with clipped precision (no smoothing) and brevity penalty."""
    candidate, reference = list(candidate), list(reference)
    if not candidate:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        cand = _ngrams(candidate, n)
        ref = _ngrams(reference, n)
        total = max(len(candidate) - n + 1, 0)
        clipped = sum(min(c, ref[g]) for g, c in cand.items())
        if total == 0 or clipped == 0:
            return 0.0
        log_sum += 0.25 * math.log(clipped / total)
    bp = 1.0 if len(candidate) >= len(reference) else math.exp(1 - len(reference) / len(candidate))
    return bp * math.exp(log_sum)


def _lcs_len(a, b) -> int:
    dp = [0] * (len(b) + 1)
    for x in a:
        prev = 0
        for j, y in enumerate(b, start=1):
            cur = dp[j]
            dp[j] = prev + 1 if x == y else max(dp[j], dp[j - 1])
            prev = cur
    return dp[len(b)]


def rouge_l(candidate, reference, beta_sq: float = 1.2) -> float:
    """LCS F-measure with beta^2 = 1.2."""
    candidate, reference = list(candidate), list(reference)
    if not candidate or not reference:
        return 0.0
    lcs = _lcs_len(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return (1 + beta_sq) * p * r / (r + beta_sq * p)


CAPTION_METRICS = {"bleu4": bleu4, "rougeL": rouge_l}


# task metrics ---------------------------------------------------------------

def acc_at_kiou(pred_boxes: list[Aabb], gt_boxes: list[Aabb], k: float) -> float:
    """Fraction of predictions whose IoU with ground truth is at least k."""
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError("prediction/ground-truth count mismatch")
    if not pred_boxes:
        return 0.0
    hits = sum(iou_aabb(p, g) >= k for p, g in zip(pred_boxes, gt_boxes))
    return hits / len(pred_boxes)


def em_at_k(pred_answer_lists: list[list[str]], gt_answers: list[str], k: int) -> float:
    """Fraction of samples whose ground-truth answer is among the top-k predictions."""
    if len(pred_answer_lists) != len(gt_answers):
        raise ValueError("prediction/ground-truth count mismatch")
    if not gt_answers:
        return 0.0
    hits = sum(gt in preds[:k] for preds, gt in zip(pred_answer_lists, gt_answers))
    return hits / len(gt_answers)


def m_at_kiou(captions, gt_captions, pred_boxes, gt_boxes, k: float,
              metric: str = "bleu4") -> float:
    """Caption metric gated by the box-IoU indicator at threshold k."""
    fn = CAPTION_METRICS[metric]
    n = len(captions)
    if not (len(gt_captions) == len(pred_boxes) == len(gt_boxes) == n):
        raise ValueError("caption/box count mismatch")
    if n == 0:
        return 0.0
    total = sum(
        fn(c, g) if iou_aabb(pb, gb) >= k else 0.0
        for c, g, pb, gb in zip(captions, gt_captions, pred_boxes, gt_boxes)
    )
    return total / n
