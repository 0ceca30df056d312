"""Ground-truth-anchored object proposals, their encoder, and the detection loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Aabb, iou_aabb, box_position_vector
from .scene_synth import CATEGORIES, GeneratorConfig, SyntheticScene

DESCRIPTOR_DIM = 31  # center 3 + size 3 + corners 24 + volume 1
BACKGROUND_ID = len(CATEGORIES)
OBJECTNESS_IOU = 0.25


@dataclass(frozen=True)
class JitterConfig:
    center_m: float = 0.15
    size_frac: float = 0.10


@dataclass
class Proposal:
    box: Aabb
    objectness_target: int
    semantic_target: int
    matched_gt_id: int | None
    iou_with_match: float

    def descriptor(self) -> np.ndarray:
        return np.concatenate([box_position_vector(self.box), np.asarray(self.box.size),
                               [self.box.volume()]])


@dataclass
class ProposalSet:
    proposals: list[Proposal]

    def __len__(self) -> int:
        return len(self.proposals)

    def descriptors(self) -> torch.Tensor:
        return torch.tensor(np.stack([p.descriptor() for p in self.proposals]),
                            dtype=torch.get_default_dtype())

    def objectness_targets(self) -> torch.Tensor:
        return torch.tensor([p.objectness_target for p in self.proposals], dtype=torch.long)

    def semantic_targets(self) -> torch.Tensor:
        return torch.tensor([p.semantic_target for p in self.proposals], dtype=torch.long)

    def matched_mask(self) -> torch.Tensor:
        return torch.tensor([p.matched_gt_id is not None and p.objectness_target == 1
                             for p in self.proposals], dtype=torch.bool)

    def box_residual_targets(self, scene: SyntheticScene) -> torch.Tensor:
        """(gt_center - center, gt_size - size) per proposal; zeros where unmatched."""
        by_id = {o.id: o for o in scene.objects}
        out = torch.zeros(len(self.proposals), 6, dtype=torch.get_default_dtype())
        for i, p in enumerate(self.proposals):
            if p.matched_gt_id is not None and p.objectness_target == 1:
                gt = by_id[p.matched_gt_id].box
                out[i, :3] = torch.tensor(gt.center) - torch.tensor(p.box.center)
                out[i, 3:] = torch.tensor(gt.size) - torch.tensor(p.box.size)
        return out


def _match(box: Aabb, scene: SyntheticScene) -> tuple[int | None, float]:
    best_id, best_iou = None, 0.0
    for obj in scene.objects:
        iou = iou_aabb(box, obj.box)
        if iou > best_iou:
            best_id, best_iou = obj.id, iou
    return best_id, best_iou


def _make_proposal(box: Aabb, scene: SyntheticScene) -> Proposal:
    gt_id, iou = _match(box, scene)
    positive = iou >= OBJECTNESS_IOU
    by_id = {o.id: o for o in scene.objects}
    semantic = CATEGORIES.index(by_id[gt_id].category) if positive else BACKGROUND_ID
    return Proposal(box, int(positive), semantic, gt_id if gt_id is not None else None, iou)


def propose(scene: SyntheticScene, m: int, jitter: JitterConfig,
            rng: np.random.Generator, gen_config: GeneratorConfig | None = None) -> ProposalSet:
    """One jittered proposal per ground-truth object plus random background boxes."""
    if m < len(scene.objects):
        raise ValueError(f"m={m} < object count {len(scene.objects)}")
    gen_config = gen_config or GeneratorConfig()
    props = []
    for obj in scene.objects:
        center = np.asarray(obj.box.center) + rng.uniform(-jitter.center_m, jitter.center_m, 3)
        size = np.asarray(obj.box.size) * (1 + rng.uniform(-jitter.size_frac, jitter.size_frac, 3))
        box = Aabb(tuple(float(v) for v in center), tuple(float(v) for v in size))
        props.append(_make_proposal(box, scene))
    half = gen_config.room_xy / 2
    while len(props) < m:
        size = rng.uniform(gen_config.size_min, gen_config.size_max, 3)
        center = np.array([rng.uniform(-half, half), rng.uniform(-half, half),
                           rng.uniform(0, gen_config.room_z)])
        box = Aabb(tuple(float(v) for v in center), tuple(float(v) for v in size))
        props.append(_make_proposal(box, scene))
    return ProposalSet(props)


class ProposalEncoder(nn.Module):
    """Per-proposal feed-forward encoder over the geometry descriptor.

    A shared learned embedding is added so features are not a pure function
    of geometry scale at init.
    """

    def __init__(self, feat_dim: int = 256, hidden_dim: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(DESCRIPTOR_DIM, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, feat_dim),
        )
        self.base_embedding = nn.Parameter(torch.zeros(feat_dim))

    def forward(self, descriptors: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(descriptors).all():
            raise ValueError("non-finite proposal descriptor")
        return self.net(descriptors) + self.base_embedding


class DetectionHeads(nn.Module):
    """Objectness (2-way), box residual (6), and semantic logits per proposal."""

    def __init__(self, feat_dim: int = 256, n_categories: int = len(CATEGORIES)):
        super().__init__()
        self.objectness = nn.Linear(feat_dim, 2)
        self.box = nn.Linear(feat_dim, 6)
        self.semantic = nn.Linear(feat_dim, n_categories + 1)

    def forward(self, feats: torch.Tensor) -> dict[str, torch.Tensor]:
        return {
            "objectness_logits": self.objectness(feats),
            "box_residuals": self.box(feats),
            "semantic_logits": self.semantic(feats),
        }


def detection_loss(predictions: dict[str, torch.Tensor],
                   objectness_targets: torch.Tensor,
                   box_residual_targets: torch.Tensor,
                   semantic_targets: torch.Tensor,
                   matched_mask: torch.Tensor) -> torch.Tensor:
    """L_obj (all proposals) + L_box and L_sem (matched proposals only)."""
    obj_logits = predictions["objectness_logits"]
    box_pred = predictions["box_residuals"]
    sem_logits = predictions["semantic_logits"]
    m = objectness_targets.shape[0]
    if obj_logits.shape[0] != m or box_pred.shape != box_residual_targets.shape \
            or sem_logits.shape[0] != m:
        raise ValueError("prediction/target shape mismatch")
    l_obj = F.cross_entropy(obj_logits, objectness_targets)
    if matched_mask.any():
        l_box = (box_pred[matched_mask] - box_residual_targets[matched_mask]).abs().mean()
        l_sem = F.cross_entropy(sem_logits[matched_mask], semantic_targets[matched_mask])
    else:
        l_box = box_pred.sum() * 0.0
        l_sem = sem_logits.sum() * 0.0
    return l_obj + l_box + l_sem
