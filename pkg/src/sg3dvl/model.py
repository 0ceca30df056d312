"""Full pre-training/fine-tuning model: encoders, scene graph, heads."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .downstream import ANSWER_SPACE, CaptionDecoder, GroundingHead, QaHead
from .fusion import CrossAttentionStack
from .masked_modality import MlmHead, MomHead
from .proposals import DetectionHeads, ProposalEncoder
from .scene_graph import SceneGraphNet, SceneGraphState
from .scene_synth import CATEGORIES
from .text_encoder import TextEncoder


@dataclass
class ModelConfig:
    vocab_size: int = 40
    feat_dim: int = 256
    embed_dim: int = 300
    m_proposals: int = 12
    n1_neighbors: int = 8
    n_graph_layers: int = 3
    graph_layer_mode: str = "edge_conv"
    n_fusion_layers: int = 2
    n_heads: int = 4
    tau: float = 0.07
    soft_wo_targets: bool = False
    word_mask_ratio: float = 0.2
    object_mask_ratio: float = 0.75


class FullModel(nn.Module):
    """Everything needed for pre-training and all three downstream tasks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.feat_dim
        n_classes = len(CATEGORIES) + 1  # + background
        self.proposal_encoder = ProposalEncoder(c)
        self.detection_heads = DetectionHeads(c, len(CATEGORIES))
        self.text_encoder = TextEncoder(cfg.vocab_size, cfg.embed_dim, c)
        self.graph_net = SceneGraphNet(c, cfg.n_graph_layers, cfg.graph_layer_mode)
        self.mlm_head = MlmHead(c, cfg.vocab_size, cfg.n_heads)
        self.mom_head = MomHead(c, n_classes, cfg.n_heads)
        self.fusion = CrossAttentionStack(c, cfg.n_fusion_layers, cfg.n_heads)
        self.grounding_head = GroundingHead(c)
        self.caption_decoder = CaptionDecoder(cfg.vocab_size, c)
        self.qa_head = QaHead(c, len(ANSWER_SPACE))
        self.lang_classifier = nn.Linear(c, len(CATEGORIES))

    def run_graph(self, f_o: torch.Tensor, edge_index: torch.Tensor,
                  edge_geo: torch.Tensor) -> torch.Tensor:
        """Batched graph pass over disjoint per-scene graphs.

        f_o is (B, M, C); edge_index holds already-offset flat node indices.
        Returns post-graph node features (B, M, C).
        """
        b, m, c = f_o.shape
        edge_feats = self.graph_net.edge_init(edge_geo.to(f_o.dtype))
        state = SceneGraphState(f_o.reshape(b * m, c), edge_index, edge_feats)
        for layer in self.graph_net.layers:
            state = layer(state)
        return state.node_feats.reshape(b, m, c)
