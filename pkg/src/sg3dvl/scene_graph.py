"""Directed kNN scene graph over proposals with triplet message passing."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .proposals import ProposalSet


@dataclass
class SceneGraphState:
    node_feats: torch.Tensor    # (M, C) or (B*M, C) for batched disjoint graphs
    edge_index: torch.Tensor    # (E, 2) long, rows (subject i, object j)
    edge_feats: torch.Tensor    # (E, C)


def knn_edges(centers: np.ndarray, n1: int) -> np.ndarray:
    """Directed edges i -> j for the n1 nearest neighbors j of each i.

    Distance is Euclidean between box centers; ties break toward the lower
    index (stable sort). n1 >= M is clamped to M - 1 with a warning.
    """
    m = centers.shape[0]
    if m < 2:
        raise ValueError("graph needs at least 2 nodes")
    if n1 >= m:
        warnings.warn(f"n1={n1} >= M={m}; clamping to {m - 1}")
        n1 = m - 1
    d = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    edges = [(i, int(j)) for i in range(m) for j in order[i, :n1]]
    return np.array(edges, dtype=np.int64)


def edge_geometry(boxes, edge_index: np.ndarray) -> torch.Tensor:
    """Relative geometry per edge: center offset, distance, size ratio, log-volume ratio."""
    centers = np.stack([np.asarray(b.center) for b in boxes])
    sizes = np.stack([np.asarray(b.size) for b in boxes])
    i, j = edge_index[:, 0], edge_index[:, 1]
    offset = centers[j] - centers[i]
    dist = np.linalg.norm(offset, axis=-1, keepdims=True)
    size_ratio = sizes[j] / sizes[i]
    logvol = np.log(sizes[j].prod(-1) / sizes[i].prod(-1))[:, None]
    geo = np.concatenate([offset, dist, size_ratio, logvol], axis=-1)
    return torch.tensor(geo, dtype=torch.get_default_dtype())


class EdgeInit(nn.Module):
    """Initial edge features from the 8-dim relative-geometry vector."""

    def __init__(self, feat_dim: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(8, feat_dim), nn.ReLU(), nn.Linear(feat_dim, feat_dim)
        )

    def forward(self, geo: torch.Tensor) -> torch.Tensor:
        return self.net(geo)


def build_graph(pset: ProposalSet, node_feats: torch.Tensor, n1: int,
                edge_init: EdgeInit) -> SceneGraphState:
    boxes = [p.box for p in pset.proposals]
    centers = np.stack([np.asarray(b.center) for b in boxes])
    edges = knn_edges(centers, n1)
    edge_feats = edge_init(edge_geometry(boxes, edges).to(node_feats.dtype))
    return SceneGraphState(node_feats, torch.tensor(edges), edge_feats)


class GraphLayer(nn.Module):
    """One triplet message-passing layer.

    g1 maps each concatenated triplet (subject, edge, object) to
    (subject message, updated edge feature, object message); in edge_conv
    mode the node-feature difference is appended to g1's input. Messages
    incident to a node are mean-aggregated, passed through g2, and added
    residually.
    """

    def __init__(self, feat_dim: int = 256, mode: str = "gcn"):
        super().__init__()
        if mode not in ("gcn", "edge_conv"):
            raise ValueError(f"unknown graph layer mode {mode!r}")
        self.mode = mode
        self.feat_dim = feat_dim
        in_dim = 4 * feat_dim if mode == "edge_conv" else 3 * feat_dim
        self.g1 = nn.Sequential(
            nn.Linear(in_dim, 3 * feat_dim), nn.ReLU(),
            nn.Linear(3 * feat_dim, 3 * feat_dim),
        )
        self.g2 = nn.Sequential(
            nn.Linear(feat_dim, feat_dim), nn.ReLU(),
            nn.Linear(feat_dim, feat_dim),
        )

    def forward(self, state: SceneGraphState) -> SceneGraphState:
        phi_n, edges, phi_e = state.node_feats, state.edge_index, state.edge_feats
        c = self.feat_dim
        i, j = edges[:, 0], edges[:, 1]
        triplet = [phi_n[i], phi_e, phi_n[j]]
        if self.mode == "edge_conv":
            triplet.append(phi_n[j] - phi_n[i])
        out = self.g1(torch.cat(triplet, dim=-1))
        psi_subj, new_edge, psi_obj = out[:, :c], out[:, c:2 * c], out[:, 2 * c:]

        acc = torch.zeros_like(phi_n)
        acc = acc.index_add(0, i, psi_subj).index_add(0, j, psi_obj)
        count = torch.zeros(phi_n.shape[0], dtype=phi_n.dtype, device=phi_n.device)
        ones = torch.ones(edges.shape[0], dtype=phi_n.dtype, device=phi_n.device)
        count = count.index_add(0, i, ones).index_add(0, j, ones)
        if (count == 0).any():
            raise ValueError("isolated node in scene graph")
        new_nodes = phi_n + self.g2(acc / count.unsqueeze(-1))
        return SceneGraphState(new_nodes, edges, new_edge)


class SceneGraphNet(nn.Module):
    """Edge initializer plus a stack of message-passing layers (default 3)."""

    def __init__(self, feat_dim: int = 256, n_layers: int = 3, mode: str = "gcn"):
        super().__init__()
        if not 1 <= n_layers <= 4:
            raise ValueError("n_layers must be in 1..4")
        self.edge_init = EdgeInit(feat_dim)
        self.layers = nn.ModuleList(GraphLayer(feat_dim, mode) for _ in range(n_layers))

    def forward(self, state: SceneGraphState) -> SceneGraphState:
        for layer in self.layers:
            state = layer(state)
        return state


def graph_pool(node_feats: torch.Tensor, objectness_mask: torch.Tensor) -> torch.Tensor:
    """Mean of node features over proposals flagged as objects."""
    mask = objectness_mask.bool()
    if not mask.any():
        raise ValueError("graph_pool requires at least one unmasked node")
    return node_feats[mask].mean(dim=0)
