"""Attention flow: transition probabilities, propagation, and the answer loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOSS_EPS = 1e-20


@dataclass
class AttentionState:
    """Node and edge attention of one query after ``step`` propagations."""
    nodes: np.ndarray
    values: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    edge_values: np.ndarray = field(default_factory=lambda: np.empty(0))
    step: int = 0

    def get(self, node: int) -> float:
        i = np.searchsorted(self.nodes, node)
        if i < len(self.nodes) and self.nodes[i] == node:
            return float(self.values[i])
        return 0.0

    def dense(self, num_entities: int) -> np.ndarray:
        out = np.zeros(num_entities)
        out[self.nodes] = self.values
        return out


def init_attention(head: int) -> AttentionState:
    return AttentionState(np.array([head], dtype=np.int64), np.ones(1))


def score(params, i: Tensor, j: Tensor, r: Tensor, tau: Tensor) -> Tensor:
    """sigmoid((i W_Q) . ((j + r + tau) W_K)), row-wise."""
    q = i @ params["flow.W_Q"]
    k = (j + r + tau) @ params["flow.W_K"]
    return ad.sigmoid((q * k).sum(axis=1))


def transition_logits(params, q_src: Tensor, g_dst: Tensor, h_dst: Tensor, rel_tau: Tensor) -> Tensor:
    """Sum of the subgraph term and the exploring term per candidate edge.

    ``q_src`` is the source feature already mapped through ``W_Q W_K^T`` so
    both terms reduce to row-wise dot products.
    """
    t1 = ad.sigmoid((q_src * (g_dst + rel_tau)).sum(axis=1))
    t2 = ad.sigmoid((q_src * (h_dst + rel_tau)).sum(axis=1))
    return t1 + t2


def transition_probabilities(logits: Tensor, src_seg, num_src: int) -> Tensor:
    """Softmax over the candidates leaving each source node."""
    return ad.segment_softmax(logits, src_seg, num_src)


def propagate(node_att: Tensor, probs: Tensor, src_seg, dst_seg, num_dst: int):
    """edge_att = T * a[src]; new node attention = sum of edge_att per target."""
    edge_att = probs * ad.gather_rows(node_att, src_seg)
    return ad.segment_sum(edge_att, dst_seg, num_dst), edge_att


def answer_loss(node_att: Tensor, answer_slots: np.ndarray) -> Tensor:
    """Mean of -log(a[answer] + eps); slot -1 marks an unreached answer."""
    answer_slots = np.asarray(answer_slots, dtype=np.int64)
    reached = answer_slots >= 0
    n = len(answer_slots)
    const = float((~reached).sum()) * -np.log(LOSS_EPS)
    if reached.any():
        picked = ad.gather_rows(node_att, answer_slots[reached])
        total = ad.scale(ad.log(picked + LOSS_EPS).sum(), -1.0) + const
    else:
        total = ad.constant(np.asarray(const))
    return ad.scale(total, 1.0 / n)
