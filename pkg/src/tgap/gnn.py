"""Displacement-aware attentive message passing.

The preliminary GNN runs over the whole graph once per query timestamp;
the subgraph GNN reuses the same layer on the sampled subgraph, with its
own weights, and mixes in a query context vector.

All weight matrices are stored for right-multiplication (``x @ W``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import TemporalKG

SIGN_NAMES = ("past", "present", "future")


@dataclass
class EdgeBatch:
    """Edges feeding an attentive layer.

    ``src``/``dst`` index rows of the node-feature matrix; ``sign`` selects
    the weight (always 0 when displacement is disabled) and ``tau`` the row
    of the time table.
    """
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray
    sign: np.ndarray
    tau: np.ndarray

    def __len__(self):
        return len(self.src)


def edge_time_index(graph: TemporalKG, edges, query_time: int, max_disp: int, no_displacement: bool):
    """(sign, time-table row) per edge for one query timestamp."""
    if no_displacement:
        et = graph.time[edges]
        tau = np.where(et < 0, graph.num_times, et)
        return np.zeros(len(edges), dtype=np.int64), tau
    return graph.displacement(edges, query_time, max_disp)


def sign_weights(params, prefix: str, no_displacement: bool):
    if no_displacement:
        return [params[f"{prefix}.W_shared"]]
    return [params[f"{prefix}.W_{s}"] for s in SIGN_NAMES]


def init_layer(params, prefix: str, d: int, heads: int, no_displacement: bool, rng):
    dk = d // heads
    names = ["shared"] if no_displacement else SIGN_NAMES
    for s in names:
        params.xavier(f"{prefix}.W_{s}", (d, d), rng)
    for k in range(heads):
        params.xavier(f"{prefix}.W_Q.{k}", (d, dk), rng)
        params.xavier(f"{prefix}.W_K.{k}", (dk, dk), rng)


def attentive_layer(feat: Tensor, edges: EdgeBatch, rel_table: Tensor, time_table: Tensor,
                    weights, w_q, w_k, return_attention=False):
    """One round of multi-head attentive aggregation over ``edges``.

    Returns the (n, d) aggregate, a boolean mask of rows that received at
    least one message, and optionally the (E, K) attention in the layer's
    internal edge order together with that order.
    """
    n, d = feat.shape
    heads = len(w_q)
    dk = d // heads
    order = np.argsort(edges.sign, kind="stable")
    has_in = np.zeros(n, dtype=bool)
    if len(edges) == 0:
        zero = ad.constant(np.zeros((n, d), dtype=feat.data.dtype))
        return (zero, has_in, None, order) if return_attention else (zero, has_in)
    has_in[edges.dst] = True
    parts = []
    sign_sorted = edges.sign[order]
    for s, w in enumerate(weights):
        idx = order[sign_sorted == s]
        if len(idx) == 0:
            continue
        x = (ad.gather_rows(feat, edges.src[idx]) + ad.gather_rows(rel_table, edges.rel[idx])
             + ad.gather_rows(time_table, edges.tau[idx]))
        parts.append(x @ w)
    msg = parts[0] if len(parts) == 1 else ad.concat_rows(parts)
    dst = edges.dst[order]
    E = len(dst)
    # (h_j W_Q) . (m W_K) == (h_j W_Q W_K^T) . m, computed once per node
    z = ad.concat_cols([(feat @ w_q[k]) @ w_k[k].T for k in range(heads)])
    logits = (ad.gather_rows(z, dst) * msg).reshape(E, heads, dk).sum(axis=2)
    att = ad.segment_softmax(ad.leaky_relu(logits), dst, n)
    weighted = (att.reshape(E, heads, 1) * msg.reshape(E, heads, dk)).reshape(E, d)
    out = ad.segment_sum(weighted, dst, n)
    if return_attention:
        return out, has_in, att, order
    return out, has_in


def pgnn_edges(graph: TemporalKG, query_time: int, max_disp: int, no_displacement: bool,
               keep: np.ndarray | None = None) -> EdgeBatch:
    edges = np.arange(graph.num_edges) if keep is None else np.flatnonzero(keep)
    sign, tau = edge_time_index(graph, edges, query_time, max_disp, no_displacement)
    return EdgeBatch(graph.src[edges], graph.dst[edges], graph.rel[edges], sign, tau)


def pgnn_forward(params, graph: TemporalKG, query_time: int, *, layers: int, heads: int, max_disp: int,
                 no_displacement=False, keep=None) -> Tensor:
    """Preliminary node features for every entity at one query timestamp."""
    h = params["entity"]
    if layers == 0:
        return h
    edges = pgnn_edges(graph, query_time, max_disp, no_displacement, keep)
    rel, tt = params["relation"], time_table(params, no_displacement)
    for l in range(layers):
        p = f"pgnn.{l}"
        h, has_in = attentive_layer(h, edges, rel, tt, sign_weights(params, p, no_displacement),
                                    [params[f"{p}.W_Q.{k}"] for k in range(heads)],
                                    [params[f"{p}.W_K.{k}"] for k in range(heads)])
        if not has_in.all():
            raise RuntimeError("entity without incoming edges in the full graph (self-loop missing)")
    return h


def time_table(params, no_displacement: bool) -> Tensor:
    return params["timestamp"] if no_displacement else params["displacement"]


def query_context(params, h_query: Tensor, rel_query, no_displacement=False) -> Tensor:
    """Query vector from the head's preliminary feature and the query relation."""
    w = params["sgnn.W_shared" if no_displacement else "sgnn.W_present"]
    x = h_query + ad.gather_rows(params["relation"], rel_query)
    return ad.leaky_relu(x @ w) @ params["sgnn.W_c"]


def sgnn_step(params, g: Tensor, edges: EdgeBatch, q_rows: Tensor, *, heads: int, no_displacement=False
              ) -> Tensor:
    """Update member features of the subgraph.

    ``g`` holds one row per member (new members already initialised from
    their preliminary features) and ``q_rows`` the query context of the
    query each row belongs to. Members without incoming subgraph edges keep
    their current feature as the intermediate value.
    """
    agg, has_in = attentive_layer(
        g, edges, params["relation"], time_table(params, no_displacement),
        sign_weights(params, "sgnn", no_displacement),
        [params[f"sgnn.W_Q.{k}"] for k in range(heads)],
        [params[f"sgnn.W_K.{k}"] for k in range(heads)])
    if not has_in.all():
        keep_mask = ad.constant((~has_in).astype(g.data.dtype).reshape(-1, 1))
        agg = agg + g * keep_mask
    return ad.concat_cols([agg, q_rows]) @ params["sgnn.W_g"]
