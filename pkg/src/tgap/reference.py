"""Slow scalar-loop reference of the encoder and flow equations.

Written independently of the vectorised code paths: explicit loops, Python
floats, literal formulas (no key/query folding, no sign-sorted batching).
Meant for graphs with a handful of nodes; used as an oracle by the test
suite and ``tgap selftest``. Weight matrices use the same right-multiplied
storage as the model parameters.
"""
from __future__ import annotations

import math

import numpy as np

from .data import NO_TIME, TemporalKG


def _vecmat(x, W):
    rows, cols = len(W), len(W[0])
    return [sum(x[a] * W[a][c] for a in range(rows)) for c in range(cols)]


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def _add(*vs):
    return [sum(parts) for parts in zip(*vs)]


def _leaky(x, slope=0.01):
    return x if x > 0 else slope * x


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def _softmax(xs):
    m = max(xs)
    ex = [math.exp(x - m) for x in xs]
    s = sum(ex)
    return [e / s for e in ex]


def edge_sign_tau(graph: TemporalKG, e: int, query_time: int, max_disp: int, no_displacement=False):
    """Per-edge (sign, time row) straight from the displacement definition."""
    t_e = int(graph.time[e])
    if no_displacement:
        return 0, (graph.num_times if t_e == NO_TIME else t_e)
    if t_e == NO_TIME:
        return 1, 0
    delta = int(graph.time_values[t_e]) - int(graph.time_values[query_time])
    sign = 0 if delta < 0 else (1 if delta == 0 else 2)
    return sign, min(abs(delta), max_disp)


def message(h_i, rho, tau, W):
    return _vecmat(_add(h_i, rho, tau), W)


def attentive_layer(feat, edges, rel_table, time_table, weights, w_q, w_k):
    """``edges``: list of (src_row, dst_row, rel, sign, tau_row).

    Returns (new features, attention per edge and head, incoming mask).
    """
    n = len(feat)
    d = len(feat[0])
    K = len(w_q)
    dk = d // K
    msgs = [message(feat[i], rel_table[r], time_table[tau], weights[s]) for i, _, r, s, tau in edges]
    out = [[0.0] * d for _ in range(n)]
    att = [[0.0] * K for _ in edges]
    incoming = [[] for _ in range(n)]
    for e, (_, j, _, _, _) in enumerate(edges):
        incoming[j].append(e)
    for j in range(n):
        if not incoming[j]:
            continue
        for k in range(K):
            q = _vecmat(feat[j], w_q[k])
            logits = []
            for e in incoming[j]:
                key = _vecmat(msgs[e][k * dk:(k + 1) * dk], w_k[k])
                logits.append(_leaky(_dot(q, key)))
            a = _softmax(logits)
            for e, a_e in zip(incoming[j], a):
                att[e][k] = a_e
                for c in range(dk):
                    out[j][k * dk + c] += a_e * msgs[e][k * dk + c]
    return out, att, [bool(x) for x in incoming]


def _np(params):
    return {k: (p.data if hasattr(p, "data") else p).tolist() for k, p in params.items()}


def layer_weights(P, prefix, heads, no_displacement=False):
    names = ["shared"] if no_displacement else ["past", "present", "future"]
    return ([P[f"{prefix}.W_{s}"] for s in names], [P[f"{prefix}.W_Q.{k}"] for k in range(heads)],
            [P[f"{prefix}.W_K.{k}"] for k in range(heads)])


def pgnn(params, graph: TemporalKG, query_time, *, layers, heads, max_disp, no_displacement=False):
    P = _np(params)
    tt = P["timestamp" if no_displacement else "displacement"]
    edges = [(int(graph.src[e]), int(graph.dst[e]), int(graph.rel[e]),
              *edge_sign_tau(graph, e, query_time, max_disp, no_displacement)) for e in range(graph.num_edges)]
    h = P["entity"]
    for l in range(layers):
        h, _, _ = attentive_layer(h, edges, P["relation"], tt, *layer_weights(P, f"pgnn.{l}", heads, no_displacement))
    return np.array(h)


def query_context(params, h_query, rel_query, no_displacement=False):
    P = _np(params)
    W = P["sgnn.W_shared" if no_displacement else "sgnn.W_present"]
    x = _vecmat(_add(list(h_query), P["relation"][rel_query]), W)
    return np.array(_vecmat([_leaky(v) for v in x], P["sgnn.W_c"]))


def sgnn_step(params, g, edges, q, *, heads, no_displacement=False):
    """``g``: member rows; ``edges`` in member-row space; ``q`` one context vector."""
    P = _np(params)
    tt = P["timestamp" if no_displacement else "displacement"]
    g = [list(r) for r in g]
    agg, _, has_in = attentive_layer(g, edges, P["relation"], tt, *layer_weights(P, "sgnn", heads, no_displacement))
    q = list(q)
    out = []
    for j in range(len(g)):
        inter = agg[j] if has_in[j] else g[j]
        out.append(_vecmat(inter + q, P["sgnn.W_g"]))
    return np.array(out)


def score(params, i, j, r, tau):
    P = _np(params)
    return _sigmoid(_dot(_vecmat(list(i), P["flow.W_Q"]), _vecmat(_add(list(j), list(r), list(tau)), P["flow.W_K"])))


def transition(params, candidates, g_of, h_of, rel_of, tau_of):
    """Transition probability per candidate edge ``(i, j, e)``.

    ``g_of(node)`` returns the subgraph feature (zeros for non-members).
    """
    logits = {}
    for i, j, e in candidates:
        logits[(i, j, e)] = (score(params, g_of(i), g_of(j), rel_of(e), tau_of(e))
                             + score(params, g_of(i), h_of(j), rel_of(e), tau_of(e)))
    probs = {}
    for src in {c[0] for c in candidates}:
        group = [c for c in candidates if c[0] == src]
        for c, p in zip(group, _softmax([logits[c] for c in group])):
            probs[c] = p
    return probs


def propagate_dense(node_att: dict, probs: dict, num_nodes: int):
    """a' = a^T T with T the dense (multi-edge summed) transition matrix."""
    Tm = [[0.0] * num_nodes for _ in range(num_nodes)]
    for (i, j, _), p in probs.items():
        Tm[i][j] += p
    a = [node_att.get(v, 0.0) for v in range(num_nodes)]
    new = [sum(a[i] * Tm[i][j] for i in range(num_nodes)) for j in range(num_nodes)]
    edge_att = {c: p * a[c[0]] for c, p in probs.items()}
    return new, edge_att


def forward(model, graph: TemporalKG, query):
    """Full decode of one query when sampling keeps everything.

    Valid only if every out-degree <= y and z covers all new candidates, so
    the sampler is deterministic; returns the final dense node attention.
    """
    cfg = model.cfg
    P = model.params
    head, rel_q, _, t_q = (int(x) for x in query)
    V = graph.num_entities
    md = model.max_disp
    nd = cfg.no_displacement
    h = (np.array(P["entity"].data) if cfg.no_pgnn else
         pgnn(P, graph, t_q, layers=cfg.pgnn_layers, heads=cfg.heads, max_disp=md, no_displacement=nd))
    q = query_context(P, h[head], rel_q, nd)
    tt = P["timestamp" if nd else "displacement"].data
    rel_t = P["relation"].data
    members = [head]
    sub_edges = []
    g = sgnn_step(P, [h[head]], [], q, heads=cfg.heads, no_displacement=nd)
    att = {head: 1.0}
    for t in range(1, cfg.steps + 1):
        frontier = sorted(v for v, a in att.items() if a > 0)
        cand = set()
        for v in frontier:
            for e in graph.out_edges(v).tolist():
                cand.add(e)           # all non-loop edges sampled + the self-loop
        cands = [(int(graph.src[e]), int(graph.dst[e]), e) for e in sorted(cand)]

        def g_of(v):
            return g[members.index(v)] if v in members else np.zeros(cfg.dim)

        def tau_of(e):
            return tt[edge_sign_tau(graph, e, t_q, md, nd)[1]]

        probs = transition(P, cands, g_of, lambda v: h[v], lambda e: rel_t[graph.rel[e]], tau_of)
        new, edge_att = propagate_dense(att, probs, V)
        att = {v: a for v, a in enumerate(new) if a > 0}
        for (i, j, e) in cands:
            if graph.is_self_loop[e] or e in sub_edges:
                continue
            sub_edges.append(e)
            for v in (i, j):
                if v not in members:
                    members.append(v)
                    g = np.vstack([g, h[v][None, :]])
        if t < cfg.steps:
            idx = {v: k for k, v in enumerate(members)}
            edges = [(idx[int(graph.src[e])], idx[int(graph.dst[e])], int(graph.rel[e]),
                      *edge_sign_tau(graph, e, t_q, md, nd)) for e in sub_edges]
            g = sgnn_step(P, g, edges, q, heads=cfg.heads, no_displacement=nd)
    return np.array([att.get(v, 0.0) for v in range(V)])
