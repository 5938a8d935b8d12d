"""Preliminary and subgraph GNN layers against literal scalar-loop formulas."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgap import autodiff as ad
from tgap import reference as ref
from tgap.data import TemporalKG
from tgap.gnn import EdgeBatch, attentive_layer, edge_time_index, pgnn_forward, query_context, sgnn_step
from tgap.model import ModelConfig, TGAP


def _layer_params(rng, d=4, heads=2, signs=3):
    dk = d // heads
    return ([rng.normal(size=(d, d)) for _ in range(signs)],
            [rng.normal(size=(d, dk)) for _ in range(heads)],
            [rng.normal(size=(dk, dk)) for _ in range(heads)])


def _run_layer(feat, edges, rel, tt, W, wq, wk, **kw):
    c = ad.constant
    return attentive_layer(c(feat), EdgeBatch(*(np.array(col, dtype=np.int64) for col in zip(*edges))),
                           c(rel), c(tt), [c(w) for w in W], [c(w) for w in wq], [c(w) for w in wk], **kw)


def _toy_graph():
    # 0 -r0-> 1 at day 0, 1 -r1-> 2 at day 3, 2 -r0-> 0 at day 5, 0 -r1-> 2 at day 3
    quads = np.array([[0, 0, 1, 0], [1, 1, 2, 1], [2, 0, 0, 2], [0, 1, 2, 1]])
    return TemporalKG(quads, 3, 2, np.array([0, 3, 5]))


def _toy_model(graph, **kw):
    cfg = ModelConfig(**{"dim": 4, "heads": 2, "steps": 2, **kw})
    m = TGAP(cfg, graph.num_entities, graph.num_raw_relations, graph.num_times, seed=1)
    m.params.astype(np.float64)
    return m


def test_single_incoming_edge_gets_full_attention(f64):
    rng = np.random.default_rng(0)
    W, wq, wk = _layer_params(rng)
    feat, rel, tt = rng.normal(size=(2, 4)), rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    out, has_in, att, _ = _run_layer(feat, [(0, 1, 0, 1, 0)], rel, tt, W, wq, wk, return_attention=True)
    np.testing.assert_array_equal(att.data, [[1.0, 1.0]])
    np.testing.assert_allclose(out.data[1], (feat[0] + rel[0] + tt[0]) @ W[1], atol=1e-14)
    assert has_in.tolist() == [False, True] and np.all(out.data[0] == 0)


def test_equal_logits_split_evenly(f64):
    rng = np.random.default_rng(1)
    W, wq, wk = _layer_params(rng)
    feat = rng.normal(size=(3, 4))
    feat[1] = feat[0]
    _, _, att, _ = _run_layer(feat, [(0, 2, 0, 2, 0), (1, 2, 0, 2, 0)], np.ones((1, 4)), np.ones((1, 4)),
                              W, wq, wk, return_attention=True)
    np.testing.assert_array_equal(att.data, np.full((2, 2), 0.5))


def test_zero_inputs_give_zero_messages(f64):
    rng = np.random.default_rng(2)
    W, wq, wk = _layer_params(rng)
    out, _ = _run_layer(np.zeros((3, 4)), [(0, 1, 0, 0, 0), (2, 1, 0, 2, 0)], np.zeros((1, 4)), np.zeros((1, 4)),
                        W, wq, wk)
    assert np.all(out.data == 0)


def test_present_edge_uses_present_weight(f64):
    rng = np.random.default_rng(3)
    W, wq, wk = _layer_params(rng)
    feat, rel, tt = rng.normal(size=(2, 4)), rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    base, _ = _run_layer(feat, [(0, 1, 0, 1, 0)], rel, tt, W, wq, wk)
    W2 = [W[0] + 1, W[1], W[2] - 1]
    same, _ = _run_layer(feat, [(0, 1, 0, 1, 0)], rel, tt, W2, wq, wk)
    np.testing.assert_array_equal(base.data, same.data)


def test_future_weight_does_not_touch_other_signs(f64):
    rng = np.random.default_rng(4)
    W, wq, wk = _layer_params(rng)
    feat, rel, tt = rng.normal(size=(5, 4)), rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    # node 3 hears only past/present edges, node 4 hears a future edge
    edges = [(0, 3, 0, 0, 1), (1, 3, 1, 1, 0), (2, 3, 0, 0, 2), (0, 4, 1, 2, 2)]
    before, _ = _run_layer(feat, edges, rel, tt, W, wq, wk)
    after, _ = _run_layer(feat, edges, rel, tt, [W[0], W[1], W[2] * 3.0], wq, wk)
    np.testing.assert_array_equal(before.data[3], after.data[3])
    assert not np.array_equal(before.data[4], after.data[4])


def test_three_node_layer_matches_dense_loop(f64):
    rng = np.random.default_rng(5)
    W, wq, wk = _layer_params(rng, d=6, heads=3)
    feat, rel, tt = rng.normal(size=(3, 6)), rng.normal(size=(3, 6)), rng.normal(size=(4, 6))
    edges = [(0, 1, 0, 0, 1), (2, 1, 1, 2, 3), (1, 2, 2, 1, 0), (0, 2, 1, 0, 2), (2, 2, 2, 1, 0)]
    fast, has_in, att, order = _run_layer(feat, edges, rel, tt, W, wq, wk, return_attention=True)
    slow, slow_att, slow_in = ref.attentive_layer(feat.tolist(), edges, rel.tolist(), tt.tolist(),
                                                  [w.tolist() for w in W], [w.tolist() for w in wq],
                                                  [w.tolist() for w in wk])
    np.testing.assert_allclose(fast.data, slow, atol=1e-12)
    np.testing.assert_allclose(att.data, np.array(slow_att)[order], atol=1e-12)
    assert has_in.tolist() == slow_in


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([(6, 1), (6, 2), (6, 3), (6, 6), (8, 4)]), st.integers(0, 10_000))
def test_attention_normalised_per_node_and_head(dk, seed):
    d, heads = dk
    prev = ad.get_dtype()
    ad.set_dtype(np.float64)
    try:
        rng = np.random.default_rng(seed)
        W, wq, wk = _layer_params(rng, d=d, heads=heads)
        n = 5
        edges = [(int(rng.integers(n)), int(rng.integers(n)), 0, int(rng.integers(3)), 0) for _ in range(12)]
        out, has_in, att, order = _run_layer(rng.normal(size=(n, d)), edges, rng.normal(size=(1, d)),
                                             rng.normal(size=(1, d)), W, wq, wk, return_attention=True)
    finally:
        ad.set_dtype(prev)
    assert out.shape == (n, d)
    dst = np.array([e[1] for e in edges])[order]
    for v in np.unique(dst):
        np.testing.assert_allclose(att.data[dst == v].sum(axis=0), np.ones(heads), atol=1e-12)


def test_pgnn_matches_scalar_reference(f64):
    g = _toy_graph()
    for layers in (1, 2):
        m = _toy_model(g, pgnn_layers=layers)
        for t in range(g.num_times):
            fast = pgnn_forward(m.params, g, t, layers=layers, heads=2, max_disp=m.max_disp).data
            slow = ref.pgnn(m.params, g, t, layers=layers, heads=2, max_disp=m.max_disp)
            np.testing.assert_allclose(fast, slow, atol=1e-12)


def test_zero_layers_return_embeddings(f64):
    g = _toy_graph()
    m = _toy_model(g, pgnn_layers=0)
    h = pgnn_forward(m.params, g, 0, layers=0, heads=2, max_disp=m.max_disp)
    np.testing.assert_array_equal(h.data, m.params["entity"].data)


def test_preliminary_features_depend_on_query_time(f64):
    g = _toy_graph()
    m = _toy_model(g)
    h0, h2 = (m.preliminary(g, t).data for t in (0, 2))
    assert not np.allclose(h0, h2)


def test_no_displacement_ignores_query_time(f64):
    g = _toy_graph()
    m = _toy_model(g, no_displacement=True)
    np.testing.assert_array_equal(m.preliminary(g, 0).data, m.preliminary(g, 2).data)
    sign, tau = edge_time_index(g, np.arange(g.num_edges), 1, m.max_disp, True)
    assert np.all(sign == 0) and tau[-1] == g.num_times       # self-loops use the extra row


def test_missing_self_loop_is_detected(f64):
    g = _toy_graph()
    m = _toy_model(g)
    keep = np.ones(g.num_edges, dtype=bool)
    keep[g.in_edges(1)] = False
    with pytest.raises(RuntimeError, match="incoming"):
        m.preliminary(g, 0, keep)


# ----------------------------------------------------------------- subgraph GNN


def test_query_context_zero_inputs(f64):
    g = _toy_graph()
    m = _toy_model(g)
    m.params["relation"].data[:] = 0
    q = query_context(m.params, ad.constant(np.zeros((1, 4))), np.array([1]))
    assert np.all(q.data == 0)


def test_query_context_matches_formula_and_tracks_relation(f64):
    g = _toy_graph()
    m = _toy_model(g)
    h = np.random.default_rng(0).normal(size=(1, 4))
    q = [query_context(m.params, ad.constant(h), np.array([r])).data[0] for r in (0, 1, 0)]
    np.testing.assert_allclose(q[0], ref.query_context(m.params, h[0], 0), atol=1e-14)
    np.testing.assert_array_equal(q[0], q[2])
    assert not np.array_equal(q[0], q[1])


def test_lone_member_takes_fallback_path(f64):
    g = _toy_graph()
    m = _toy_model(g)
    rng = np.random.default_rng(1)
    h, q = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    empty = EdgeBatch(*(np.empty(0, dtype=np.int64) for _ in range(5)))
    out = sgnn_step(m.params, ad.constant(h), empty, ad.constant(q), heads=2).data
    np.testing.assert_allclose(out, np.concatenate([h, q], axis=1) @ m.params["sgnn.W_g"].data, atol=1e-14)
    assert out.shape == (1, 4)


def test_three_edge_subgraph_matches_reference(f64):
    g = _toy_graph()
    m = _toy_model(g)
    rng = np.random.default_rng(2)
    feats, q = rng.normal(size=(3, 4)), rng.normal(size=4)
    chosen = np.array([0, 1, 3])
    sign, tau = edge_time_index(g, chosen, 1, m.max_disp, False)
    eb = EdgeBatch(g.src[chosen], g.dst[chosen], g.rel[chosen], sign, tau)
    fast = sgnn_step(m.params, ad.constant(feats), eb, ad.constant(np.tile(q, (3, 1))), heads=2).data
    edges = [(int(g.src[e]), int(g.dst[e]), int(g.rel[e]), int(s), int(t)) for e, s, t in zip(chosen, sign, tau)]
    slow = ref.sgnn_step(m.params, feats, edges, q, heads=2)
    np.testing.assert_allclose(fast, slow, atol=1e-12)
    # node 0 has no incoming subgraph edge: its intermediate feature is its own row
    np.testing.assert_allclose(fast[0], np.concatenate([feats[0], q]) @ m.params["sgnn.W_g"].data, atol=1e-12)


def test_subgraph_and_preliminary_weights_are_separate():
    g = _toy_graph()
    m = _toy_model(g)
    pg = {k for k in m.params.names() if k.startswith("pgnn.")}
    sg = {k for k in m.params.names() if k.startswith("sgnn.")}
    assert pg and sg
    for a in pg:
        for b in sg:
            assert not np.shares_memory(m.params[a].data, m.params[b].data)
