import numpy as np
import pytest

from tgap import autodiff as ad
from tgap import reference as ref
from tgap.data import TemporalKG
from tgap.model import ModelConfig, TGAP, conservation_tolerance
from tgap.synthetic import random_bundle


def _model(bundle, seed=0, **kw):
    cfg = ModelConfig(**{"dim": 6, "heads": 2, "steps": 3, "max_core_nodes": 3, "edges_per_core": 4,
                         "edges_per_step": 3, **kw})
    m = TGAP(cfg, bundle.num_entities, bundle.num_raw_relations, bundle.num_times, seed=seed)
    m.params.astype(ad.get_dtype())
    return m


@pytest.fixture
def bundle():
    return random_bundle(num_entities=14, num_edges=45, num_relations=3, num_days=6, num_eval=5, seed=2)


def _hops(graph, head, T):
    seen, frontier = {head}, {head}
    for _ in range(T):
        frontier = {int(graph.dst[e]) for v in frontier for e in graph.out_edges(v)} - seen
        seen |= frontier
    return seen


def test_config_validation():
    with pytest.raises(ValueError, match="divide"):
        ModelConfig(dim=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(steps=0)
    assert ModelConfig().steps == 3 and ModelConfig().pgnn_layers == 1


def test_tracing_does_not_change_results(f64, bundle):
    m = _model(bundle)
    q = bundle.split("test")
    a = m.forward(bundle.graph, q, seed=4)
    b = m.forward(bundle.graph, q, seed=4, trace=True)
    assert float(a.loss.data) == float(b.loss.data)
    for sa, sb in zip(a.states, b.states):
        np.testing.assert_array_equal(sa.nodes, sb.nodes)
        np.testing.assert_array_equal(sa.values, sb.values)


def test_forward_is_deterministic(bundle):
    m = _model(bundle)
    q = bundle.split("test")
    runs = [m.forward(bundle.graph, q, seed=1) for _ in range(2)]
    assert runs[0].signature == runs[1].signature
    assert runs[0].loss.data.tobytes() == runs[1].loss.data.tobytes()


def test_single_step_stays_within_one_hop(f64):
    quads = np.array([[0, 0, v, 0] for v in range(1, 5)] + [[1, 0, 5, 0], [5, 0, 6, 0]])
    g = TemporalKG(quads, 7, 1, np.array([0]))
    cfg = ModelConfig(dim=4, heads=2, steps=1, max_core_nodes=5, edges_per_core=10, edges_per_step=10)
    m = TGAP(cfg, 7, 1, 1)
    m.params.astype(np.float64)
    state = m.forward(g, np.array([[0, 0, 1, 0]]), with_loss=False).states[0]
    assert set(state.nodes.tolist()) <= {0, 1, 2, 3, 4}


@pytest.mark.parametrize("steps", [1, 2, 3, 4])
def test_support_bounded_by_path_length(f64, bundle, steps):
    m = _model(bundle, steps=steps)
    q = bundle.split("test")
    for query, state in zip(q, m.forward(bundle.graph, q, seed=steps, with_loss=False).states):
        assert set(state.nodes[state.values > 0].tolist()) <= _hops(bundle.graph, int(query[0]), steps)


@pytest.mark.parametrize("flags", [{}, {"no_displacement": True}, {"no_subgraph": True}, {"no_pgnn": True},
                                   {"pgnn_layers": 2}])
def test_ablations_run_and_conserve(f64, bundle, flags):
    m = _model(bundle, **flags)
    res = m.forward(bundle.graph, bundle.split("test"), seed=0, trace=True)
    assert np.isfinite(float(res.loss.data))
    for steps in res.traces:
        for st in steps:
            assert abs(st.node_attention.sum() - 1) < 1e-12


def test_ablation_parameter_sets(bundle):
    names = lambda **kw: set(_model(bundle, **kw).params.names())
    assert not any(n.startswith("pgnn.") for n in names(no_pgnn=True))
    assert "pgnn.1.W_past" in names(pgnn_layers=2)
    assert "timestamp" in names(no_displacement=True) and "displacement" not in names(no_displacement=True)


def test_full_subgraph_ignores_sampler_budget(f64, bundle):
    q = bundle.split("test")
    outs = [_model(bundle, no_subgraph=True, max_core_nodes=x, edges_per_core=x).forward(
        bundle.graph, q, seed=s, with_loss=False) for x, s in ((1, 0), (9, 5))]
    for a, b in zip(outs[0].states, outs[1].states):
        np.testing.assert_array_equal(a.values, b.values)


def test_no_pgnn_uses_raw_embeddings(f64, bundle):
    m = _model(bundle, no_pgnn=True)
    assert m.preliminary(bundle.graph, 0) is m.params["entity"]


def test_matches_reference_decoder_when_sampling_keeps_everything(f64):
    b = random_bundle(num_entities=5, num_edges=7, num_relations=2, num_days=3, num_eval=3, seed=6)
    m = _model(b, max_core_nodes=50, edges_per_core=50, edges_per_step=50)
    q = b.split("test")
    for query, state in zip(q, m.forward(b.graph, q, with_loss=False).states):
        np.testing.assert_allclose(state.dense(b.num_entities), ref.forward(m, b.graph, query), atol=1e-12)


def test_batch_mates_do_not_change_a_query(f64, bundle):
    m = _model(bundle)
    q = bundle.split("test")
    keys = [(1, i) for i in range(len(q))]
    together = m.forward(bundle.graph, q, keys=keys, with_loss=False).states
    for i in (0, 3):
        alone = m.forward(bundle.graph, q[i:i + 1], keys=keys[i:i + 1], with_loss=False).states[0]
        np.testing.assert_array_equal(alone.nodes, together[i].nodes)
        np.testing.assert_allclose(alone.values, together[i].values, atol=1e-13)


def test_banned_edges_hidden(f64, bundle):
    m = _model(bundle, steps=1, max_core_nodes=5, edges_per_core=50, edges_per_step=50)
    query = bundle.split("train")[:1]
    ban = bundle.graph.quad_edges(*query[0].tolist())
    trace = m.forward(bundle.graph, query, banned=[ban], trace=True).traces[0]
    assert set(ban).isdisjoint(trace[0].candidates.edges.tolist())


def test_every_parameter_receives_gradient_despite_sampling(f64, bundle):
    m = _model(bundle)
    q = bundle.split("train")[::4]               # spread over time so every sign occurs
    with ad.Tape() as tape:
        res = m.forward(bundle.graph, q, banned=[bundle.graph.quad_edges(*x) for x in q.tolist()])
    tape.backward(res.loss)
    for name in m.params.names():
        assert np.abs(m.params.grad(name)).sum() > 0, name


def test_predictions_are_argmax(bundle):
    m = _model(bundle)
    res = m.forward(bundle.graph, bundle.split("test"), with_loss=False)
    for pred, s in zip(res.predictions(), res.states):
        assert s.get(pred) == s.values.max()


def test_conservation_tolerance_scales_with_precision():
    assert conservation_tolerance(np.float64) == 1e-6
    assert 1e-4 < conservation_tolerance(np.float32) < 1e-2
