"""Built-in verification suites run by ``tgap selftest`` and the test suite.

Each ``check_*`` function returns a :class:`CheckResult`; none of them raise
on a numerical mismatch, so callers can report every failure at once.
"""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from . import reference as ref
from .flow import propagate, transition_logits, transition_probabilities
from .gnn import EdgeBatch, edge_time_index, pgnn_forward, query_context, sgnn_step
from .model import ModelConfig, TGAP
from .synthetic import random_bundle


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (threshold {self.threshold:g}, {self.seconds:.1f}s)"


@contextmanager
def float64():
    prev = ad.get_dtype()
    ad.set_dtype(np.float64)
    try:
        yield
    finally:
        ad.set_dtype(prev)


def _model(bundle, cfg: ModelConfig, seed: int) -> TGAP:
    m = TGAP(cfg, bundle.num_entities, bundle.num_raw_relations, bundle.num_times, seed=seed)
    m.params.astype(ad.get_dtype())
    return m


# ------------------------------------------------------------------ gradients


GRADCHECK_CONFIG = dict(dim=8, heads=2, steps=2, max_core_nodes=3, edges_per_core=4, edges_per_step=3)


def gradcheck_problem(seed: int = 0, num_queries: int = 4):
    """12-node, 30-edge graph and a batch of training queries with their own edges hidden."""
    bundle = random_bundle(num_entities=12, num_edges=30, num_relations=3, num_days=6, seed=seed)
    model = _model(bundle, ModelConfig(**GRADCHECK_CONFIG), seed)
    queries = bundle.split("train")[:num_queries]
    banned = [bundle.graph.quad_edges(*q) for q in queries.tolist()]

    def loss_fn():
        res = model.forward(bundle.graph, queries, seed=seed, banned=banned)
        return res.loss, res.signature

    return model, loss_fn


GRADCHECK_STEP = 1e-3
GRADCHECK_ORDER = 4


def check_gradients(seed: int = 0, tolerance: float = 1e-4) -> CheckResult:
    t0 = time.perf_counter()
    with float64():
        model, loss_fn = gradcheck_problem(seed)
        report = ad.finite_difference_check(loss_fn, model.params, tolerance=tolerance, h=GRADCHECK_STEP,
                                            order=GRADCHECK_ORDER)
    return CheckResult("gradient check", report.passed, report.max_rel_error, tolerance,
                       time.perf_counter() - t0,
                       {"flagged": report.flagged, "per_param": {p.name: p.max_rel_error for p in report.params}})


# --------------------------------------------------------------- conservation


def conservation_case(seed: int):
    """Random graph size, sampler budget and model for one conservation trial."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 20))
    bundle = random_bundle(num_entities=n, num_edges=int(rng.integers(n, 4 * n)),
                           num_relations=int(rng.integers(1, 4)), num_days=int(rng.integers(1, 8)),
                           num_eval=3, seed=seed)
    cfg = ModelConfig(dim=4, heads=2, steps=int(rng.integers(1, 5)),
                      max_core_nodes=int(rng.integers(1, 6)), edges_per_core=int(rng.integers(1, 6)),
                      edges_per_step=int(rng.integers(1, 6)), no_displacement=bool(rng.integers(2)))
    return bundle, _model(bundle, cfg, seed)


def conservation_violations(bundle, model, seed):
    """Worst |sum a - 1|, most negative edge attention, and subgraph-chain errors for one case."""
    g = bundle.graph
    z = model.cfg.edges_per_step
    queries = bundle.split("test")
    res = model.forward(g, queries, seed=seed, trace=True, with_loss=False)
    worst_sum, min_edge, chain_errors = 0.0, 0.0, []
    for b, steps in enumerate(res.traces):
        edges_so_far, nodes_so_far = set(), {int(queries[b, 0])}
        for st in steps:
            worst_sum = max(worst_sum, abs(float(st.node_attention.sum()) - 1.0))
            if len(st.edge_attention):
                min_edge = min(min_edge, float(st.edge_attention.min()))
            ins = set(st.inserted)
            if len(st.inserted) > z:
                chain_errors.append(f"query {b} step {st.step}: {len(st.inserted)} > z new edges")
            if ins & edges_so_far or len(ins) != len(st.inserted):
                chain_errors.append(f"query {b} step {st.step}: re-inserted edge")
            new_ok = set(st.candidates.edges[st.candidates.new].tolist())
            if not ins <= new_ok:
                chain_errors.append(f"query {b} step {st.step}: inserted edge outside sampled candidates")
            endpoints = {int(v) for e in st.inserted for v in (g.src[e], g.dst[e])}
            if set(st.joined) != endpoints - nodes_so_far:
                chain_errors.append(f"query {b} step {st.step}: node set mismatch")
            edges_so_far |= ins
            nodes_so_far |= endpoints
    return worst_sum, min_edge, chain_errors


def check_conservation(num_cases: int = 200, tolerance: float = 1e-9) -> CheckResult:
    t0 = time.perf_counter()
    worst, min_edge, errors = 0.0, 0.0, []
    with float64():
        for seed in range(num_cases):
            bundle, model = conservation_case(seed)
            w, m, e = conservation_violations(bundle, model, seed)
            worst, min_edge = max(worst, w), min(min_edge, m)
            errors.extend(f"case {seed}: {x}" for x in e)
    ok = worst < tolerance and min_edge >= 0.0 and not errors
    return CheckResult("attention conservation", ok, worst, tolerance, time.perf_counter() - t0,
                       {"min_edge_attention": min_edge, "chain_errors": errors[:10], "cases": num_cases})


# ------------------------------------------------------------------- oracles


def oracle_case(seed: int, no_displacement: bool = False, layers: int = 1):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    bundle = random_bundle(num_entities=n, num_edges=int(rng.integers(n, 2 * n + 3)),
                           num_relations=int(rng.integers(1, 3)), num_days=int(rng.integers(1, 5)),
                           num_eval=2, seed=seed)
    cfg = ModelConfig(dim=6, heads=int(rng.choice([1, 2, 3])), steps=3, pgnn_layers=layers, max_core_nodes=50,
                      edges_per_core=50, edges_per_step=50, no_displacement=no_displacement)
    return bundle, _model(bundle, cfg, seed)


def _pgnn_error(bundle, model):
    cfg, g = model.cfg, bundle.graph
    worst = 0.0
    for t in range(bundle.num_times):
        fast = pgnn_forward(model.params, g, t, layers=cfg.pgnn_layers, heads=cfg.heads, max_disp=model.max_disp,
                            no_displacement=cfg.no_displacement).data
        slow = ref.pgnn(model.params, g, t, layers=cfg.pgnn_layers, heads=cfg.heads, max_disp=model.max_disp,
                        no_displacement=cfg.no_displacement)
        worst = max(worst, float(np.abs(fast - slow).max()))
    return worst


def _sgnn_error(bundle, model, rng):
    cfg, g, P = model.cfg, bundle.graph, model.params
    nd = cfg.no_displacement
    n = bundle.num_entities
    feats = rng.normal(size=(n, cfg.dim))
    pool = np.flatnonzero(~g.is_self_loop)
    chosen = np.sort(rng.choice(pool, size=int(rng.integers(0, len(pool) + 1)), replace=False))
    t_q = int(rng.integers(bundle.num_times))
    sign, tau = edge_time_index(g, chosen, t_q, model.max_disp, nd)
    eb = EdgeBatch(g.src[chosen], g.dst[chosen], g.rel[chosen], sign, tau)
    head, rel_q = int(rng.integers(n)), int(rng.integers(2 * bundle.num_raw_relations))
    q_fast = query_context(P, ad.constant(feats[[head]]), np.array([rel_q]), nd).data
    q_slow = ref.query_context(P, feats[head], rel_q, nd)
    fast = sgnn_step(P, ad.constant(feats), eb, ad.constant(np.repeat(q_fast, n, axis=0)), heads=cfg.heads,
                     no_displacement=nd).data
    edges = [(int(g.src[e]), int(g.dst[e]), int(g.rel[e]), int(s), int(t)) for e, s, t in zip(chosen, sign, tau)]
    slow = ref.sgnn_step(P, feats, edges, q_slow, heads=cfg.heads, no_displacement=nd)
    return max(float(np.abs(q_fast[0] - q_slow).max()), float(np.abs(fast - slow).max()))


def _flow_error(bundle, model, rng):
    cfg, g, P = model.cfg, bundle.graph, model.params
    nd = cfg.no_displacement
    n, d = bundle.num_entities, cfg.dim
    t_q = int(rng.integers(bundle.num_times))
    h = rng.normal(size=(n, d))
    members = np.sort(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False))
    G = rng.normal(size=(len(members), d))
    slot = {int(v): i for i, v in enumerate(members)}
    att_nodes = np.sort(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False))
    att_vals = rng.dirichlet(np.ones(len(att_nodes)))
    cands = np.concatenate([g.out_edges(v) for v in att_nodes.tolist()])
    cands.sort()
    src, dst = g.src[cands], g.dst[cands]
    M = len(members)
    src_m = np.array([slot.get(int(v), M) for v in src])
    dst_m = np.array([slot.get(int(v), M) for v in dst])
    Gz = ad.constant(np.vstack([G, np.zeros((1, d))]))
    _, tau = edge_time_index(g, cands, t_q, model.max_disp, nd)
    tt = P["timestamp" if nd else "displacement"]
    rel_tau = ad.gather_rows(P["relation"], g.rel[cands]) + ad.gather_rows(tt, tau)
    q_src = ad.gather_rows((Gz @ P["flow.W_Q"]) @ P["flow.W_K"].T, src_m)
    logits = transition_logits(P, q_src, ad.gather_rows(Gz, dst_m), ad.constant(h[dst]), rel_tau)
    src_seg = np.searchsorted(att_nodes, src)
    probs = transition_probabilities(logits, src_seg, len(att_nodes))
    new_att, edge_att = propagate(ad.constant(att_vals), probs, src_seg, dst, n)

    def g_of(v):
        return G[slot[v]] if v in slot else np.zeros(d)

    triples = [(int(i), int(j), int(e)) for i, j, e in zip(src, dst, cands)]
    slow_p = ref.transition(P, triples, g_of, lambda v: h[v], lambda e: P["relation"].data[g.rel[e]],
                            lambda e: tt.data[tau[np.searchsorted(cands, e)]])
    slow_new, slow_edge = ref.propagate_dense(dict(zip(att_nodes.tolist(), att_vals.tolist())), slow_p, n)
    ep = max(abs(float(p) - slow_p[c]) for p, c in zip(probs.data, triples))
    ee = max(abs(float(a) - slow_edge[c]) for a, c in zip(edge_att.data, triples))
    en = float(np.abs(new_att.data - np.array(slow_new)).max())
    return max(ep, ee, en)


def _decode_error(bundle, model):
    queries = bundle.split("test")
    res = model.forward(bundle.graph, queries, with_loss=False)
    return max(float(np.abs(ref.forward(model, bundle.graph, q) - s.dense(bundle.num_entities)).max())
               for q, s in zip(queries, res.states))


def oracle_errors(seed: int, no_displacement: bool = False, layers: int = 1) -> dict:
    """Max absolute deviation from the scalar-loop reference per component."""
    bundle, model = oracle_case(seed, no_displacement, layers)
    rng = np.random.default_rng([seed, 99])
    return {"pgnn": _pgnn_error(bundle, model), "sgnn": _sgnn_error(bundle, model, rng),
            "flow": _flow_error(bundle, model, rng), "decode": _decode_error(bundle, model)}


def check_oracles(num_cases: int = 20, tolerance: float = 1e-10) -> CheckResult:
    t0 = time.perf_counter()
    worst = {}
    with float64():
        for seed in range(num_cases):
            for nd in (False, True):
                for comp, err in oracle_errors(seed, nd, layers=1 + seed % 2).items():
                    worst[comp] = max(worst.get(comp, 0.0), err)
    value = max(worst.values())
    return CheckResult("reference equivalence", value < tolerance, value, tolerance, time.perf_counter() - t0,
                       worst)


# ------------------------------------------------------------------- kernels


def check_kernels(tolerance: float = 1e-12) -> CheckResult:
    """Compiled and numpy segment kernels agree (skipped when not compiled)."""
    t0 = time.perf_counter()
    if not kernels.HAVE_EXTENSION:
        return CheckResult("kernel parity (extension not built)", True, 0.0, tolerance, 0.0)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        n, c, s = int(rng.integers(1, 300)), int(rng.integers(1, 6)), int(rng.integers(1, 40))
        vals = rng.normal(size=(n, c))
        seg = rng.integers(0, s, n)
        grad = rng.normal(size=(n, c))
        outs = {}
        for name in ("cython", "python"):
            with kernels.using(name):
                p = kernels.segment_softmax(vals, seg, s)
                outs[name] = [kernels.segment_sum(vals, seg, s), p,
                              kernels.segment_softmax_backward(p, grad, seg, s)]
        for a, b in zip(outs["cython"], outs["python"]):
            worst = max(worst, float(np.abs(a - b).max()))
    return CheckResult("kernel parity", worst < tolerance, worst, tolerance, time.perf_counter() - t0)


def run_all(quick: bool = False) -> list[CheckResult]:
    return [
        check_kernels(),
        check_gradients(),
        check_conservation(40 if quick else 200),
        check_oracles(6 if quick else 20),
    ]
