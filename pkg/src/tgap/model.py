"""Model parameters and the batched forward pass.

A batch of queries is decoded jointly: each query owns its subgraph and
attention support, and the per-query pieces are laid side by side in shared
tensors (a disjoint union) so every step is a handful of large array ops
instead of one small op per query.

Step ordering for t = 1..T:

1. pick core nodes from a^(t-1)
2. sample candidate edges
3. transition probabilities from g^(t-1) and h
4. propagate to get a^(t) and edge attention
5. insert the top-z new candidates into the subgraph
6. subgraph GNN update to get g^(t)   (skipped after the last step)
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .data import TemporalKG
from .flow import AttentionState, answer_loss, propagate, transition_logits, transition_probabilities
from .gnn import EdgeBatch, edge_time_index, init_layer, pgnn_forward, query_context, sgnn_step
from .sampler import CandidateEdgeSet, SamplerConfig, Subgraph, expand_subgraph, sample_candidate_edges, \
    select_core_nodes

CONSERVATION_TOL = 1e-6    # at 64-bit; scaled up by machine epsilon for lower precision


def conservation_tolerance(dtype) -> float:
    return max(CONSERVATION_TOL, 1e4 * float(np.finfo(dtype).eps))


@dataclass
class ModelConfig:
    dim: int = 100
    heads: int = 5
    steps: int = 3
    pgnn_layers: int = 1
    max_core_nodes: int = 100
    edges_per_core: int = 500
    edges_per_step: int = 500
    no_displacement: bool = False
    no_subgraph: bool = False
    no_pgnn: bool = False
    max_disp: int | None = None

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide dim ({self.dim})")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.pgnn_layers < 0:
            raise ValueError("pgnn_layers must be >= 0")
        self.sampler  # validates x, y, z

    @property
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.max_core_nodes, self.edges_per_core, self.edges_per_step)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class StepTrace:
    step: int
    cores: np.ndarray
    candidates: CandidateEdgeSet
    edge_attention: np.ndarray
    nodes: np.ndarray
    node_attention: np.ndarray
    inserted: list
    joined: list


@dataclass
class ForwardResult:
    states: list
    loss: Tensor | None = None
    traces: list | None = None
    signature: tuple = ()
    unreached: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def predictions(self):
        return np.array([s.nodes[np.lexsort((s.nodes, -s.values))[0]] for s in self.states])


class TGAP:
    def __init__(self, cfg: ModelConfig, num_entities: int, num_raw_relations: int, num_times: int,
                 seed: int = 0):
        self.cfg = cfg
        self.num_entities = num_entities
        self.num_raw_relations = num_raw_relations
        self.num_times = num_times
        self.max_disp = cfg.max_disp if cfg.max_disp is not None else max(num_times - 1, 0)
        self.params = ParamStore()
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        cfg, p, d = self.cfg, self.params, self.cfg.dim
        nd = cfg.no_displacement
        p.xavier("entity", (self.num_entities, d), rng)
        p.xavier("relation", (2 * self.num_raw_relations + 1, d), rng)
        if nd:
            p.xavier("timestamp", (self.num_times + 1, d), rng)
        else:
            p.xavier("displacement", (self.max_disp + 1, d), rng)
        if not cfg.no_pgnn:
            for l in range(cfg.pgnn_layers):
                init_layer(p, f"pgnn.{l}", d, cfg.heads, nd, rng)
        init_layer(p, "sgnn", d, cfg.heads, nd, rng)
        p.xavier("sgnn.W_g", (2 * d, d), rng)
        p.xavier("sgnn.W_c", (d, d), rng)
        p.xavier("flow.W_Q", (d, d), rng)
        p.xavier("flow.W_K", (d, d), rng)

    # ------------------------------------------------------------------ encode

    def preliminary(self, graph: TemporalKG, query_time: int, keep=None) -> Tensor:
        cfg = self.cfg
        if cfg.no_pgnn:
            return self.params["entity"]
        return pgnn_forward(self.params, graph, query_time, layers=cfg.pgnn_layers, heads=cfg.heads,
                            max_disp=self.max_disp, no_displacement=cfg.no_displacement, keep=keep)

    def _encode_batch(self, graph, times, banned):
        """Preliminary features stacked per unique query time; returns (H, row offset per query)."""
        V = graph.num_entities
        if self.cfg.no_pgnn:
            return self.params["entity"], np.zeros(len(times), dtype=np.int64)
        uniq, inv = np.unique(times, return_inverse=True)
        blocks = []
        for u, t in enumerate(uniq.tolist()):
            ban = set()
            for b in np.flatnonzero(inv == u).tolist():
                ban |= banned[b]
            keep = None
            if ban:
                keep = np.ones(graph.num_edges, dtype=bool)
                keep[list(ban)] = False
            blocks.append(self.preliminary(graph, t, keep))
        H = blocks[0] if len(blocks) == 1 else ad.concat_rows(blocks)
        return H, inv.astype(np.int64) * V

    def _edge_features(self, graph, edges, qtimes):
        sign, tau = edge_time_index(graph, edges, qtimes, self.max_disp, self.cfg.no_displacement)
        return sign, tau

    # ------------------------------------------------------------------ decode

    def forward(self, graph: TemporalKG, queries, *, seed: int = 0, keys=None, banned=None,
                trace: bool = False, with_loss: bool = True) -> ForwardResult:
        """Decode a batch of (head, relation, answer, time) queries.

        ``keys`` gives each query its own sampling stream (default: its
        position); ``banned`` lists per-query edge ids hidden from the model.
        """
        cfg, P = self.cfg, self.params
        queries = np.asarray(queries, dtype=np.int64).reshape(-1, 4)
        B, V, d, heads = len(queries), graph.num_entities, cfg.dim, cfg.heads
        nd = cfg.no_displacement
        keys = [(i,) for i in range(B)] if keys is None else keys
        rngs = [np.random.default_rng([seed, *map(int, k)]) for k in keys]
        banned = [frozenset()] * B if banned is None else [frozenset(b) for b in banned]
        heads_, rels_, answers, qtimes = queries.T

        H, hbase = self._encode_batch(graph, qtimes, banned)
        Q = query_context(P, ad.gather_rows(H, hbase + heads_), rels_, nd)

        # subgraph members: global slot per (query, node)
        slot_of = [dict() for _ in range(B)]
        member_query, member_hrow = [], []
        sg = {k: [] for k in ("src", "dst", "rel", "sign", "tau")}
        subs = [Subgraph(int(h)) for h in heads_]

        def add_member(b, v):
            slot_of[b][v] = len(member_query)
            member_query.append(b)
            member_hrow.append(hbase[b] + v)

        def add_sg_edges(b, edges):
            edges = np.asarray(edges, dtype=np.int64)
            if len(edges) == 0:
                return
            sign, tau = self._edge_features(graph, edges, qtimes[b])
            sg["src"].extend(slot_of[b][v] for v in graph.src[edges].tolist())
            sg["dst"].extend(slot_of[b][v] for v in graph.dst[edges].tolist())
            sg["rel"].extend(graph.rel[edges].tolist())
            sg["sign"].extend(sign.tolist())
            sg["tau"].extend(tau.tolist())

        full_edges = None
        if cfg.no_subgraph:
            for b in range(B):
                for v in range(V):
                    add_member(b, v)
            full_edges = []
            for b in range(B):
                e = np.arange(graph.num_edges)
                if banned[b]:
                    e = e[~np.isin(e, list(banned[b]))]
                full_edges.append(e)
                add_sg_edges(b, e)
        else:
            for b in range(B):
                add_member(b, int(heads_[b]))

        def run_sgnn(G_pre):
            eb = EdgeBatch(*(np.asarray(sg[k], dtype=np.int64) for k in ("src", "dst", "rel", "sign", "tau")))
            return sgnn_step(P, G_pre, eb, ad.gather_rows(Q, np.asarray(member_query)), heads=heads,
                             no_displacement=nd)

        G = run_sgnn(ad.gather_rows(H, np.asarray(member_hrow)))

        att_nodes = [np.array([h], dtype=np.int64) for h in heads_.tolist()]
        att_off = np.arange(B + 1, dtype=np.int64)
        A = ad.constant(np.ones(B))
        traces = [[] for _ in range(B)] if trace else None
        signature = []
        zero_row = ad.constant(np.zeros((1, d)))
        sampler = cfg.sampler
        time_table = P["timestamp" if nd else "displacement"]

        for t in range(1, cfg.steps + 1):
            cand_sets, cand_cores = [], []
            c_edges, c_b, c_src = [], [], []
            A_np = A.data
            for b in range(B):
                nodes_b = att_nodes[b]
                vals = A_np[att_off[b]:att_off[b + 1]]
                frontier = nodes_b[vals > 0]
                if cfg.no_subgraph:
                    cores = frontier
                    out = np.concatenate([graph.out_edges(v) for v in frontier.tolist()])
                    if banned[b]:
                        out = out[~np.isin(out, list(banned[b]))]
                    edges = np.unique(out)
                    cs = CandidateEdgeSet(edges, np.zeros(len(edges), bool), np.ones(len(edges), bool),
                                          graph.is_self_loop[edges])
                else:
                    cores = select_core_nodes(nodes_b, vals, sampler.max_core_nodes)
                    cs = sample_candidate_edges(graph, cores, sampler.edges_per_core, rngs[b], subs[b],
                                                frontier, banned[b])
                cand_sets.append(cs)
                cand_cores.append(cores)
                c_edges.append(cs.edges)
                c_b.append(np.full(len(cs.edges), b, dtype=np.int64))
                c_src.append(att_off[b] + np.searchsorted(nodes_b, graph.src[cs.edges]))
            c_len = np.array([len(e) for e in c_edges])
            c_off = np.concatenate([[0], np.cumsum(c_len)])
            c_edges, c_b, c_src = np.concatenate(c_edges), np.concatenate(c_b), np.concatenate(c_src)
            c_dst_node = graph.dst[c_edges]
            src_node = graph.src[c_edges]

            M = len(member_query)
            src_m = np.array([slot_of[b].get(v, M) for b, v in zip(c_b.tolist(), src_node.tolist())],
                             dtype=np.int64)
            dst_m = np.array([slot_of[b].get(v, M) for b, v in zip(c_b.tolist(), c_dst_node.tolist())],
                             dtype=np.int64)
            Gz = ad.concat_rows([G, zero_row])
            q_src = ad.gather_rows((Gz @ P["flow.W_Q"]) @ P["flow.W_K"].T, src_m)
            sign, tau = self._edge_features(graph, c_edges, qtimes[c_b])
            rel_tau = ad.gather_rows(P["relation"], graph.rel[c_edges]) + ad.gather_rows(time_table, tau)
            logits = transition_logits(P, q_src, ad.gather_rows(Gz, dst_m),
                                       ad.gather_rows(H, hbase[c_b] + c_dst_node), rel_tau)
            probs = transition_probabilities(logits, c_src, len(A_np))
            keys_ = c_b * V + c_dst_node
            uniq, inv = np.unique(keys_, return_inverse=True)
            A, edge_att = propagate(A, probs, c_src, inv, len(uniq))
            owner = uniq // V
            att_off = np.searchsorted(owner, np.arange(B + 1)).astype(np.int64)
            att_nodes = [uniq[att_off[b]:att_off[b + 1]] - b * V for b in range(B)]
            if not np.all(np.isfinite(A.data)):
                raise FloatingPointError(f"non-finite attention at step {t}")
            totals = np.add.reduceat(A.data.astype(np.float64), att_off[:-1])
            if np.abs(totals - 1.0).max() > conservation_tolerance(A.data.dtype):
                raise RuntimeError(f"attention mass not conserved at step {t}: {totals.tolist()}")

            ea_np = edge_att.data
            new_hrows = []
            step_sig = []
            for b in range(B):
                ea_b = ea_np[c_off[b]:c_off[b + 1]]
                inserted, joined = [], []
                if not cfg.no_subgraph:
                    inserted, joined = expand_subgraph(graph, subs[b], cand_sets[b], ea_b,
                                                       sampler.edges_per_step)
                    for v in joined:
                        add_member(b, v)
                        new_hrows.append(member_hrow[-1])
                    add_sg_edges(b, inserted)
                step_sig.append((tuple(cand_cores[b].tolist()), tuple(inserted)))
                if trace:
                    traces[b].append(StepTrace(
                        t, cand_cores[b].copy(), cand_sets[b], ea_b.copy(), att_nodes[b].copy(),
                        A.data[att_off[b]:att_off[b + 1]].copy(), inserted, joined))
            signature.append(tuple(step_sig))

            if t < cfg.steps:
                G_pre = G
                if new_hrows:
                    G_pre = ad.concat_rows([G, ad.gather_rows(H, np.asarray(new_hrows))])
                G = run_sgnn(G_pre)

        states = []
        answer_slots = np.full(B, -1, dtype=np.int64)
        last_edges = np.split(c_edges, c_off[1:-1])
        last_vals = np.split(edge_att.data, c_off[1:-1])
        for b in range(B):
            nodes_b = att_nodes[b]
            vals = A.data[att_off[b]:att_off[b + 1]].astype(np.float64)
            states.append(AttentionState(nodes_b, vals, last_edges[b], last_vals[b].astype(np.float64),
                                         cfg.steps))
            i = np.searchsorted(nodes_b, answers[b])
            if i < len(nodes_b) and nodes_b[i] == answers[b] and vals[i] > 0:
                answer_slots[b] = att_off[b] + i
        loss = answer_loss(A, answer_slots) if with_loss else None
        return ForwardResult(states, loss, traces, tuple(signature), answer_slots < 0)
