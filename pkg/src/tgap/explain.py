"""Attention traces of single queries and displacement histograms per relation."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .data import NO_TIME, DatasetBundle
from .evaluate import EVAL_STREAM

HISTOGRAM_RANGE = 100
NORMALIZATION = ("per query: edge attention averaged over steps (self-loops excluded), "
                 "then averaged over queries")


@dataclass
class TracedEdge:
    edge: int
    quad: tuple
    attention: float


@dataclass
class TraceStep:
    step: int
    edges: list
    remainder: float
    num_candidates: int


@dataclass
class AttentionTrace:
    query: tuple
    steps: list
    predicted: str
    predicted_attention: float
    answer: str | None = None
    answer_attention: float | None = None

    def to_dict(self):
        return {
            "query": list(self.query),
            "steps": [{"step": s.step, "num_candidates": s.num_candidates, "remainder": s.remainder,
                       "edges": [{"edge": e.edge, "quad": list(e.quad), "attention": e.attention}
                                 for e in s.edges]} for s in self.steps],
            "predicted": self.predicted, "predicted_attention": self.predicted_attention,
            "answer": self.answer, "answer_attention": self.answer_attention,
        }

    def to_text(self) -> str:
        head, rel, _, when = self.query
        lines = [f"Query: ({head}, {rel}, ?, {when})"]
        width = max((len(_fmt_quad(e.quad)) for s in self.steps for e in s.edges), default=20)
        for s in self.steps:
            lines.append(f"Step {s.step}  ({s.num_candidates} candidate edges)")
            for e in s.edges:
                lines.append(f"  {_fmt_quad(e.quad):<{width}}  {e.attention:.4f}")
            lines.append(f"  {'(other edges)':<{width}}  {s.remainder:.4f}")
        lines.append(f"Predicted: {self.predicted}  ({self.predicted_attention:.4f})")
        if self.answer is not None:
            lines.append(f"Answer: {self.answer}  ({self.answer_attention:.4f})")
        return "\n".join(lines)


def _fmt_quad(q):
    return "(" + ", ".join(q) + ")"


def _time_label(bundle: DatasetBundle, time_id: int) -> str:
    return "-" if time_id == NO_TIME else bundle.vocab.times[time_id]


def edge_quad(bundle: DatasetBundle, edge: int) -> tuple:
    g, v = bundle.graph, bundle.vocab
    return (v.entities[g.src[edge]], v.relation_name(int(g.rel[edge])), v.entities[g.dst[edge]],
            _time_label(bundle, int(g.time[edge])))


def trace_query(model, bundle: DatasetBundle, query, k: int = 5, seed: int = 0, key=(EVAL_STREAM, 0)
                ) -> AttentionTrace:
    """Top-``k`` edges by edge attention at every step of one query's decode.

    ``query`` is an encoded (head, relation, answer, time) row; the answer may
    be -1 when unknown. All candidates are listed when there are fewer than k.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.int64).reshape(4)
    known = q[2] >= 0
    run = q.copy()
    if not known:
        run[2] = run[0]
    res = model.forward(bundle.graph, run[None, :], seed=seed, keys=[key], trace=True, with_loss=False)
    steps = []
    for st in res.traces[0]:
        ea = st.edge_attention.astype(np.float64)
        edges = st.candidates.edges
        order = np.lexsort((edges, -ea))[:k]
        listed = [TracedEdge(int(edges[i]), edge_quad(bundle, int(edges[i])), float(ea[i])) for i in order]
        steps.append(TraceStep(st.step, listed, float(1.0 - sum(e.attention for e in listed)), len(edges)))
    state = res.states[0]
    pred = int(res.predictions()[0])
    v = bundle.vocab
    return AttentionTrace(
        query=(v.entities[q[0]], v.relation_name(int(q[1])), v.entities[q[2]] if known else "?",
               _time_label(bundle, int(q[3]))),
        steps=steps,
        predicted=v.entities[pred],
        predicted_attention=state.get(pred),
        answer=v.entities[q[2]] if known else None,
        answer_attention=state.get(int(q[2])) if known else None,
    )


def resolve_relation(bundle: DatasetBundle, relation) -> int:
    """Relation id from an id or a name (inverse names end in ``^-1``)."""
    if isinstance(relation, (int, np.integer)):
        rid = int(relation)
    elif str(relation).lstrip("-").isdigit():
        rid = int(relation)
    else:
        name = str(relation)
        inverse = name.endswith("^-1")
        base = name[:-3] if inverse else name
        try:
            rid = bundle.vocab.relation_id(base)
        except KeyError:
            raise KeyError(f"unknown relation {name!r}") from None
        rid += bundle.num_raw_relations if inverse else 0
    if not 0 <= rid < 2 * bundle.num_raw_relations:
        raise KeyError(f"relation id {rid} out of range")
    return rid


@dataclass
class DisplacementHistogram:
    relation: str
    split: str
    num_queries: int
    displacements: np.ndarray
    mean_attention: np.ndarray
    reachable_count: np.ndarray
    clipped_attention: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def reachable_fraction(self):
        total = self.reachable_count.sum()
        return self.reachable_count / total if total > 0 else self.reachable_count

    def to_dict(self):
        return {
            "relation": self.relation, "split": self.split, "num_queries": self.num_queries,
            "displacement": self.displacements.tolist(),
            "mean_attention": self.mean_attention.tolist(),
            "reachable_count": self.reachable_count.tolist(),
            "reachable_fraction": self.reachable_fraction.tolist(),
            "clipped_attention": self.clipped_attention,
            "metadata": dict(self.metadata),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["displacement", "mean_attention", "reachable_count", "reachable_fraction"])
        for row in zip(self.displacements.tolist(), self.mean_attention.tolist(),
                       self.reachable_count.tolist(), self.reachable_fraction.tolist()):
            w.writerow(row)
        return buf.getvalue()

    def write(self, stem):
        """Write ``<stem>.json`` and ``<stem>.csv``; returns the paths."""
        stem = str(stem)
        with open(stem + ".json", "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        with open(stem + ".csv", "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())
        return [stem + ".json", stem + ".csv"]

    def render(self, path):
        """Bar chart of both series (needs matplotlib)."""
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(8, 3.5))
        x = self.displacements
        ax.bar(x, self.reachable_fraction, width=1.0, color="tab:blue", alpha=0.5, label="reachable edges")
        ax.bar(x, self.mean_attention, width=1.0, color="tab:red", alpha=0.7, label="attention")
        ax.set_yscale("log")
        ax.set_xlabel("temporal displacement")
        ax.set_title(f"{self.relation} ({self.num_queries} queries)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path


def displacement_histogram(model, bundle: DatasetBundle, relation, split: str = "test", seed: int = 0,
                           batch_size: int = 16, max_queries: int | None = None,
                           span: int = HISTOGRAM_RANGE) -> DisplacementHistogram:
    """Attention mass per signed displacement for the queries of one relation.

    The baseline series counts edges reachable within ``steps`` hops of the
    query head, per displacement, averaged over the same queries.
    """
    rid = resolve_relation(bundle, relation)
    queries = bundle.split(split)
    pos = np.flatnonzero(queries[:, 1] == rid)
    if max_queries is not None:
        pos = pos[:max_queries]
    if len(pos) == 0:
        raise ValueError(f"relation {bundle.vocab.relation_name(rid)!r} has no queries in split {split!r}")
    g = bundle.graph
    steps = model.cfg.steps
    width = 2 * span + 1
    att = np.zeros(width)
    reach = np.zeros(width)
    clipped = 0.0

    def bucket(edges, qtime):
        return g.time_values[g.time[edges]] - g.time_values[qtime]

    for start in range(0, len(pos), batch_size):
        idx = pos[start:start + batch_size]
        batch = queries[idx]
        res = model.forward(g, batch, seed=seed, keys=[(EVAL_STREAM, int(i)) for i in idx], trace=True,
                            with_loss=False)
        for q, tr in zip(batch, res.traces):
            per_query = np.zeros(width)
            for st in tr:
                edges = st.candidates.edges
                keep = ~g.is_self_loop[edges]
                delta = bucket(edges[keep], q[3])
                vals = st.edge_attention[keep].astype(np.float64)
                inside = np.abs(delta) <= span
                np.add.at(per_query, delta[inside] + span, vals[inside])
                clipped += float(vals[~inside].sum()) / steps
            att += per_query / steps
            r_edges = g.reachable_edges(int(q[0]), steps)
            delta = bucket(r_edges, q[3])
            inside = np.abs(delta) <= span
            np.add.at(reach, delta[inside] + span, 1.0)
    n = len(pos)
    return DisplacementHistogram(
        relation=bundle.vocab.relation_name(rid), split=split, num_queries=n,
        displacements=np.arange(-span, span + 1), mean_attention=att / n, reachable_count=reach / n,
        clipped_attention=clipped / n,
        metadata={"normalization": NORMALIZATION, "range": [-span, span], "unit": bundle.granularity,
                  "hops": steps, "seed": seed},
    )
