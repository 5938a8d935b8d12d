"""Ranking metrics (MRR, Hits@k) with tie-averaged, optionally filtered ranks."""
from __future__ import annotations

import multiprocessing as mp
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DatasetBundle

FILTER_MODES = ("time", "raw")
EVAL_STREAM = 1


def tie_averaged_rank(scores: np.ndarray, answer: int, exclude=None) -> float:
    """Rank of ``answer``; entities tied with it share the mean of their positions.

    ``exclude`` holds entities removed from the ranking (other known answers).
    """
    s = scores[answer]
    if exclude:
        keep = np.ones(len(scores), dtype=bool)
        keep[list(exclude)] = False
        keep[answer] = True
        pool = scores[keep]
    else:
        pool = scores
    higher = np.count_nonzero(pool > s)
    ties = np.count_nonzero(pool == s) - 1
    return 1.0 + higher + ties / 2.0


def build_filter_index(bundle: DatasetBundle) -> dict:
    """(head, relation, time) -> set of true answers across all splits."""
    index = defaultdict(set)
    for h, r, o, t in bundle.all_queries().tolist():
        index[(h, r, t)].add(o)
    return index


@dataclass
class RankingResult:
    query: tuple
    rank: float
    reached: bool


@dataclass
class MetricsReport:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    unreached_rate: float
    num_queries: int
    filter_mode: str
    per_relation: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def line(self):
        return (f"MRR={self.mrr:.4f} H@1={self.hits1:.4f} H@3={self.hits3:.4f} H@10={self.hits10:.4f} "
                f"unreached={self.unreached_rate:.3f} n={self.num_queries} ({self.filter_mode})")


def summarize(results: list[RankingResult], filter_mode: str, relation_names=None) -> MetricsReport:
    if not results:
        raise ValueError("no queries to evaluate")
    ranks = np.array([r.rank for r in results])
    reached = np.array([r.reached for r in results])
    per_rel = defaultdict(list)
    for r in results:
        per_rel[r.query[1]].append(r.rank)
    breakdown = {}
    for rel, rs in sorted(per_rel.items()):
        rs = np.array(rs)
        name = relation_names(rel) if relation_names else str(rel)
        breakdown[name] = {"count": int(len(rs)), "mrr": float(np.mean(1.0 / rs)),
                           "hits1": float(np.mean(rs <= 1))}
    return MetricsReport(
        mrr=float(np.mean(1.0 / ranks)),
        hits1=float(np.mean(ranks <= 1)),
        hits3=float(np.mean(ranks <= 3)),
        hits10=float(np.mean(ranks <= 10)),
        unreached_rate=float(1.0 - reached.mean()),
        num_queries=len(results),
        filter_mode=filter_mode,
        per_relation=breakdown,
    )


def rank_entities(scores: np.ndarray, query, filter_index=None) -> RankingResult:
    """Rank the answer of ``query`` = (head, rel, answer, time) under ``scores``.

    With a filter index the other true answers for (head, rel, time) are
    removed first (time-aware filtering); without one the rank is raw.
    """
    h, r, o, t = (int(x) for x in query)
    exclude = None
    if filter_index is not None:
        exclude = filter_index.get((h, r, t), set()) - {o}
    return RankingResult((h, r, o, t), tie_averaged_rank(scores, o, exclude), bool(scores[o] > 0))


def _rank_batches(score_fn, queries, fidx, batch_size, starts):
    results = []
    for start in starts:
        batch = queries[start:start + batch_size]
        scores = score_fn(batch, start)
        for q, s in zip(batch, scores):
            results.append(rank_entities(s, q, fidx))
    return results


_WORKER_JOB = None


def _worker(starts):
    return _rank_batches(*_WORKER_JOB, starts)


def evaluate_scores(score_fn, queries: np.ndarray, bundle: DatasetBundle, filter_mode="time",
                    batch_size=64, workers=1) -> tuple[MetricsReport, list[RankingResult]]:
    """Evaluate any scorer mapping a query batch to a (B, |V|) score matrix.

    With ``workers > 1`` whole batches are spread over forked processes;
    batches keep their composition, so the results match a serial run.
    """
    global _WORKER_JOB
    if filter_mode not in FILTER_MODES:
        raise ValueError(f"filter_mode must be one of {FILTER_MODES}")
    fidx = build_filter_index(bundle) if filter_mode == "time" else None
    starts = list(range(0, len(queries), batch_size))
    if workers <= 1 or len(starts) < 2 or "fork" not in mp.get_all_start_methods():
        results = _rank_batches(score_fn, queries, fidx, batch_size, starts)
    else:
        chunks = [c.tolist() for c in np.array_split(np.array(starts), min(workers, len(starts)))]
        _WORKER_JOB = (score_fn, queries, fidx, batch_size)
        try:
            with ProcessPoolExecutor(len(chunks), mp_context=mp.get_context("fork")) as pool:
                results = [r for part in pool.map(_worker, chunks) for r in part]
        finally:
            _WORKER_JOB = None
    return summarize(results, filter_mode, bundle.vocab.relation_name), results


def model_scorer(model, graph, seed=0):
    """Final node attention as entity scores; query keys are their split positions."""
    def score(batch, start):
        keys = [(EVAL_STREAM, start + i) for i in range(len(batch))]
        res = model.forward(graph, batch, seed=seed, keys=keys, with_loss=False)
        return np.stack([s.dense(graph.num_entities) for s in res.states])
    return score


def evaluate(model, bundle: DatasetBundle, split="test", filter_mode="time", batch_size=16, seed=0,
             queries=None, workers=1):
    queries = bundle.split(split) if queries is None else queries
    return evaluate_scores(model_scorer(model, bundle.graph, seed), queries, bundle, filter_mode, batch_size,
                           workers)
