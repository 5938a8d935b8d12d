"""Temporal KG storage, benchmark loading, and split generation.

Edges are held column-wise in numpy arrays. For ``n`` raw training quadruples
and ``V`` entities the edge table is laid out as::

    [0, n)          raw edges          (s, r, o, t)
    [n, 2n)         inverse edges      (o, r + R, s, t)
    [2n, 2n + V)    self-loops         (v, 2R, v, -)
"""
from __future__ import annotations

import datetime as _dt
import hashlib
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NO_TIME = -1
MODIFIERS = {"occurSince", "occurUntil", "since", "until"}
HELD_OUT_DAYS = (5, 15, 25)


class DatasetError(ValueError):
    pass


class Sign(IntEnum):
    PAST = 0
    PRESENT = 1
    FUTURE = 2


def parse_time(token: str, granularity: str) -> int:
    """Integer calendar ordinal of a timestamp at the given granularity."""
    if granularity == "day":
        return _dt.date.fromisoformat(token).toordinal()
    if granularity == "year":
        return int(token.split("-")[0]) if token[:1] != "-" else int(token)
    raise DatasetError(f"unknown granularity {granularity!r}")


def temporal_displacement(edge_ordinal: int, query_ordinal: int, max_bucket: int | None = None):
    """Sign and magnitude of ``edge - query``; magnitude clamped to ``max_bucket``."""
    delta = edge_ordinal - query_ordinal
    sign = Sign.PAST if delta < 0 else Sign.FUTURE if delta > 0 else Sign.PRESENT
    mag = abs(delta)
    if max_bucket is not None:
        mag = min(mag, max_bucket)
    return sign, mag


def merge_temporal_modifiers(records: Iterable[Sequence[str]]) -> list[tuple[str, ...]]:
    """Fold a 5th-column occurSince/occurUntil modifier into the relation name.

    ``(A, loves, B, since, 2020)`` becomes ``(A, loves-since, B, 2020)``;
    4-field records pass through unchanged.
    """
    out = []
    for rec in records:
        if len(rec) == 4:
            out.append(tuple(rec))
            continue
        if len(rec) != 5:
            raise DatasetError(f"expected 4 or 5 fields, got {len(rec)}: {rec!r}")
        s, r, o, mod, t = rec
        if mod not in MODIFIERS:
            raise DatasetError(f"unknown temporal modifier {mod!r} (expected occurSince/occurUntil)")
        out.append((s, f"{r}-{mod}", o, t))
    return out


@dataclass(frozen=True)
class Vocab:
    entities: tuple[str, ...]
    relations: tuple[str, ...]
    times: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_ent", {e: i for i, e in enumerate(self.entities)})
        object.__setattr__(self, "_rel", {r: i for i, r in enumerate(self.relations)})
        object.__setattr__(self, "_time", {t: i for i, t in enumerate(self.times)})

    @classmethod
    def build(cls, records: Iterable[Sequence[str]]) -> "Vocab":
        ents, rels, times = {}, {}, {}
        for s, r, o, t in records:
            ents.setdefault(s, len(ents))
            ents.setdefault(o, len(ents))
            rels.setdefault(r, len(rels))
            times.setdefault(t, len(times))
        return cls(tuple(ents), tuple(rels), tuple(times))

    def entity_id(self, name):
        return self._ent[name]

    def relation_id(self, name):
        return self._rel[name]

    def time_id(self, token):
        return self._time[token]

    def relation_name(self, rel_id: int) -> str:
        n = len(self.relations)
        if rel_id < n:
            return self.relations[rel_id]
        if rel_id < 2 * n:
            return self.relations[rel_id - n] + "^-1"
        return "self"

    def encode(self, records) -> np.ndarray:
        arr = np.array([(self._ent[s], self._rel[r], self._ent[o], self._time[t]) for s, r, o, t in records],
                       dtype=np.int64)
        return arr.reshape(-1, 4)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for part in (self.entities, self.relations, self.times):
            h.update("\x1f".join(part).encode())
            h.update(b"\x1e")
        return h.hexdigest()


def _csr(keys: np.ndarray, n: int):
    order = np.argsort(keys, kind="stable")
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(keys, minlength=n), out=ptr[1:])
    return ptr, order.astype(np.int64)


class TemporalKG:
    """Immutable augmented graph built from raw training quadruples."""

    def __init__(self, quads: np.ndarray, num_entities: int, num_raw_relations: int, time_values: np.ndarray):
        quads = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
        n, V, R = len(quads), int(num_entities), int(num_raw_relations)
        self.num_entities = V
        self.num_raw_relations = R
        self.num_raw_edges = n
        self.time_values = np.asarray(time_values, dtype=np.int64)
        nodes = np.arange(V, dtype=np.int64)
        s, r, o, t = quads.T
        self.src = np.concatenate([s, o, nodes])
        self.rel = np.concatenate([r, r + R, np.full(V, 2 * R, dtype=np.int64)])
        self.dst = np.concatenate([o, s, nodes])
        self.time = np.concatenate([t, t, np.full(V, NO_TIME, dtype=np.int64)])
        for a in (self.src, self.rel, self.dst, self.time):
            a.setflags(write=False)
        self.out_ptr, self.out_idx = _csr(self.src, V)
        self.in_ptr, self.in_idx = _csr(self.dst, V)
        self.self_loop = np.arange(2 * n, 2 * n + V, dtype=np.int64)
        self.is_self_loop = np.zeros(self.num_edges, dtype=bool)
        self.is_self_loop[2 * n:] = True
        self._quad_edges: dict[tuple, list[int]] = {}
        for i, q in enumerate(map(tuple, quads.tolist())):
            self._quad_edges.setdefault(q, []).extend((i, n + i))

    @property
    def num_edges(self):
        return len(self.src)

    @property
    def num_relations(self):
        return 2 * self.num_raw_relations + 1

    @property
    def self_loop_relation(self):
        return 2 * self.num_raw_relations

    @property
    def num_times(self):
        return len(self.time_values)

    def out_edges(self, node: int) -> np.ndarray:
        return self.out_idx[self.out_ptr[node]:self.out_ptr[node + 1]]

    def in_edges(self, node: int) -> np.ndarray:
        return self.in_idx[self.in_ptr[node]:self.in_ptr[node + 1]]

    def out_degree(self, node: int) -> int:
        return int(self.out_ptr[node + 1] - self.out_ptr[node])

    def quad_edges(self, head, rel, tail, time) -> list[int]:
        """Edge ids (raw and inverse) that store the fact, in either direction."""
        R = self.num_raw_relations
        key = (head, rel, tail, time) if rel < R else (tail, rel - R, head, time)
        return self._quad_edges.get(key, [])

    def displacement(self, edges: np.ndarray, query_time: int, max_bucket: int):
        """Vectorised (sign, magnitude) of edges relative to a query time.

        ``query_time`` may be a scalar or one time id per edge. Self-loops
        have no timestamp and read as (present, 0).
        """
        edges = np.asarray(edges, dtype=np.int64)
        et = self.time[edges]
        timed = et != NO_TIME
        qv = np.broadcast_to(self.time_values[query_time], edges.shape)
        delta = np.zeros(len(edges), dtype=np.int64)
        delta[timed] = self.time_values[et[timed]] - qv[timed]
        sign = np.sign(delta) + 1
        return sign, np.minimum(np.abs(delta), max_bucket)

    def reachable_edges(self, node: int, hops: int) -> np.ndarray:
        """Non-self-loop edges on some walk of at most ``hops`` steps from ``node``."""
        frontier, seen_nodes, edges = {node}, {node}, set()
        for _ in range(hops):
            nxt = set()
            for v in frontier:
                for e in self.out_edges(v).tolist():
                    if self.is_self_loop[e]:
                        continue
                    edges.add(e)
                    u = int(self.dst[e])
                    if u not in seen_nodes:
                        seen_nodes.add(u)
                        nxt.add(u)
            frontier = nxt
        return np.array(sorted(edges), dtype=np.int64)


def with_reciprocals(quads: np.ndarray, num_raw_relations: int) -> np.ndarray:
    quads = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
    inv = quads[:, [2, 1, 0, 3]].copy()
    inv[:, 1] += num_raw_relations
    return np.concatenate([quads, inv])


@dataclass
class DatasetBundle:
    name: str
    granularity: str
    vocab: Vocab
    graph: TemporalKG
    train: np.ndarray       # raw train quadruples (reciprocals added by the trainer)
    valid: np.ndarray       # raw + reciprocal queries
    test: np.ndarray        # raw + reciprocal queries
    raw_valid: np.ndarray
    raw_test: np.ndarray
    time_ordinals: np.ndarray
    fingerprint: str = ""
    stats: dict = field(default_factory=dict)

    @property
    def num_entities(self):
        return len(self.vocab.entities)

    @property
    def num_raw_relations(self):
        return len(self.vocab.relations)

    @property
    def num_times(self):
        return len(self.vocab.times)

    def split(self, name: str) -> np.ndarray:
        return {"train": with_reciprocals(self.train, self.num_raw_relations),
                "valid": self.valid, "test": self.test}[name]

    def all_queries(self) -> np.ndarray:
        """Every known fact in both directions (used for filtered ranking)."""
        raw = np.concatenate([self.train, self.raw_valid, self.raw_test])
        return with_reciprocals(raw, self.num_raw_relations)


def _records_fingerprint(splits) -> str:
    h = hashlib.sha256()
    for recs in splits:
        for rec in recs:
            h.update("\t".join(rec).encode())
            h.update(b"\n")
        h.update(b"\x1e")
    return h.hexdigest()


def build_bundle(name, train_recs, valid_recs, test_recs, granularity="day", vocab: Vocab | None = None
                 ) -> DatasetBundle:
    """Assemble a bundle from string 4-tuples (already modifier-merged)."""
    if not train_recs:
        raise DatasetError(f"{name}: training split is empty")
    vocab = vocab or Vocab.build(list(train_recs) + list(valid_recs) + list(test_recs))
    try:
        ords = np.array([parse_time(t, granularity) for t in vocab.times], dtype=np.int64)
    except ValueError as exc:
        raise DatasetError(f"{name}: timestamp not parsable at {granularity} granularity: {exc}") from None
    time_values = ords - ords.min()
    train, valid, test = (vocab.encode(r) for r in (train_recs, valid_recs, test_recs))
    R = len(vocab.relations)
    graph = TemporalKG(train, len(vocab.entities), R, time_values)
    bundle = DatasetBundle(
        name=name, granularity=granularity, vocab=vocab, graph=graph, train=train,
        valid=with_reciprocals(valid, R), test=with_reciprocals(test, R),
        raw_valid=valid, raw_test=test, time_ordinals=ords,
        fingerprint=_records_fingerprint((train_recs, valid_recs, test_recs)),
    )
    bundle.stats = dataset_stats(bundle)
    return bundle


def dataset_stats(bundle: DatasetBundle) -> dict:
    g = bundle.graph
    n_all = len(bundle.train) + len(bundle.raw_valid) + len(bundle.raw_test)
    return {
        "name": bundle.name,
        "granularity": bundle.granularity,
        "num_entities": bundle.num_entities,
        "num_raw_relations": bundle.num_raw_relations,
        "num_relations_augmented": g.num_relations,
        "num_timestamps": bundle.num_times,
        "num_train_quads": int(len(bundle.train)),
        "num_valid_quads": int(len(bundle.raw_valid)),
        "num_test_quads": int(len(bundle.raw_test)),
        "num_quads_all_splits": int(n_all),
        "num_graph_edges_augmented": int(g.num_edges),
        "num_self_loops": int(g.is_self_loop.sum()),
        "num_valid_queries": int(len(bundle.valid)),
        "num_test_queries": int(len(bundle.test)),
        "time_span": [int(bundle.time_ordinals.min()), int(bundle.time_ordinals.max())],
        "fingerprint": bundle.fingerprint,
    }


def _find_split_file(directory: Path, split: str) -> Path:
    for cand in (split, f"{split}.txt", f"{split}.tsv"):
        p = directory / cand
        if p.is_file():
            return p
    matches = sorted(directory.glob(f"*{split}*"))
    if len(matches) == 1:
        return matches[0]
    raise FileNotFoundError(f"no {split} file in {directory}")


def read_records(path: Path) -> list[tuple[str, ...]]:
    recs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) not in (4, 5) or any(not f for f in fields):
                raise DatasetError(f"{path}:{lineno}: expected 4 or 5 tab-separated fields, got {len(fields)}")
            try:
                recs.extend(merge_temporal_modifiers([fields]))
            except DatasetError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return recs


def load_dataset(directory, granularity: str = "day", name: str | None = None) -> DatasetBundle:
    """Load a benchmark directory holding train/valid/test TSV files."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(directory)
    splits = [read_records(_find_split_file(directory, s)) for s in ("train", "valid", "test")]
    return build_bundle(name or directory.name, *splits, granularity=granularity)


def write_records(directory, train, valid, test):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, recs in (("train", train), ("valid", valid), ("test", test)):
        with open(directory / f"{split}.txt", "w", encoding="utf-8") as fh:
            fh.writelines("\t".join(r) + "\n" for r in recs)


def decode_records(bundle: DatasetBundle, quads: np.ndarray):
    v = bundle.vocab
    return [(v.entities[s], v.relations[r], v.entities[o], v.times[t]) for s, r, o, t in quads.tolist()]


def subset_train(bundle: DatasetBundle, n: int) -> DatasetBundle:
    """Keep the first ``n`` training quadruples; eval splits and vocabulary unchanged."""
    recs = [decode_records(bundle, q) for q in (bundle.train[:n], bundle.raw_valid, bundle.raw_test)]
    out = build_bundle(f"{bundle.name}[:{n}]", *recs, granularity=bundle.granularity, vocab=bundle.vocab)
    return out


def make_unseen_timestamp_split(bundle: DatasetBundle, seed: int = 0) -> DatasetBundle:
    """Hold out every fact dated on the 5th, 15th or 25th of a month.

    The held-out facts are shuffled with ``seed`` and split in half between
    valid and test; the graph is rebuilt from the remaining facts.
    """
    if bundle.granularity != "day":
        raise DatasetError("unseen-timestamp split requires day granularity")
    raw = np.concatenate([bundle.train, bundle.raw_valid, bundle.raw_test])
    days = np.array([_dt.date.fromisoformat(t).day for t in bundle.vocab.times])
    held = np.isin(days[raw[:, 3]], HELD_OUT_DAYS)
    train = raw[~held]
    excluded = raw[held]
    perm = np.random.default_rng(seed).permutation(len(excluded))
    half = len(excluded) // 2
    valid, test = excluded[perm[:half]], excluded[perm[half:]]
    recs = [decode_records(bundle, q) for q in (train, valid, test)]
    return build_bundle(f"{bundle.name}-unseen", *recs, granularity="day", vocab=bundle.vocab)
