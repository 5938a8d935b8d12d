"""Small generated temporal KGs for tests, demos, and scaled experiments."""
from __future__ import annotations

import datetime as _dt

import numpy as np

from .data import HELD_OUT_DAYS, build_bundle

EPOCH = _dt.date(2014, 1, 1)


def day(offset: int) -> str:
    return (EPOCH + _dt.timedelta(days=int(offset))).isoformat()


def random_records(num_entities=12, num_edges=30, num_relations=3, num_days=6, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for _ in range(num_edges):
        s, o = rng.integers(num_entities, size=2)
        recs.append((f"e{s}", f"r{rng.integers(num_relations)}", f"e{o}", day(rng.integers(num_days))))
    return recs


def random_bundle(num_entities=12, num_edges=30, num_relations=3, num_days=6, num_eval=4, seed=0):
    """Random graph; the eval split reuses random facts so every entity id is known."""
    recs = random_records(num_entities, num_edges + 2 * num_eval, num_relations, num_days, seed)
    # make sure all entity/relation names exist in train
    names = [(f"e{i}", f"r{i % num_relations}", f"e{(i + 1) % num_entities}", day(i % num_days))
             for i in range(num_entities)]
    train = names + recs[:num_edges - len(names)] if num_edges > len(names) else names[:num_edges]
    return build_bundle("random", train, recs[num_edges:num_edges + num_eval],
                        recs[num_edges + num_eval:], granularity="day")


def _background_days(rng, num_days, k, min_gap):
    allowed = np.array([d for d in range(num_days) if (EPOCH + _dt.timedelta(days=d)).day not in HELD_OUT_DAYS])
    for _ in range(1000):
        c = np.sort(rng.choice(allowed, size=k, replace=False))
        if np.all(np.diff(c) >= min_gap):
            return c
    raise RuntimeError("could not place background events; increase num_days")


def rule_records(num_quads=500, num_sources=20, fanout=3, num_days=120, seed=0, split=(0.8, 0.1, 0.1)):
    """Facts whose answers follow a 2-hop temporal rule.

    Source ``s`` links to ``fanout`` middle entities via ``link`` at distinct
    days ``c_i``; each middle links to its own object via ``owns`` on the
    same day. A query ``(s, rule, ?, t)`` is answered by the object behind
    the ``link`` edge whose day is nearest to ``t``. Background facts never
    fall on the 5th, 15th or 25th so the unseen-timestamp split keeps them.
    """
    rng = np.random.default_rng(seed)
    background, centers = [], {}
    for s in range(num_sources):
        days = _background_days(rng, num_days, fanout, min_gap=max(4, num_days // (3 * fanout)))
        centers[s] = days
        for i, c in enumerate(days.tolist()):
            background.append((f"src{s}", "link", f"mid{s}_{i}", day(c)))
            background.append((f"mid{s}_{i}", "owns", f"obj{s}_{i}", day(c)))
    n_rule = num_quads - len(background)
    if n_rule <= 0:
        raise ValueError("num_quads too small for the background graph")
    seen, rule = set(), []
    while len(rule) < n_rule:
        s = int(rng.integers(num_sources))
        t = int(rng.integers(num_days))
        dist = np.abs(centers[s] - t)
        if np.count_nonzero(dist == dist.min()) > 1 or (s, t) in seen:
            continue
        seen.add((s, t))
        rule.append((f"src{s}", "rule", f"obj{s}_{int(np.argmin(dist))}", day(t)))
    order = rng.permutation(len(rule))
    n_tr = int(round(split[0] * len(rule)))
    n_va = int(round(split[1] * len(rule)))
    rule = [rule[i] for i in order]
    train = background + rule[:n_tr]
    return train, rule[n_tr:n_tr + n_va], rule[n_tr + n_va:]


def rule_bundle(num_quads=500, seed=0, **kw):
    return build_bundle("rule", *rule_records(num_quads, seed=seed, **kw), granularity="day")
