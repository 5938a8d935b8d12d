"""Acceptance criteria C1-C9.

Each test prints a single ``PASS Cn ...`` or ``FAIL Cn ...`` line (inline and
again in the terminal summary).  Criteria that need the ICEWS14 files are run
only when the data is found below ``TGAP_DATA`` (default ``./data``); without
it they print ``FAIL ... (not run ...)`` and are skipped, never passed.
"""
import json
import os
import sys
import time
from collections import Counter

import numpy as np
import pytest

from tgap import autodiff as ad
from tgap import selftest
from tgap.baseline import FrequencyBaseline
from tgap.cli import EXIT_OK, main
from tgap.config import resolve
from tgap.data import HELD_OUT_DAYS, make_unseen_timestamp_split
from tgap.datasets import DatasetNotFound, load_named
from tgap.evaluate import evaluate, evaluate_scores
from tgap.train import train

RESULTS = []
TRAIN_SEEDS = (0, 1, 2)


def report(cid, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {cid} {detail}"
    RESULTS.append(line)
    sys.__stdout__.write(f"\n{line}\n")
    sys.__stdout__.flush()
    return ok


def not_run(cid, why):
    report(cid, False, f"(not run: {why})")
    pytest.skip(why)


@pytest.fixture(autouse=True)
def _restore_dtype():
    prev = ad.get_dtype()
    yield
    ad.set_dtype(prev)


def _train_and_test(bundle, **overrides):
    cfg = resolve({}, {"dataset": "synthetic-rule", **overrides})
    t0 = time.perf_counter()
    result = train(bundle, cfg.model, cfg.train)
    seconds = time.perf_counter() - t0
    metrics, _ = evaluate(result.model, bundle, "test", seed=cfg.train.seed)
    return {"hits1": metrics.hits1, "mrr": metrics.mrr, "seconds": seconds, "epochs": cfg.train.epochs,
            "best_epoch": result.best_epoch}


@pytest.fixture(scope="session")
def rule_bundle():
    return load_named("synthetic-rule", seed=0)


@pytest.fixture(scope="session")
def rule_runs(rule_bundle):
    """Full and no-displacement models on the rule data, one per training seed."""
    return {variant: [_train_and_test(rule_bundle, seed=s, no_displacement=(variant == "no_displacement"))
                      for s in TRAIN_SEEDS]
            for variant in ("full", "no_displacement")}


def test_c1_gradient_check():
    res = selftest.check_gradients()
    ok = res.passed and res.value < 1e-4 and res.seconds < 60
    assert report("C1", ok, f"gradient check max rel err {res.value:.2e} (< 1e-4) in {res.seconds:.1f}s (< 60s)")


def test_c2_conservation():
    res = selftest.check_conservation(200, tolerance=1e-9)
    d = res.detail
    assert report("C2", res.passed, f"200 cases: worst |sum a - 1| {res.value:.1e}, min edge attention "
                                     f"{d['min_edge_attention']:.1e}, chain errors {len(d['chain_errors'])}")


def test_c3_oracle_equivalence():
    res = selftest.check_oracles(20, tolerance=1e-10)
    assert report("C3", res.passed, f"max deviation from scalar-loop references {res.value:.1e} (< 1e-10)")


def test_c4_rule_learnability(rule_runs):
    runs = rule_runs["full"]
    hits = [r["hits1"] for r in runs]
    median = float(np.median(hits))
    slowest = max(r["seconds"] for r in runs)
    ok = median >= 0.90 and runs[0]["epochs"] <= 200 and slowest < 600
    assert report("C4", ok, f"test H@1 median {median:.4f} (>= 0.90) over training seeds "
                            f"{[round(h, 4) for h in hits]}, {runs[0]['epochs']} epochs, slowest {slowest:.0f}s")


def test_c5_reduced_icews14():
    try:
        bundle = load_named("icews14", train_limit=10_000)
    except DatasetNotFound:
        not_run("C5", "ICEWS14 not found; set TGAP_DATA to the directory holding icews14/")
    cfg = resolve({}, {"dataset": "icews14", "dim": 50, "epochs": 5})
    t0 = time.perf_counter()
    result = train(bundle, cfg.model, cfg.train)
    seconds = time.perf_counter() - t0
    model_mrr = evaluate(result.model, bundle, "test")[0].mrr
    freq_mrr = evaluate_scores(FrequencyBaseline(bundle), bundle.split("test"), bundle)[0].mrr
    ok = model_mrr - freq_mrr >= 0.05 and seconds < 3600
    assert report("C5", ok, f"MRR {model_mrr:.4f} vs frequency {freq_mrr:.4f} (margin >= 0.05), {seconds:.0f}s")


def test_c6_unseen_timestamp_split(rule_bundle):
    split = make_unseen_timestamp_split(rule_bundle, seed=0)
    times = rule_bundle.vocab.times

    def dom(quads):
        return np.array([int(times[t][-2:]) for t in quads[:, 3]])

    def rows(quads):
        return Counter(map(tuple, quads.tolist()))

    everything = np.concatenate([rule_bundle.train, rule_bundle.raw_valid, rule_bundle.raw_test])
    partition_ok = (not np.isin(dom(split.train), HELD_OUT_DAYS).any()
                    and np.isin(dom(split.raw_valid), HELD_OUT_DAYS).all()
                    and np.isin(dom(split.raw_test), HELD_OUT_DAYS).all()
                    and rows(split.train) + rows(split.raw_valid) + rows(split.raw_test) == rows(everything))
    cfg = resolve({}, {"dataset": "synthetic-rule"})
    result = train(split, cfg.model, cfg.train)
    model = evaluate(result.model, split, "test")[0]
    freq = evaluate_scores(FrequencyBaseline(split), split.split("test"), split)[0]
    ok = partition_ok and model.mrr > freq.mrr and model.hits1 > freq.hits1
    assert report("C6", ok, f"exact 5/15/25 partition {partition_ok}; MRR {model.mrr:.4f} vs frequency "
                            f"{freq.mrr:.4f}, H@1 {model.hits1:.4f} vs {freq.hits1:.4f}")


def test_c7_displacement_ablation(rule_runs):
    full = [r["hits1"] for r in rule_runs["full"]]
    flat = [r["hits1"] for r in rule_runs["no_displacement"]]
    ok = all(a > b for a, b in zip(full, flat))
    assert report("C7", ok, "test H@1 full vs no-displacement per seed: "
                            + ", ".join(f"{a:.4f} > {b:.4f}" for a, b in zip(full, flat)))


def test_c8_manifest_determinism(tmp_path):
    first, second, third = (tmp_path / n for n in ("first", "second", "third"))
    args = ["train", "--dataset", "synthetic-rule", "--epochs", "3"]
    assert main([*args, "--out-dir", str(first)]) == EXIT_OK
    manifest = str(first / "manifest.json")
    for out in (second, third):
        assert main(["train", "--config", manifest, "--out-dir", str(out)]) == EXIT_OK
    names = ("metrics_test.json", "best.npz", "last.npz", "train_log.jsonl")
    same = {n: (first / n).read_bytes() == (second / n).read_bytes() == (third / n).read_bytes() for n in names}
    metrics = json.loads((second / "metrics_test.json").read_text())
    assert report("C8", all(same.values()), f"byte-identical across 3 runs: {same} (H@1 {metrics['hits1']:.4f})")


def test_c9_full_icews14_stretch():
    if os.environ.get("TGAP_STRETCH") != "1":
        not_run("C9", "optional multi-hour benchmark; set TGAP_STRETCH=1 with ICEWS14 available")
    try:
        bundle = load_named("icews14")
    except DatasetNotFound:
        not_run("C9", "ICEWS14 not found; set TGAP_DATA to the directory holding icews14/")
    cfg = resolve({}, {"dataset": "icews14"})
    result = train(bundle, cfg.model, cfg.train)
    mrr = evaluate(result.model, bundle, "test")[0].mrr
    assert report("C9", abs(mrr - 0.610) <= 0.05, f"full ICEWS14 MRR {mrr:.4f} (target 0.610 +/- 0.05)")
