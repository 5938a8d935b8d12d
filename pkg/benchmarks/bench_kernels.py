"""Compare the compiled segment kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Times each kernel on graph-shaped inputs (many short segments, as in the
attention layers) and one end-to-end training step on the rule dataset.
"""
import argparse
import json
import timeit

import numpy as np

from tgap import autodiff as ad
from tgap import kernels
from tgap.config import resolve
from tgap.datasets import load_named
from tgap.model import TGAP
from tgap.train import Adam, train_batch

SHAPES = [(20_000, 4, 5_000), (200_000, 5, 7_000), (50_000, 1, 49_000)]


def kernel_cases(rng):
    for n, c, s in SHAPES:
        vals = rng.normal(size=(n, c)).astype(np.float32)
        seg = np.sort(rng.integers(0, s, n))
        probs = kernels.segment_softmax(vals, seg, s)
        grad = rng.normal(size=(n, c)).astype(np.float32)
        label = f"n={n} cols={c} segments={s}"
        yield f"segment_sum      {label}", lambda v=vals, g=seg, s=s: kernels.segment_sum(v, g, s)
        yield f"segment_softmax  {label}", lambda v=vals, g=seg, s=s: kernels.segment_softmax(v, g, s)
        yield (f"softmax_backward {label}",
               lambda p=probs, d=grad, g=seg, s=s: kernels.segment_softmax_backward(p, d, g, s))


def training_step():
    cfg = resolve({}, {"dataset": "synthetic-rule"})
    bundle = load_named("synthetic-rule")
    ad.set_dtype(np.float32)
    model = TGAP(cfg.model, bundle.num_entities, bundle.num_raw_relations, bundle.num_times)
    model.params.astype(np.float32)
    opt = Adam(model.params)
    batch = bundle.split("train")[:16]
    banned = [bundle.graph.quad_edges(*q) for q in batch.tolist()]
    keys = [(0, 1, i) for i in range(len(batch))]
    return lambda: train_batch(model, bundle.graph, batch, seed=0, keys=keys, banned=banned, clip=3.0,
                               optimizer=opt, lr=0.0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()
    backends = ["python"] + (["cython"] if kernels.HAVE_EXTENSION else [])
    if len(backends) == 1:
        print("compiled kernels not built; timing the numpy fallback only")
    rows = []
    cases = list(kernel_cases(np.random.default_rng(0))) + [("training step (16 queries, d=32)", training_step())]
    for name, fn in cases:
        row = {"case": name}
        for b in backends:
            with kernels.using(b):
                fn()
                row[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        rows.append(row)
    print(f"{'case':<52} " + " ".join(f"{b:>10}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for row in rows:
        line = f"{row['case']:<52} " + " ".join(f"{row[b] * 1e3:>8.2f}ms" for b in backends)
        if len(backends) > 1:
            line += f"   {row['python'] / row['cython']:>6.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
