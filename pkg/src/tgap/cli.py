"""Command line: ``tgap {prepare,train,evaluate,explain,selftest}``.

Every configuration key is accepted as ``--key value`` (underscores or
dashes), in a ``--config`` file, or through a run manifest. Exit codes:
0 success, 1 usage or configuration error, 2 runtime error, 3 selftest
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from . import autodiff as ad
from .baseline import FrequencyBaseline
from .config import KEYS, ConfigError, ResolvedConfig, parse_value, read_config_file, resolve, valid_keys
from .data import DatasetError, dataset_stats, decode_records, write_records
from .datasets import DatasetNotFound, load_named
from .evaluate import evaluate, evaluate_scores
from .explain import displacement_histogram, trace_query
from .model import TGAP
from .train import TrainingError, load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3
COMMANDS = ("prepare", "train", "evaluate", "explain", "selftest")

log = logging.getLogger("tgap")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value file, or a run manifest (JSON)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    group = common.add_argument_group("configuration keys")
    for key in valid_keys():
        flags = [f"--{key.replace('_', '-')}"] + ([f"--{key}"] if "_" in key else [])
        group.add_argument(*flags, dest=f"key__{key}", metavar="VALUE", default=None)
    parser = _Parser(prog="tgap", description="Temporal KG completion with attention flow over query subgraphs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "prepare": "load a dataset and write its statistics",
        "train": "train a model; writes checkpoints, a log, metrics and a run manifest",
        "evaluate": "rank the answers of a split and write a metrics JSON",
        "explain": "per-step attention trace of a query, or a displacement histogram for a relation",
        "selftest": "gradient, conservation, reference and kernel checks",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
        if name == "selftest":
            p.add_argument("--quick", action="store_true", help="fewer random cases")
    return parser


def resolve_args(args) -> ResolvedConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        k = k.strip().replace("-", "_")
        if k not in KEYS:
            raise ConfigError(f"unknown config key {k!r}; valid keys: {', '.join(valid_keys())}")
        overrides[k] = v
    for key in KEYS:
        raw = getattr(args, f"key__{key}", None)
        if raw is not None:
            overrides[key] = raw
    overrides = {k: parse_value(k, v) for k, v in overrides.items()}
    return resolve(file_values, overrides)


# ------------------------------------------------------------------- helpers


def _dump(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return str(path)


def _load_bundle(cfg: ResolvedConfig):
    run = cfg.run
    return load_named(run.dataset, run.data_dir, run.granularity, seed=cfg.train.seed,
                      train_limit=run.train_limit, unseen_split=run.unseen_split)


def _manifest(cfg: ResolvedConfig, bundle, command, artifacts: dict):
    return {
        "command": command,
        "config": cfg.flat(),
        "seeds": {"master": cfg.train.seed},
        "dataset": {"name": bundle.name, "fingerprint": bundle.fingerprint,
                    "vocab_fingerprint": bundle.vocab.fingerprint()},
        "artifacts": artifacts,
        "build": {"version": __version__, "kernel_backend": kernels.BACKEND},
    }


def _model_for(cfg: ResolvedConfig, bundle):
    """Model named by the ``checkpoint`` key, or a fresh one for ``scorer = untrained``."""
    run = cfg.run
    if run.scorer == "untrained":
        ad.set_dtype(np.dtype(cfg.train.dtype))
        m = TGAP(cfg.model, bundle.num_entities, bundle.num_raw_relations, bundle.num_times, seed=cfg.train.seed)
        m.params.astype(ad.get_dtype())
        return m
    path = Path(run.checkpoint) if run.checkpoint else Path(run.out_dir) / "best.npz"
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found (set checkpoint, or scorer = untrained)")
    model, _, _ = load_checkpoint(path, bundle)
    ad.set_dtype(model.params["entity"].data.dtype)
    return model


def _metrics_doc(report, split, scorer):
    return dict(report.to_dict(), split=split, scorer=scorer)


def _run_evaluation(cfg: ResolvedConfig, bundle, model=None):
    run = cfg.run
    queries = bundle.split(run.split)
    if run.max_queries is not None:
        queries = queries[:run.max_queries]
    if run.scorer == "frequency":
        report, results = evaluate_scores(FrequencyBaseline(bundle), queries, bundle, cfg.train.filter_mode,
                                          cfg.train.eval_batch_size)
    else:
        model = model or _model_for(cfg, bundle)
        report, results = evaluate(model, bundle, run.split, cfg.train.filter_mode, cfg.train.eval_batch_size,
                                   seed=cfg.train.seed, queries=queries, workers=run.workers)
    return report, results


def _write_rankings(path: Path, bundle, results):
    v = bundle.vocab
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            h, rel, o, t = r.query
            fh.write(json.dumps({"head": v.entities[h], "relation": v.relation_name(rel), "answer": v.entities[o],
                                 "time": v.times[t], "rank": r.rank, "reached": r.reached}) + "\n")


# ------------------------------------------------------------------ commands


def cmd_prepare(cfg: ResolvedConfig):
    bundle = _load_bundle(cfg)
    out = Path(cfg.run.out_dir)
    stats = dataset_stats(bundle)
    paths = {"stats": _dump(out / "dataset_stats.json", stats)}
    data_dir = out / "data"
    write_records(data_dir, *(decode_records(bundle, q) for q in (bundle.train, bundle.raw_valid, bundle.raw_test)))
    paths["data"] = str(data_dir)
    _dump(out / "manifest.json", _manifest(cfg, bundle, "prepare", paths))
    for k, v in stats.items():
        print(f"{k:<28} {v}")
    return EXIT_OK


def cmd_train(cfg: ResolvedConfig):
    bundle = _load_bundle(cfg)
    out = Path(cfg.run.out_dir)
    resume = None
    if cfg.run.resume:
        resume = out / "last.npz"
        if not resume.is_file():
            raise FileNotFoundError(f"resume requested but {resume} does not exist")
    result = train(bundle, cfg.model, cfg.train, out_dir=out, resume=resume, workers=cfg.run.workers)
    report, results = _run_evaluation(cfg, bundle, result.model)
    paths = {"checkpoint": str(out / "best.npz"), "last_checkpoint": str(out / "last.npz"),
             "train_log": str(out / "train_log.jsonl"),
             "metrics": _dump(out / f"metrics_{cfg.run.split}.json", _metrics_doc(report, cfg.run.split, "model"))}
    if cfg.run.dump_rankings:
        paths["rankings"] = str(out / f"rankings_{cfg.run.split}.jsonl")
        _write_rankings(Path(paths["rankings"]), bundle, results)
    paths["manifest"] = _dump(out / "manifest.json", dict(
        _manifest(cfg, bundle, "train", paths), best_epoch=result.best_epoch,
        best_valid_hits1=result.best_valid_hits1))
    print(f"best epoch {result.best_epoch} (valid H@1 {result.best_valid_hits1:.4f})")
    print(f"{cfg.run.split}: {report.line()}")
    return EXIT_OK


def cmd_evaluate(cfg: ResolvedConfig):
    bundle = _load_bundle(cfg)
    out = Path(cfg.run.out_dir)
    report, results = _run_evaluation(cfg, bundle)
    stem = f"{cfg.run.split}_{cfg.run.scorer}"
    paths = {"metrics": _dump(out / f"metrics_{stem}.json", _metrics_doc(report, cfg.run.split, cfg.run.scorer))}
    if cfg.run.dump_rankings:
        paths["rankings"] = str(out / f"rankings_{stem}.jsonl")
        _write_rankings(Path(paths["rankings"]), bundle, results)
    _dump(out / f"manifest_evaluate_{stem}.json", _manifest(cfg, bundle, "evaluate", paths))
    print(report.line())
    return EXIT_OK


def _parse_query(bundle, text):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise ConfigError("query must be 'head,relation,tail-or-?,time'")
    v = bundle.vocab
    try:
        head = v.entity_id(parts[0])
        rel = v.relation_id(parts[1][:-3]) + bundle.num_raw_relations if parts[1].endswith("^-1") \
            else v.relation_id(parts[1])
        tail = -1 if parts[2] in ("?", "") else v.entity_id(parts[2])
        t = v.time_id(parts[3])
    except KeyError as exc:
        raise ConfigError(f"query refers to unknown name {exc}") from None
    return np.array([head, rel, tail, t])


def cmd_explain(cfg: ResolvedConfig):
    run = cfg.run
    bundle = _load_bundle(cfg)
    model = _model_for(cfg, bundle)
    out = Path(run.out_dir)
    if run.relation is not None:
        hist = displacement_histogram(model, bundle, run.relation, split=run.split, seed=cfg.train.seed,
                                      batch_size=cfg.train.eval_batch_size, max_queries=run.max_queries)
        safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in hist.relation)
        paths = hist.write(out / f"histogram_{safe}")
        if run.render:
            paths.append(hist.render(str(out / f"histogram_{safe}.png")))
        peak = int(hist.displacements[np.argmax(hist.mean_attention)])
        print(f"{hist.relation}: {hist.num_queries} queries, peak attention at displacement {peak}")
        print("\n".join(f"wrote {p}" for p in paths))
        return EXIT_OK
    if run.query is not None:
        query, tag = _parse_query(bundle, run.query), "query"
    else:
        queries = bundle.split(run.split)
        if not 0 <= run.query_index < len(queries):
            raise ConfigError(f"query_index {run.query_index} outside split {run.split!r} ({len(queries)} queries)")
        query, tag = queries[run.query_index], f"{run.split}_{run.query_index}"
    trace = trace_query(model, bundle, query, k=run.top_k, seed=cfg.train.seed)
    text = trace.to_text()
    out.mkdir(parents=True, exist_ok=True)
    (out / f"trace_{tag}.txt").write_text(text + "\n", encoding="utf-8")
    _dump(out / f"trace_{tag}.json", trace.to_dict())
    print(text)
    return EXIT_OK


def cmd_selftest(cfg: ResolvedConfig, quick=False):
    from .selftest import run_all
    results = run_all(quick=quick)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFTEST


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_args(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:        # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "selftest":
            return cmd_selftest(cfg, args.quick)
        return {"prepare": cmd_prepare, "train": cmd_train, "evaluate": cmd_evaluate,
                "explain": cmd_explain}[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetNotFound, DatasetError, FileNotFoundError, TrainingError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
