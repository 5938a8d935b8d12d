"""Mini-batch training with Adam, global-norm clipping and plateau LR decay."""
from __future__ import annotations

import io
import json
import logging
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import DatasetBundle
from .evaluate import evaluate
from .model import ModelConfig, TGAP

log = logging.getLogger(__name__)

TRAIN_STREAM = 0
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 5e-4
    lr_reduction_factor: float = 0.1
    plateau_patience: int = 1
    grad_clip_norm: float = 3.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"
    train_reciprocal: bool = True
    mask_query_edges: bool = True
    eval_batch_size: int = 16
    valid_limit: int | None = None
    filter_mode: str = "time"

    def __post_init__(self):
        for name in ("epochs", "batch_size", "learning_rate", "grad_clip_norm", "eval_batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lr_reduction_factor < 1:
            raise ValueError("lr_reduction_factor must be in (0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(params.grad(n).astype(np.float64) ** 2)) for n in params.names()))


def clip_gradients(params, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the scale factor applied (1.0 when no clipping happened).
    """
    norm = global_grad_norm(params)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad *= factor
    return factor


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, params, lr: float):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for n, p in params.items():
            g = params.grad(n)
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


class ReduceOnPlateau:
    """Multiply the LR by ``factor`` once the monitored score stalls for more than ``patience`` epochs."""

    def __init__(self, lr, factor=0.1, patience=1):
        self.lr, self.factor, self.patience = lr, factor, patience
        self.best = -math.inf
        self.bad_epochs = 0

    def step(self, score: float) -> bool:
        if score > self.best:
            self.best = score
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
            return True
        return False

    def state(self):
        return {"lr": self.lr, "best": self.best, "bad_epochs": self.bad_epochs}


# ------------------------------------------------------------------ checkpoints


def _write_npz(path, arrays: dict):
    """npz with fixed zip timestamps so identical contents give identical bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def save_checkpoint(path, model: TGAP, meta: dict, optimizer: Adam | None = None):
    arrays = {f"param/{k}": v for k, v in model.params.state_dict().items()}
    if optimizer is not None:
        arrays.update({f"adam_m/{k}": v for k, v in optimizer.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in optimizer.v.items()})
        meta = dict(meta, adam_step=optimizer.step_count)
    meta = dict(meta, version=CHECKPOINT_VERSION, model_config=model.cfg.to_dict(),
                num_entities=model.num_entities, num_raw_relations=model.num_raw_relations,
                num_times=model.num_times)
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    _write_npz(path, arrays)


def load_checkpoint(path, bundle: DatasetBundle | None = None):
    """Rebuild a model (and optimizer state if stored) from a checkpoint file."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        arrays = {k: z[k] for k in z.files if k != "meta"}
    if bundle is not None:
        fp = meta.get("vocab_fingerprint")
        if fp and fp != bundle.vocab.fingerprint():
            raise ValueError("checkpoint vocabulary does not match the dataset")
        if meta["num_entities"] != bundle.num_entities:
            raise ValueError("checkpoint entity count does not match the dataset")
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = TGAP(cfg, meta["num_entities"], meta["num_raw_relations"], meta["num_times"])
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    model.params.astype(next(iter(params.values())).dtype)
    model.params.load_state_dict(params)
    opt = None
    if "adam_step" in meta:
        opt = Adam(model.params)
        opt.step_count = meta["adam_step"]
        opt.m = {k[len("adam_m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")}
        opt.v = {k[len("adam_v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")}
    return model, meta, opt


# ---------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: TGAP
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_valid_hits1: float = -1.0
    checkpoint: str | None = None


def _dump_batch(path, batch, epoch, loss):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"epoch": epoch, "loss": repr(loss), "queries": np.asarray(batch).tolist()}, fh)


def train_batch(model: TGAP, graph, batch, *, seed, keys, banned, clip, optimizer, lr):
    model.params.zero_grad()
    try:
        with ad.Tape() as tape:
            res = model.forward(graph, batch, seed=seed, keys=keys, banned=banned)
    except FloatingPointError:
        return math.nan
    loss = float(res.loss.data)
    if not math.isfinite(loss):
        return loss
    tape.backward(res.loss)
    clip_gradients(model.params, clip)
    optimizer.step(model.params, lr)
    return loss


def train(bundle: DatasetBundle, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None,
          model: TGAP | None = None, resume=None, callback=None, workers: int = 1) -> TrainResult:
    """Train and keep the parameters of the epoch with the best validation Hits@1.

    With ``out_dir`` the best checkpoint (``best.npz``), the last one
    (``last.npz``) and a JSON-lines log (``train_log.jsonl``) are written there.
    ``resume`` names a ``last.npz``; training then continues after its epoch
    with the stored optimizer, scheduler and best-epoch bookkeeping.
    """
    ad.set_dtype(np.dtype(train_cfg.dtype))
    optimizer, start_epoch, resumed = None, 1, None
    if resume is not None:
        model, resumed, optimizer = load_checkpoint(resume, bundle)
        start_epoch = resumed["epoch"] + 1
    if model is None:
        model = TGAP(model_cfg, bundle.num_entities, bundle.num_raw_relations, bundle.num_times,
                     seed=train_cfg.seed)
    model.params.astype(ad.get_dtype())
    optimizer = optimizer or Adam(model.params, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    sched = ReduceOnPlateau(train_cfg.learning_rate, train_cfg.lr_reduction_factor, train_cfg.plateau_patience)
    if resumed is not None:
        sched.lr, sched.best, sched.bad_epochs = (resumed["scheduler"][k] for k in ("lr", "best", "bad_epochs"))
    graph = bundle.graph
    queries = bundle.split("train") if train_cfg.train_reciprocal else bundle.train
    valid = bundle.valid
    if train_cfg.valid_limit is not None and len(valid) > train_cfg.valid_limit:
        pick = np.random.default_rng([train_cfg.seed, 7]).choice(len(valid), train_cfg.valid_limit, replace=False)
        valid = valid[np.sort(pick)]
    out_dir = Path(out_dir) if out_dir else None
    log_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "a" if start_epoch > 1 else "w", encoding="utf-8")
    meta = {"vocab_fingerprint": bundle.vocab.fingerprint(), "dataset": bundle.name,
            "train_config": train_cfg.to_dict()}
    result = TrainResult(model)
    best_state = model.params.state_dict()
    if resumed is not None:
        result.best_epoch, result.best_valid_hits1 = resumed["best_epoch"], resumed["best_valid_hits1"]
        best_path = Path(resume).with_name("best.npz")
        if best_path.exists():
            best_state = load_checkpoint(best_path)[0].params.state_dict()
    try:
        for epoch in range(start_epoch, train_cfg.epochs + 1):
            t0 = time.perf_counter()
            perm = np.random.default_rng([train_cfg.seed, TRAIN_STREAM, epoch]).permutation(len(queries))
            losses = []
            for start in range(0, len(perm), train_cfg.batch_size):
                idx = perm[start:start + train_cfg.batch_size]
                batch = queries[idx]
                banned = None
                if train_cfg.mask_query_edges:
                    banned = [graph.quad_edges(*q) for q in batch.tolist()]
                keys = [(TRAIN_STREAM, epoch, int(i)) for i in idx]
                loss = train_batch(model, graph, batch, seed=train_cfg.seed, keys=keys, banned=banned,
                                   clip=train_cfg.grad_clip_norm, optimizer=optimizer, lr=sched.lr)
                if not math.isfinite(loss):
                    dump = (out_dir or Path(".")) / f"nan_batch_epoch{epoch}.json"
                    _dump_batch(dump, batch, epoch, loss)
                    raise TrainingError(f"non-finite loss at epoch {epoch}; batch written to {dump}")
                losses.append(loss)
            report, _ = evaluate(model, bundle, "valid", train_cfg.filter_mode, train_cfg.eval_batch_size,
                                 seed=train_cfg.seed, queries=valid, workers=workers)
            lr_used = sched.lr
            reduced = sched.step(report.hits1)
            entry = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr_used, "lr_reduced": reduced,
                     "valid": {k: getattr(report, k) for k in ("mrr", "hits1", "hits3", "hits10",
                                                               "unreached_rate")},
                     "seconds": round(time.perf_counter() - t0, 3)}
            result.history.append(entry)
            log.info("epoch %d loss %.4f valid %s lr %.2e", epoch, entry["loss"], report.line(), lr_used)
            if report.hits1 > result.best_valid_hits1:
                result.best_valid_hits1 = report.hits1
                result.best_epoch = epoch
                best_state = model.params.state_dict()
                if out_dir:
                    save_checkpoint(out_dir / "best.npz", model, dict(meta, epoch=epoch, valid=entry["valid"]))
            if out_dir:
                save_checkpoint(out_dir / "last.npz", model,
                                dict(meta, epoch=epoch, lr=sched.lr, scheduler=sched.state(),
                                     best_epoch=result.best_epoch, best_valid_hits1=result.best_valid_hits1),
                                optimizer)
                log_fh.write(json.dumps({k: v for k, v in entry.items() if k != "seconds"}, sort_keys=True)
                             + "\n")
                log_fh.flush()
            if callback is not None and callback(epoch, entry, model):
                break
    finally:
        if log_fh:
            log_fh.close()
    model.params.load_state_dict(best_state)
    if out_dir:
        result.checkpoint = str(out_dir / "best.npz")
    return result
