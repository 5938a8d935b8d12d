"""Flat run configuration: defaults, dataset presets, key=value files, overrides.

Resolution order, lowest to highest precedence:

1. built-in defaults (model, training and run fields below)
2. the preset of the selected dataset (``PRESETS``)
3. values from a config file (``key = value`` lines, or a run manifest's
   ``config`` object)
4. command-line overrides

The dataset name itself follows the same order, so a preset is chosen from
the final ``dataset`` value before file and flag values are layered on top.
"""
from __future__ import annotations

import json
import typing
from dataclasses import MISSING, dataclass, fields
from pathlib import Path

from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "synthetic-rule"
    data_dir: str | None = None
    granularity: str | None = None
    out_dir: str = "runs/default"
    train_limit: int | None = None
    unseen_split: bool = False
    workers: int = 1
    split: str = "test"
    checkpoint: str | None = None
    dump_rankings: bool = False
    scorer: str = "model"
    query: str | None = None
    query_index: int = 0
    top_k: int = 5
    relation: str | None = None
    max_queries: int | None = None
    render: bool = False
    resume: bool = False


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "run": RunConfig}

_COMMON = {"steps": 3, "dim": 100, "heads": 5, "epochs": 10, "learning_rate": 5e-4, "lr_reduction_factor": 0.1}
PRESETS = {
    "icews14": dict(_COMMON, batch_size=16, grad_clip_norm=3.0, max_core_nodes=100, edges_per_core=500,
                    edges_per_step=500, granularity="day"),
    "icews05-15": dict(_COMMON, batch_size=8, grad_clip_norm=3.0, max_core_nodes=10, edges_per_core=100,
                       edges_per_step=100, granularity="day"),
    "wikidata11k": dict(_COMMON, batch_size=8, grad_clip_norm=5.0, max_core_nodes=50, edges_per_core=200,
                        edges_per_step=200, granularity="year"),
    "synthetic-rule": {"dim": 32, "heads": 4, "plateau_patience": 10, "epochs": 30, "granularity": "day"},
    "synthetic-random": {"dim": 8, "heads": 2, "max_core_nodes": 3, "edges_per_core": 4, "edges_per_step": 3,
                         "steps": 2, "epochs": 5, "granularity": "day"},
}


def _field_types():
    out = {}
    for section, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            if f.name in out:
                raise RuntimeError(f"duplicate config key {f.name}")
            default = f.default if f.default is not MISSING else f.default_factory()
            out[f.name] = (section, hints[f.name], default)
    return out


KEYS = _field_types()


def valid_keys() -> list[str]:
    return sorted(KEYS)


def _unknown(key):
    return ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")


def _base_type(tp):
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    return (args[0], True) if args else (tp, False)


def parse_value(key: str, raw):
    """Convert a raw (string or JSON) value to the declared type of ``key``."""
    if key not in KEYS:
        raise _unknown(key)
    tp, optional = _base_type(KEYS[key][1])
    if not isinstance(raw, str):
        if raw is None and optional:
            return None
        if tp is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, tp):
            return raw
        raise ConfigError(f"{key}: expected {tp.__name__}, got {raw!r}")
    text = raw.strip()
    if optional and text.lower() in ("none", "null", ""):
        return None
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return tp(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp.__name__}") from None


def read_config_file(path) -> dict:
    """``key = value`` lines (``#`` comments), or JSON with a ``config`` object."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        items = doc.get("config", doc)
        return {k: parse_value(k, v) for k, v in items.items()}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def write_config_file(path, values: dict):
    lines = [f"{k} = {'none' if v is None else v}" for k, v in sorted(values.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class ResolvedConfig:
    model: ModelConfig
    train: TrainConfig
    run: RunConfig

    def flat(self) -> dict:
        out = {}
        for obj in (self.model, self.train, self.run):
            out.update({f.name: getattr(obj, f.name) for f in fields(obj)})
        return out


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> ResolvedConfig:
    file_values = dict(file_values or {})
    overrides = dict(overrides or {})
    for k in list(file_values) + list(overrides):
        if k not in KEYS:
            raise _unknown(k)
    values = {k: default for k, (_, _, default) in KEYS.items()}
    dataset = overrides.get("dataset", file_values.get("dataset", values["dataset"]))
    values.update(PRESETS.get(dataset, {}))
    values.update(file_values)
    values.update(overrides)
    parts = {s: {} for s in SECTIONS}
    for k, v in values.items():
        parts[KEYS[k][0]][k] = v
    try:
        return ResolvedConfig(ModelConfig(**parts["model"]), TrainConfig(**parts["train"]),
                              RunConfig(**parts["run"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
