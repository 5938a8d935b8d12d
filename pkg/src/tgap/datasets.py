"""Named datasets: benchmark directories on disk and generated synthetic sets."""
from __future__ import annotations

import os
from pathlib import Path

from .data import DatasetBundle, load_dataset, make_unseen_timestamp_split, subset_train
from .synthetic import random_bundle, rule_bundle

BENCHMARKS = {
    "icews14": "day",
    "icews05-15": "day",
    "wikidata11k": "year",
}

DOWNLOAD_HELP = {
    "icews14": ("ICEWS14 is distributed with the TA-DistMult temporal KG release (the 'mmkb' repository, "
                "folder TemporalKGs/icews14)."),
    "icews05-15": ("ICEWS05-15 is distributed with the TA-DistMult temporal KG release (the 'mmkb' "
                   "repository, folder TemporalKGs/icews05-15)."),
    "wikidata11k": ("Wikidata11k is the Wikidata subset with occurSince/occurUntil modifiers used by "
                    "several TKG completion papers; obtain it from one of their public releases."),
}

BUILTIN = {
    "synthetic-rule": lambda seed: rule_bundle(500, seed=seed),
    "synthetic-random": lambda seed: random_bundle(seed=seed),
}


class DatasetNotFound(FileNotFoundError):
    pass


def data_root(data_dir: str | None) -> Path:
    return Path(data_dir or os.environ.get("TGAP_DATA", "data"))


def missing_message(name: str, directory: Path) -> str:
    hint = DOWNLOAD_HELP.get(name, "Provide a directory with train/valid/test files.")
    return (f"dataset {name!r} not found at {directory}.\n{hint}\n"
            f"Expected layout: {directory}/train.txt, valid.txt, test.txt with tab-separated lines "
            f"'head<TAB>relation<TAB>tail<TAB>time' (an optional fifth occurSince/occurUntil column is "
            f"merged into the relation). Set data_dir (or TGAP_DATA) to the parent directory.")


def load_named(name: str, data_dir: str | None = None, granularity: str | None = None, seed: int = 0,
               train_limit: int | None = None, unseen_split: bool = False) -> DatasetBundle:
    """Load a builtin synthetic set, a named benchmark below ``data_dir``, or a directory path."""
    if name in BUILTIN:
        bundle = BUILTIN[name](seed)
    else:
        path = Path(name)
        if not path.is_dir():
            path = data_root(data_dir) / name
        if not path.is_dir():
            raise DatasetNotFound(missing_message(name, path))
        bundle = load_dataset(path, granularity or BENCHMARKS.get(name, "day"), name=name)
    if unseen_split:
        bundle = make_unseen_timestamp_split(bundle, seed)
    if train_limit is not None:
        bundle = subset_train(bundle, train_limit)
    return bundle
