"""Experiment configuration: a flat ``key = value`` file plus flag overrides.

Example file::

    dataset = data/blobs.csv
    split = 0.5, 0.25, 0.25
    attack = 2>1:200
    defense = bic
    seed = 3

A leading ``[experiment]`` section header is optional.  ``#`` and ``;``
start comments.  Values given on the command line win over file values,
which win over the defaults below.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

DEFENSES = ("bic", "knn", "svd", "none")
VICTIMS = ("logistic", "hinge")
SECTION = "experiment"


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    dataset: Optional[str] = None
    format: Optional[str] = None
    n_classes: Optional[int] = None
    split: str = "0.5,0.25,0.25"
    attack: str = ""
    attack_index: int = 0
    attack_budget: int = 60
    defense: str = "bic"
    victim: str = "logistic"
    seed: int = 0
    m_max: int = 25
    knn_k: int = 10
    knn_distance: str = "euclidean"
    # a number, or "truth" for the true poison fraction of the training set
    svd_epsilon: str = "0.1"
    svd_beta: int = 2
    per_step_accuracy: bool = False
    threads: int = 1
    out_dir: str = "out"

    @property
    def fractions(self):
        try:
            parts = tuple(float(v) for v in self.split.split(","))
        except ValueError:
            raise ConfigError(f"split {self.split!r} must be three comma-separated numbers") from None
        if len(parts) != 3:
            raise ConfigError(f"split {self.split!r} must have three fractions")
        return parts

    @property
    def n_jobs(self) -> int:
        return (os.cpu_count() or 1) if self.threads <= 0 else self.threads

    def validate(self, need_dataset=True) -> "ExperimentConfig":
        if need_dataset:
            if not self.dataset:
                raise ConfigError("no dataset given")
            if not Path(self.dataset).is_file():
                raise ConfigError(f"dataset {self.dataset!r} does not exist")
        if self.format not in (None, "csv", "sparse"):
            raise ConfigError(f"format must be csv or sparse, got {self.format!r}")
        if self.defense not in DEFENSES:
            raise ConfigError(f"defense must be one of {DEFENSES}, got {self.defense!r}")
        if self.victim not in VICTIMS:
            raise ConfigError(f"victim must be one of {VICTIMS}, got {self.victim!r}")
        if self.attack and self.attack_index:
            raise ConfigError("give either attack or attack_index, not both")
        if self.attack_index < 0 or self.attack_budget < 0:
            raise ConfigError("attack_index and attack_budget must be non-negative")
        if self.m_max < 1 or self.knn_k < 1 or self.svd_beta < 1:
            raise ConfigError("m_max, knn_k and svd_beta must be positive")
        if self.svd_epsilon != "truth":
            try:
                float(self.svd_epsilon)
            except ValueError:
                raise ConfigError("svd_epsilon must be a number or 'truth'") from None
        self.fractions
        return self

    def to_dict(self):
        return asdict(self)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def coerce(key: str, value):
    """Convert a raw string value to the field's type."""
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(value, str):
        return value
    kind = _TYPES[key]
    try:
        if kind == "int" or kind == "Optional[int]":
            return int(value)
        if kind == "bool":
            return _parse_bool(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return value.strip()


def read_config_file(path) -> dict:
    text = Path(path).read_text()
    if not text.lstrip().startswith("["):
        text = f"[{SECTION}]\n" + text
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    values = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            key = key.replace("-", "_")
            values[key] = coerce(key, value)
    base = Path(path).parent
    # relative data paths are resolved against the config file
    if values.get("dataset") and not Path(values["dataset"]).is_absolute():
        values["dataset"] = str(base / values["dataset"])
    return values


def build_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Defaults, then file values, then non-``None`` overrides."""
    values = read_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = coerce(key, value)
    return ExperimentConfig(**values)
