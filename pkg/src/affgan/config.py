"""Sectioned key-value experiment configs.

Example::

    [experiment]
    format_version = 1
    seed = 0

    [model]
    family = DCGAN
    disc_variant = Dropout
    image_size = 64
    width = 64

    [train]
    epochs = 100
    eval_every_epochs = 5
    adam_betas = 0.5, 0.999

    [metrics]
    extractor = stub          ; or torchscript
    weights =                 ; TorchScript file for the torchscript extractor
    feature_dim = 64

    [data]
    dataset = dataset.csv     ; serialized dataset (affgan dataset build)
    config =                  ; optional scales / category map file

    [grid]
    models = DCGAN:BatchNorm, DCGAN:Dropout
    datasets = affective=affective/dataset.csv, augmented=augmented/manifest.csv
    workers = 1
    repeats = 1

Flags given on the command line override file values. The resolved config is
written next to every run's outputs.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from pathlib import Path
from typing import Any, Mapping

from .metrics import make_extractor
from .models import ModelSpec
from .training import TrainConfig

FORMAT_VERSION = 1

SECTIONS = ("experiment", "model", "train", "metrics", "data", "grid")

DEFAULTS: dict[str, dict[str, str]] = {
    "experiment": {"format_version": str(FORMAT_VERSION), "seed": "0"},
    "model": {"family": "DCGAN", "disc_variant": "BatchNorm", "latent_dim": "100",
              "image_size": "64", "channels": "3", "width": "64", "pagan_max_level": "2"},
    "train": {},
    "metrics": {"extractor": "stub", "weights": "", "feature_dim": "", "input_size": "299"},
    "data": {"dataset": "", "config": ""},
    "grid": {"models": "", "datasets": "", "workers": "1", "repeats": "1"},
}


class ConfigError(ValueError):
    pass


Config = dict[str, dict[str, str]]


def read_config(path: str | os.PathLike | None) -> Config:
    cfg: Config = {s: dict(v) for s, v in DEFAULTS.items()}
    if path is None:
        return cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    if not parser.read(path, encoding="utf-8"):
        raise ConfigError(f"config file not found: {path}")
    base = Path(path).parent
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}] in {path}")
        for key, value in parser[section].items():
            cfg[section][key] = value.strip()
    version = cfg["experiment"].get("format_version", "")
    if version != str(FORMAT_VERSION):
        raise ConfigError(f"[experiment] format_version: expected {FORMAT_VERSION}, got {version!r}")
    # dataset paths in a file are relative to that file
    for key in ("dataset", "config"):
        val = cfg["data"].get(key)
        if val and not Path(val).is_absolute():
            cfg["data"][key] = str(base / val)
    if cfg["grid"].get("datasets"):
        entries = []
        for ident, p in parse_datasets(cfg["grid"]["datasets"]).items():
            entries.append(f"{ident}={p if Path(p).is_absolute() else base / p}")
        cfg["grid"]["datasets"] = ", ".join(entries)
    if cfg["metrics"].get("weights") and not Path(cfg["metrics"]["weights"]).is_absolute():
        cfg["metrics"]["weights"] = str(base / cfg["metrics"]["weights"])
    return cfg


def apply_overrides(cfg: Config, overrides: Mapping[str, Mapping[str, Any]]) -> Config:
    out = {s: dict(v) for s, v in cfg.items()}
    for section, values in overrides.items():
        for key, value in values.items():
            if value is None:
                continue
            if isinstance(value, (tuple, list)):
                value = ", ".join(str(v) for v in value)
            out[section][key] = str(value)
    return out


def write_config(cfg: Config, path: str | os.PathLike) -> Path:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section in SECTIONS:
        if section in cfg:
            parser[section] = {k: v for k, v in sorted(cfg[section].items())}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
    return path


def _convert(section: str, key: str, text: str, typ) -> Any:
    try:
        if typ in ("int", int):
            return int(text)
        if typ in ("float", float):
            return float(text)
        if typ in ("int | None",):
            return None if text in ("", "auto", "None") else int(text)
        if typ in ("tuple[float, float]",):
            parts = [float(p) for p in text.split(",")]
            if len(parts) != 2:
                raise ValueError("expected two comma-separated numbers")
            return tuple(parts)
        return text
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r} ({exc})") from None


def _typed(section: str, values: Mapping[str, str], cls) -> dict:
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, text in values.items():
        if key not in fields:
            raise ConfigError(f"[{section}] {key}: unknown key; expected one of {sorted(fields)}")
        if text == "":
            continue
        out[key] = _convert(section, key, text, fields[key])
    return out


def model_spec(cfg: Config, num_classes: int | None = None) -> ModelSpec:
    """Build the ModelSpec; conditional families take ``num_classes`` from the data."""
    values = _typed("model", {k: v for k, v in cfg["model"].items() if k != "num_classes"}, ModelSpec)
    fam = values.get("family", "DCGAN").upper().replace("-", "_")
    if fam in ("CGAN", "ACGAN"):
        values["num_classes"] = num_classes if num_classes is not None else \
            int(cfg["model"].get("num_classes", 13))
    else:
        values["num_classes"] = 0
    try:
        return ModelSpec(**values)
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from None


def train_config(cfg: Config) -> TrainConfig:
    values = _typed("train", cfg["train"], TrainConfig)
    values.setdefault("seed", _convert("experiment", "seed", cfg["experiment"].get("seed", "0"), int))
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from None


def extractor(cfg: Config):
    m = cfg["metrics"]
    dim = _convert("metrics", "feature_dim", m["feature_dim"], int) if m.get("feature_dim") else None
    size = _convert("metrics", "input_size", m.get("input_size", "299"), int)
    try:
        return make_extractor(m.get("extractor", "stub"), m.get("weights") or None, dim, size)
    except (ValueError, FileNotFoundError) as exc:
        raise ConfigError(f"[metrics] {exc}") from None


def parse_models(text: str) -> list[tuple[str, str]]:
    cells = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise ConfigError(f"[grid] models: expected FAMILY:VARIANT, got {item!r}")
        fam, var = (s.strip() for s in item.split(":", 1))
        cells.append((fam, var))
    return cells


def parse_datasets(text: str) -> dict[str, str]:
    out = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ConfigError(f"[grid] datasets: expected ID=PATH, got {item!r}")
        ident, path = (s.strip() for s in item.split("=", 1))
        if ident in out:
            raise ConfigError(f"[grid] datasets: duplicate id {ident!r}")
        out[ident] = path
    return out


ALL_MODELS = [(f, v) for f in ("DCGAN", "CGAN", "PAGAN", "WGAN_GP")
              for v in ("BatchNorm", "Dropout", "SpectralNorm")]
