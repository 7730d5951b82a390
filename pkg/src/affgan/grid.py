"""Run every (model, dataset) cell of an ablation grid and collect best scores."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import statistics
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import config as cfgmod
from .data import dataset_from_csv, load_data_config
from .metrics import MetricsContext
from .models import ModelSpec
from .training import Corpus, RunResult, TrainConfig, train

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ("model", "dataset", "best_fid", "best_kid", "status")


def file_hash(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class ExperimentGrid:
    models: list[tuple[str, str]]
    datasets: dict[str, str]
    config: cfgmod.Config
    output_dir: Path
    workers: int = 1
    repeats: int = 1

    @property
    def cells(self) -> list[tuple[str, str, str]]:
        return [(fam, var, ds) for fam, var in self.models for ds in self.datasets]

    @classmethod
    def from_config(cls, cfg: cfgmod.Config, output_dir: str | os.PathLike) -> "ExperimentGrid":
        models = cfgmod.parse_models(cfg["grid"].get("models", "")) or list(cfgmod.ALL_MODELS)
        datasets = cfgmod.parse_datasets(cfg["grid"].get("datasets", ""))
        if not datasets:
            raise cfgmod.ConfigError("[grid] datasets: at least one dataset is required")
        workers = cfgmod._convert("grid", "workers", cfg["grid"].get("workers", "1"), int)
        repeats = cfgmod._convert("grid", "repeats", cfg["grid"].get("repeats", "1"), int)
        if repeats < 1 or workers < 1:
            raise cfgmod.ConfigError("[grid] workers and repeats must be at least 1")
        return cls(models, datasets, cfg, Path(output_dir), workers, repeats)


@dataclass
class ScoreRow:
    model: str
    dataset: str
    best_fid: float
    best_kid: float
    status: str = "completed"


@dataclass
class ScoreTable:
    rows: list[ScoreRow] = field(default_factory=list)

    def sorted_rows(self) -> list[ScoreRow]:
        return sorted(self.rows, key=lambda r: (r.model, r.dataset))

    def write_csv(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SCORE_COLUMNS)
            for r in self.sorted_rows():
                w.writerow([r.model, r.dataset, repr(float(r.best_fid)), repr(float(r.best_kid)), r.status])
        return path

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "ScoreTable":
        with open(path, newline="") as fh:
            rows = [ScoreRow(r["model"], r["dataset"], float(r["best_fid"]), float(r["best_kid"]),
                             r["status"]) for r in csv.DictReader(fh)]
        return cls(rows)


def cell_dir(root: Path, spec_id: str, dataset_id: str, repeat: int | None = None) -> Path:
    name = f"{spec_id}__{dataset_id}"
    return root / "cells" / (name if repeat is None else f"{name}/rep{repeat}")


_CORPUS_CACHE: dict[tuple[str, int, str], Corpus] = {}


def _corpus(dataset_path: str, image_size: int, data_cfg: str, dataset_id: str) -> Corpus:
    key = (dataset_path, image_size, data_cfg)
    if key not in _CORPUS_CACHE:
        _, cmap = load_data_config(data_cfg or None)
        ds = dataset_from_csv(dataset_path, cmap)
        _CORPUS_CACHE[key] = Corpus.from_dataset(ds, image_size, dataset_id)
    return _CORPUS_CACHE[key]


def run_cell(family: str, variant: str, dataset_id: str, dataset_path: str, cfg: cfgmod.Config,
             out_dir: Path, seed_offset: int = 0, resume: bool = False) -> RunResult:
    """Train one cell; failures are captured in the returned RunResult."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_id = f"{family}:{variant}"
    try:
        cfg = cfgmod.apply_overrides(cfg, {"model": {"family": family, "disc_variant": variant}})
        train_cfg = cfgmod.train_config(cfg)
        if seed_offset:
            train_cfg = TrainConfig(**{**train_cfg.to_dict(), "seed": train_cfg.seed + seed_offset})
        spec = cfgmod.model_spec(cfg, num_classes=13)
        model_id = spec.model_id
        if resume and (out_dir / "run_result.json").exists():
            done = RunResult.load(out_dir / "run_result.json")
            if done.status == "completed":
                return done
        metrics = MetricsContext(cfgmod.extractor(cfg))
        corpus = _corpus(dataset_path, spec.image_size, cfg["data"].get("config", ""), dataset_id)
        _write_run_manifest(out_dir, spec, train_cfg, cfg, dataset_path)
        cfgmod.write_config(cfg, out_dir / "config.resolved.ini")
        result = train(spec, corpus, train_cfg, metrics, out_dir=out_dir, resume=resume,
                       dataset_id=dataset_id)
        result.state = None
        return result
    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
        logger.error("cell %s / %s failed: %s", model_id, dataset_id, exc)
        result = RunResult(model_id, dataset_id, status="failed", error=f"{type(exc).__name__}: {exc}")
        (out_dir / "error.txt").write_text(traceback.format_exc())
        result.save(out_dir / "run_result.json")
        return result


def _write_run_manifest(out_dir: Path, spec: ModelSpec, train_cfg: TrainConfig,
                        cfg: cfgmod.Config, dataset_path: str) -> None:
    manifest = {
        "spec": spec.to_dict(),
        "config": train_cfg.to_dict(),
        "metrics": dict(cfg["metrics"]),
        "dataset": os.path.basename(dataset_path),
        "dataset_sha256": file_hash(dataset_path),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _job(args):
    import torch

    torch.set_num_threads(1)
    return run_cell(*args)


def _cell_id(family: str, variant: str) -> str:
    return ModelSpec(family, variant, num_classes=13 if family.upper() in ("CGAN", "ACGAN") else 0,
                     ).model_id


def run_grid(grid: ExperimentGrid, resume: bool = False) -> ScoreTable:
    """Run all cells (in a process pool when ``workers > 1``) and write scores.csv."""
    root = grid.output_dir
    root.mkdir(parents=True, exist_ok=True)
    cfgmod.write_config(grid.config, root / "config.resolved.ini")
    jobs = []
    for fam, var, ds_id in grid.cells:
        try:
            mid = _cell_id(fam, var)
        except ValueError:
            mid = f"{fam}:{var}".lower()
        for rep in range(grid.repeats):
            d = cell_dir(root, mid, ds_id, rep if grid.repeats > 1 else None)
            jobs.append(((mid, ds_id), (fam, var, ds_id, grid.datasets[ds_id], grid.config, d, rep, resume)))

    if grid.workers > 1:
        with ProcessPoolExecutor(max_workers=grid.workers) as pool:
            results = list(pool.map(_job, [j for _, j in jobs]))
    else:
        results = [run_cell(*j) for _, j in jobs]

    grouped: dict[tuple[str, str], list[RunResult]] = {}
    for (key, _), res in zip(jobs, results):
        grouped.setdefault(key, []).append(res)
    table = ScoreTable()
    for (mid, ds_id), runs in grouped.items():
        ok = [r for r in runs if r.status == "completed" and r.evaluations]
        if not ok:
            table.rows.append(ScoreRow(mid, ds_id, math.nan, math.nan, "failed"))
            continue
        table.rows.append(ScoreRow(mid, ds_id, statistics.median(r.best_fid for r in ok),
                                   statistics.median(r.best_kid for r in ok),
                                   "completed" if len(ok) == len(runs) else "partial"))
    table.write_csv(root / "scores.csv")
    return table
