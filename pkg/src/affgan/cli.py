"""``affgan`` command line: datasets, training, grids, reports, classification."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod

logger = logging.getLogger("affgan")


def _ensure_fresh(out: Path, resume: bool) -> None:
    if out.exists() and any(out.iterdir()) and not resume:
        raise SystemExit(f"output directory {out} is not empty; pass --resume or choose another --out")
    out.mkdir(parents=True, exist_ok=True)


def _write_counts(path: Path, header: tuple[str, str], counts: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k, v in counts.items():
            w.writerow([k, v])


# --- dataset ---------------------------------------------------------------

def cmd_dataset_build(args) -> int:
    from .data import build_dataset, dataset_to_csv, histogram_report, load_data_config

    scales, cmap = load_data_config(args.config)
    ds = build_dataset(args.manifest, scales, cmap, check_files=not args.no_check)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset_to_csv(ds, out / "dataset.csv")
    _write_counts(out / "quadrants.csv", ("quadrant", "count"), ds.quadrant_counts())
    _write_counts(out / "categories.csv", ("category", "count"), dict(sorted(ds.category_counts().items())))
    (out / "report.md").write_text(histogram_report(ds, "Affective dataset"))
    print(f"{len(ds)} records -> {out / 'dataset.csv'}")
    return 0


def cmd_dataset_augment(args) -> int:
    from .augment import augment_dataset
    from .data import dataset_from_csv, load_data_config

    _, cmap = load_data_config(args.config)
    ds = dataset_from_csv(args.dataset, cmap)
    aug = augment_dataset(ds, args.out)
    print(f"{len(ds)} -> {len(aug)} records -> {Path(args.out) / 'manifest.csv'}")
    return 0


def cmd_dataset_fixture(args) -> int:
    from .data import synth_fixture

    path = synth_fixture(args.n, args.seed, args.out, image_size=args.image_size)
    print(f"wrote {args.n} images and {path}")
    return 0


# --- training ---------------------------------------------------------------

def _train_overrides(args) -> dict:
    return {
        "experiment": {"seed": args.seed},
        "model": {"family": args.family, "disc_variant": args.variant, "width": args.width,
                  "image_size": args.image_size, "latent_dim": args.latent_dim},
        "train": {"epochs": args.epochs, "eval_every_epochs": args.eval_every,
                  "batch_size": args.batch_size, "metric_batch": args.metric_batch,
                  "seed": args.seed},
        "metrics": {"extractor": args.extractor, "weights": args.extractor_weights,
                    "feature_dim": args.feature_dim},
        "data": {"dataset": args.dataset},
    }


def cmd_train(args) -> int:
    from .data import dataset_from_csv, load_data_config
    from .grid import _write_run_manifest
    from .metrics import MetricsContext
    from .training import Corpus, train

    cfg = cfgmod.apply_overrides(cfgmod.read_config(args.config), _train_overrides(args))
    dataset_path = cfg["data"].get("dataset")
    if not dataset_path:
        raise cfgmod.ConfigError("[data] dataset: no dataset given (use --dataset or the config file)")
    _, cmap = load_data_config(cfg["data"].get("config") or None)
    spec = cfgmod.model_spec(cfg, num_classes=len(cmap.categories))
    train_cfg = cfgmod.train_config(cfg)
    metrics = MetricsContext(cfgmod.extractor(cfg))
    out = Path(args.out)
    _ensure_fresh(out, args.resume)
    cfgmod.write_config(cfg, out / "config.resolved.ini")
    _write_run_manifest(out, spec, train_cfg, cfg, dataset_path)
    ds = dataset_from_csv(dataset_path, cmap)
    corpus = Corpus.from_dataset(ds, spec.image_size, Path(dataset_path).parent.name or "dataset")
    result = train(spec, corpus, train_cfg, metrics, out_dir=out, resume=args.resume,
                   dataset_id=args.dataset_id or corpus.name)
    print(f"{spec.model_id}: best FID {result.best_fid:.4f}, best KID {result.best_kid:.6f}")
    return 0


def cmd_grid(args) -> int:
    from .grid import ExperimentGrid, run_grid

    overrides = {"experiment": {"seed": args.seed}, "train": {"seed": args.seed},
                 "grid": {"workers": args.workers, "repeats": args.repeats}}
    if args.dry_run:
        overrides["train"].update({"epochs": 1, "eval_every_epochs": 1})
        overrides["metrics"] = {"extractor": "stub", "weights": "", "feature_dim": 64}
    cfg = cfgmod.apply_overrides(cfgmod.read_config(args.config), overrides)
    out = Path(args.out)
    _ensure_fresh(out, args.resume)
    grid = ExperimentGrid.from_config(cfg, out)
    table = run_grid(grid, resume=args.resume)
    failed = sum(r.status == "failed" for r in table.rows)
    print(f"{len(table.rows)} cells ({failed} failed) -> {out / 'scores.csv'}")
    return 0


def cmd_report(args) -> int:
    from .report import build_report

    made = build_report(args.results, args.out)
    print(f"{len(made['line_plots'])} line plots, {len(made['bar_charts'])} bar charts, "
          f"{len(made['sample_grids'])} sample grids -> {args.out}")
    return 0


def cmd_classify(args) -> int:
    from .classify import BackboneSpec, fine_tune
    from .data import dataset_from_csv, load_data_config

    _, cmap = load_data_config(args.data_config)
    ds = dataset_from_csv(args.dataset, cmap)
    spec = BackboneSpec(args.backbone_name, args.feature_dim, args.backbone, args.freeze,
                        args.input_size)
    result = fine_tune(spec, ds, epochs=args.epochs, seed=args.seed, lr=args.lr,
                       batch_size=args.batch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / "classification.csv", spec.name, args.dataset_id or Path(args.dataset).parent.name)
    (out / "classification.json").write_text(json.dumps({
        "best_val_accuracy": result.best_val_accuracy, "best_epoch": result.best_epoch}, indent=2) + "\n")
    print(f"{spec.name}: best validation accuracy {result.best_val_accuracy:.4f} "
          f"(epoch {result.best_epoch})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affgan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="build, augment or synthesize datasets")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)
    p = ds_sub.add_parser("build", help="normalize and label manifests")
    p.add_argument("--manifest", action="append", required=True, help="manifest CSV (repeatable)")
    p.add_argument("--config", help="scales / category map config")
    p.add_argument("--out", required=True)
    p.add_argument("--no-check", action="store_true", help="skip image existence checks")
    p.set_defaults(func=cmd_dataset_build)
    p = ds_sub.add_parser("augment", help="write the seven augmented variants of every image")
    p.add_argument("--dataset", required=True, help="serialized dataset CSV")
    p.add_argument("--config", help="category map config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset_augment)
    p = ds_sub.add_parser("fixture", help="generate a synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset_fixture)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config")
    p.add_argument("--dataset", help="serialized dataset CSV")
    p.add_argument("--dataset-id")
    p.add_argument("--family")
    p.add_argument("--variant")
    p.add_argument("--epochs", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--metric-batch", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--extractor", choices=("stub", "torchscript"))
    p.add_argument("--extractor-weights")
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="run the model x dataset ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dry-run", action="store_true", help="1-epoch cells with the stub extractor")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="plots and summary from a results directory")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="accepted for symmetry; reports are deterministic")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("classify", help="fine-tune a TorchScript backbone on the 13 categories")
    p.add_argument("--dataset", required=True)
    p.add_argument("--dataset-id")
    p.add_argument("--data-config")
    p.add_argument("--backbone", required=True, help="TorchScript backbone file")
    p.add_argument("--backbone-name", default="backbone")
    p.add_argument("--feature-dim", type=int, required=True)
    p.add_argument("--input-size", type=int, default=224)
    p.add_argument("--freeze", choices=("HeadOnly", "FullFineTune"), default="FullFineTune")
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
