"""Plots, sample grids and a markdown summary built from run_result.json files."""

from __future__ import annotations

import csv
import shutil
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .training import RunResult  # noqa: E402

# no timestamps or version strings, so reruns are byte-identical
_PNG_META = {"Software": None}


def find_runs(results_dir: str | Path) -> list[tuple[str, Path, RunResult]]:
    root = Path(results_dir)
    runs = []
    for path in sorted(root.rglob("run_result.json")):
        rel = path.parent.relative_to(root).as_posix()
        name = rel.replace("cells/", "", 1).replace("/", "__") if rel != "." else "run"
        runs.append((name, path.parent, RunResult.load(path)))
    return runs


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fid_plot(name: str, result: RunResult, out: Path) -> Path:
    rows = [(e["epoch"], repr(float(e["fid"])), repr(float(e["kid"]))) for e in result.evaluations]
    _write_csv(out / f"fid_{name}.csv", ("epoch", "fid", "kid"), rows)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([e["epoch"] for e in result.evaluations], [e["fid"] for e in result.evaluations],
            marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("FID")
    ax.set_title(f"{result.model_id} on {result.dataset_id}")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = out / f"fid_{name}.png"
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def _bar_chart(dataset: str, entries: list[tuple[str, float]], out: Path) -> Path:
    entries = sorted(entries, key=lambda e: (e[1], e[0]))
    _write_csv(out / f"best_fid_{dataset}.csv", ("model", "best_fid"),
               [(m, repr(float(v))) for m, v in entries])
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(entries) + 2), 3.5))
    ax.bar(range(len(entries)), [v for _, v in entries])
    ax.set_xticks(range(len(entries)))
    ax.set_xticklabels([m for m, _ in entries], rotation=45, ha="right")
    ax.set_ylabel("best FID")
    ax.set_title(f"Best FID per model: {dataset}")
    fig.tight_layout()
    path = out / f"best_fid_{dataset}.png"
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def build_report(results_dir: str | Path, out_dir: str | Path) -> dict[str, list[Path]]:
    """Emit per-run FID curves, per-dataset best-FID bars, sample grids and summary.md."""
    runs = find_runs(results_dir)
    if not runs:
        raise FileNotFoundError(f"no run_result.json under {results_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    made: dict[str, list[Path]] = {"line_plots": [], "bar_charts": [], "sample_grids": []}

    by_dataset: dict[str, list[tuple[str, float]]] = {}
    lines = ["# Results", "", "| run | model | dataset | status | best FID | best KID | evaluations |",
             "|---|---|---|---|---|---|---|"]
    for name, run_dir, res in runs:
        ok = res.status == "completed" and res.evaluations
        lines.append(f"| {name} | {res.model_id} | {res.dataset_id} | {res.status} | "
                     f"{res.best_fid:.4f} | {res.best_kid:.6f} | {len(res.evaluations)} |")
        if not ok:
            continue
        made["line_plots"].append(_fid_plot(name, res, out))
        by_dataset.setdefault(res.dataset_id, []).append((name, res.best_fid))
        grids = sorted((run_dir / "samples").glob("epoch_*.png"))
        if grids:
            dest = out / f"samples_{name}.png"
            shutil.copyfile(grids[-1], dest)
            made["sample_grids"].append(dest)
    for dataset in sorted(by_dataset):
        made["bar_charts"].append(_bar_chart(dataset, by_dataset[dataset], out))
    lines.append("")
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    return made
