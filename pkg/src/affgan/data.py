"""Affective image corpus: rating normalization, quadrant and category labels.

Manifests are CSV files with the header ``image_path,source,valence_raw,arousal_raw``.
Relative image paths are resolved against the manifest's directory. Each source
dataset rates valence and arousal on its own scale; ratings are mapped affinely
onto [-1, 1] and then labelled with a circumplex quadrant and one of 13
categories (12 angular sectors plus a central Neutral disk).
"""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
import os
import warnings
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SOURCES = ("IAPS", "NAPS", "SFIP", "GAPED", "OASIS", "EmoMadrid", "synthetic")

MANIFEST_COLUMNS = ("image_path", "source", "valence_raw", "arousal_raw")
DATASET_COLUMNS = MANIFEST_COLUMNS + ("valence", "arousal", "quadrant", "category", "augmentation")

NEUTRAL = "Neutral"

DEFAULT_SECTOR_LABELS = (
    "Happy", "Delighted", "Excited", "Tense", "Angry", "Frustrated",
    "Depressed", "Bored", "Tired", "Calm", "Relaxed", "Content",
)


class DatasetError(ValueError):
    """Raised when manifests cannot be turned into a consistent dataset."""


class RatingOutOfRange(DatasetError):
    pass


class Quadrant(str, Enum):
    QI = "QI"
    QII = "QII"
    QIII = "QIII"
    QIV = "QIV"


@dataclass(frozen=True)
class RatingScale:
    min_raw: float
    max_raw: float

    def __post_init__(self):
        if not (math.isfinite(self.min_raw) and math.isfinite(self.max_raw)):
            raise ValueError(f"scale bounds must be finite, got {self.min_raw}, {self.max_raw}")
        if self.max_raw <= self.min_raw:
            raise ValueError(f"scale max ({self.max_raw}) must exceed min ({self.min_raw})")


# Native rating ranges of the supported picture systems.
DEFAULT_SCALES: dict[str, tuple[RatingScale, RatingScale]] = {
    "IAPS": (RatingScale(1, 9), RatingScale(1, 9)),
    "NAPS": (RatingScale(1, 9), RatingScale(1, 9)),
    "SFIP": (RatingScale(1, 9), RatingScale(1, 9)),
    "GAPED": (RatingScale(0, 100), RatingScale(0, 100)),
    "OASIS": (RatingScale(1, 7), RatingScale(1, 7)),
    "EmoMadrid": (RatingScale(-2, 2), RatingScale(-2, 2)),
    "synthetic": (RatingScale(1, 9), RatingScale(1, 9)),
}


@dataclass(frozen=True)
class CategoryMap:
    """Neutral disk of ``neutral_radius`` plus twelve 30 degree sectors.

    Sector ``i`` covers angles ``[offset + 30 i, offset + 30 (i + 1))`` measured
    counterclockwise from the positive valence axis.
    """

    neutral_radius: float = 0.25
    sector_labels: tuple[str, ...] = DEFAULT_SECTOR_LABELS
    sector_offset_deg: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "sector_labels", tuple(self.sector_labels))
        if not 0.0 < self.neutral_radius < 1.0:
            raise ValueError(f"neutral_radius must lie in (0, 1), got {self.neutral_radius}")
        if len(self.sector_labels) != 12:
            raise ValueError(f"expected 12 sector labels, got {len(self.sector_labels)}")
        if len(set(self.sector_labels)) != 12:
            raise ValueError("sector labels must be distinct")
        if NEUTRAL in self.sector_labels:
            raise ValueError(f"{NEUTRAL!r} is reserved for the central disk")
        if not math.isfinite(self.sector_offset_deg):
            raise ValueError("sector_offset_deg must be finite")

    @property
    def categories(self) -> tuple[str, ...]:
        """All 13 labels; the position of a label is its class index."""
        return self.sector_labels + (NEUTRAL,)

    def index(self, category: str) -> int:
        return self.categories.index(category)


@dataclass(frozen=True)
class AffectiveRecord:
    image_path: Path
    source: str
    valence_raw: float
    arousal_raw: float
    valence: float
    arousal: float
    quadrant: Quadrant
    category: str
    augmentation: str = ""

    @property
    def provenance_key(self) -> str:
        return f"{self.source}/{self.augmentation}" if self.augmentation else self.source


@dataclass(frozen=True)
class AffectiveDataset:
    records: tuple[AffectiveRecord, ...]
    category_map: CategoryMap = field(default_factory=CategoryMap)
    provenance: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.provenance:
            object.__setattr__(self, "provenance", _provenance(self.records))
        seen = set()
        for rec in self.records:
            if rec.image_path in seen:
                raise DatasetError(f"duplicate image path: {rec.image_path}")
            seen.add(rec.image_path)
        if sum(self.provenance.values()) != len(self.records):
            raise DatasetError("provenance counts do not sum to the record count")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def quadrant_counts(self) -> dict[str, int]:
        counts = Counter(r.quadrant.value for r in self.records)
        return {q.value: counts.get(q.value, 0) for q in Quadrant}

    def category_counts(self) -> dict[str, int]:
        counts = Counter(r.category for r in self.records)
        return {c: counts.get(c, 0) for c in self.category_map.categories}

    def labels(self) -> np.ndarray:
        return np.array([self.category_map.index(r.category) for r in self.records], dtype=np.int64)


def _provenance(records: Iterable[AffectiveRecord]) -> dict[str, int]:
    return dict(sorted(Counter(r.provenance_key for r in records).items()))


def normalize_rating(raw: float, scale: RatingScale, record: str | None = None) -> float:
    """Map ``raw`` from ``scale`` onto [-1, 1].

    The scale endpoints and midpoint land exactly on -1, 1 and 0.
    """
    raw = float(raw)
    lo, hi = float(scale.min_raw), float(scale.max_raw)
    if not (lo <= raw <= hi):
        where = f" for {record}" if record else ""
        raise RatingOutOfRange(f"rating {raw} outside scale [{lo}, {hi}]{where}")
    if raw == lo:
        return -1.0
    if raw == hi:
        return 1.0
    value = (2.0 * raw - (lo + hi)) / (hi - lo)
    return min(1.0, max(-1.0, value))


def assign_quadrant(valence: float, arousal: float) -> Quadrant:
    # zero counts as non-negative on both axes
    if valence >= 0:
        return Quadrant.QI if arousal >= 0 else Quadrant.QIV
    return Quadrant.QII if arousal >= 0 else Quadrant.QIII


def assign_category(valence: float, arousal: float, cmap: CategoryMap | None = None) -> str:
    cmap = cmap or CategoryMap()
    if math.hypot(valence, arousal) < cmap.neutral_radius:
        return NEUTRAL
    angle = math.degrees(math.atan2(arousal, valence))
    rel = (angle - cmap.sector_offset_deg) % 360.0
    idx = min(int(rel // 30.0), 11)
    return cmap.sector_labels[idx]


def label_record(
    image_path: Path,
    source: str,
    valence_raw: float,
    arousal_raw: float,
    scales: tuple[RatingScale, RatingScale],
    cmap: CategoryMap,
    augmentation: str = "",
) -> AffectiveRecord:
    name = f"{source}:{image_path}"
    v = normalize_rating(valence_raw, scales[0], record=name)
    a = normalize_rating(arousal_raw, scales[1], record=name)
    return AffectiveRecord(
        image_path=Path(image_path),
        source=source,
        valence_raw=float(valence_raw),
        arousal_raw=float(arousal_raw),
        valence=v,
        arousal=a,
        quadrant=assign_quadrant(v, a),
        category=assign_category(v, a, cmap),
        augmentation=augmentation,
    )


def read_manifest(path: str | os.PathLike) -> list[dict]:
    """Parse a manifest CSV into row dicts with resolved image paths."""
    path = Path(path)
    base = path.parent.resolve()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise DatasetError(f"{path}: manifest lacks columns {missing}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                v_raw, a_raw = float(row["valence_raw"]), float(row["arousal_raw"])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: unparsable rating ({exc})") from None
            img = Path(row["image_path"])
            rows.append({
                "image_path": img if img.is_absolute() else base / img,
                "source": row["source"],
                "valence_raw": v_raw,
                "arousal_raw": a_raw,
                "augmentation": row.get("augmentation") or "",
            })
    return rows


def build_dataset(
    manifests: Sequence[str | os.PathLike],
    scales: Mapping[str, tuple[RatingScale, RatingScale]] | None = None,
    cmap: CategoryMap | None = None,
    check_files: bool = True,
) -> AffectiveDataset:
    """Read every manifest, normalize ratings and label each image.

    Args:
        manifests: Manifest CSV paths, read in order.
        scales: Source name to (valence scale, arousal scale). Defaults to
            ``DEFAULT_SCALES``.
        cmap: Category map for the 13-way labels.
        check_files: Verify that every referenced image exists.

    Raises:
        DatasetError: on duplicate paths, unknown sources, missing images or
            out-of-range ratings.
    """
    scales = DEFAULT_SCALES if scales is None else scales
    cmap = cmap or CategoryMap()
    records: list[AffectiveRecord] = []
    seen: dict[Path, str] = {}
    for manifest in manifests:
        for row in read_manifest(manifest):
            src = row["source"]
            if src not in scales:
                raise DatasetError(f"{manifest}: unknown source {src!r}; known: {sorted(scales)}")
            img = row["image_path"]
            if img in seen:
                raise DatasetError(f"duplicate image path {img} (in {seen[img]} and {manifest})")
            seen[img] = str(manifest)
            records.append(label_record(img, src, row["valence_raw"], row["arousal_raw"],
                                        scales[src], cmap, row["augmentation"]))
    if check_files:
        missing = [str(r.image_path) for r in records if not r.image_path.is_file()]
        if missing:
            shown = "\n  ".join(missing[:20])
            more = f"\n  ... and {len(missing) - 20} more" if len(missing) > 20 else ""
            raise DatasetError(f"{len(missing)} image file(s) missing:\n  {shown}{more}")
    return AffectiveDataset(tuple(records), cmap)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(ds: AffectiveDataset, train_fraction: float = 0.8, seed: int = 0
          ) -> tuple[AffectiveDataset, AffectiveDataset]:
    """Stratified train/validation split.

    The train part has exactly ``round(train_fraction * N)`` records (halves
    round up). Each category contributes its proportional share, with
    remainders handed out by largest fractional part. Categories with fewer
    than two records cannot be stratified and go to train.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(ds)
    target = _round_half_up(train_fraction * n)
    rng = np.random.default_rng(seed)

    by_cat: dict[str, list[int]] = {}
    for i, rec in enumerate(ds.records):
        by_cat.setdefault(rec.category, []).append(i)
    cats = [c for c in ds.category_map.categories if c in by_cat]

    quota: dict[str, int] = {}
    frac: dict[str, float] = {}
    fixed = 0
    for c in cats:
        size = len(by_cat[c])
        if size < 2:
            warnings.warn(f"category {c!r} has {size} record(s); cannot stratify, assigning to train")
            quota[c] = size
            fixed += size
            continue
        ideal = size * train_fraction
        quota[c] = int(math.floor(ideal))
        frac[c] = ideal - quota[c]

    deficit = target - sum(quota.values())
    # largest remainder first; category order breaks ties
    order = sorted(frac, key=lambda c: (-frac[c], cats.index(c)))
    while deficit > 0 and order:
        progressed = False
        for c in order:
            if deficit == 0:
                break
            if quota[c] < len(by_cat[c]):
                quota[c] += 1
                deficit -= 1
                progressed = True
        if not progressed:
            break
    while deficit < 0 and order:
        progressed = False
        for c in reversed(order):
            if deficit == 0:
                break
            if quota[c] > 0:
                quota[c] -= 1
                deficit += 1
                progressed = True
        if not progressed:
            break

    train_idx: list[int] = []
    val_idx: list[int] = []
    for c in cats:
        idx = np.array(by_cat[c])
        perm = idx[rng.permutation(len(idx))]
        train_idx.extend(perm[: quota[c]].tolist())
        val_idx.extend(perm[quota[c]:].tolist())
    train_idx.sort()
    val_idx.sort()
    return _subset(ds, train_idx), _subset(ds, val_idx)


def _subset(ds: AffectiveDataset, indices: Sequence[int]) -> AffectiveDataset:
    recs = tuple(ds.records[i] for i in indices)
    return AffectiveDataset(recs, ds.category_map)


def _fmt(x: float) -> str:
    return repr(float(x))


def dataset_to_csv(ds: AffectiveDataset, path: str | os.PathLike) -> Path:
    """Serialize ``ds`` with image paths relative to the CSV's directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(DATASET_COLUMNS)
    for r in ds.records:
        img = Path(os.path.relpath(Path(r.image_path).resolve(), base)).as_posix()
        writer.writerow([img, r.source, _fmt(r.valence_raw), _fmt(r.arousal_raw),
                         _fmt(r.valence), _fmt(r.arousal), r.quadrant.value, r.category,
                         r.augmentation])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def dataset_from_csv(path: str | os.PathLike, cmap: CategoryMap | None = None) -> AffectiveDataset:
    """Load a serialized dataset, trusting its derived columns."""
    path = Path(path)
    base = path.parent.resolve()
    cmap = cmap or CategoryMap()
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in DATASET_COLUMNS[:-1] if c not in (reader.fieldnames or ())]
        if missing:
            raise DatasetError(f"{path}: not a serialized dataset, lacks {missing}")
        for row in reader:
            img = Path(row["image_path"])
            if row["category"] not in cmap.categories:
                raise DatasetError(f"{path}: category {row['category']!r} not in category map")
            records.append(AffectiveRecord(
                image_path=img if img.is_absolute() else base / img,
                source=row["source"],
                valence_raw=float(row["valence_raw"]),
                arousal_raw=float(row["arousal_raw"]),
                valence=float(row["valence"]),
                arousal=float(row["arousal"]),
                quadrant=Quadrant(row["quadrant"]),
                category=row["category"],
                augmentation=row.get("augmentation") or "",
            ))
    return AffectiveDataset(tuple(records), cmap)


def _parse_pair(text: str) -> tuple[float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected 'min, max', got {text!r}")
    return float(parts[0]), float(parts[1])


def load_data_config(path: str | os.PathLike | None
                     ) -> tuple[dict[str, tuple[RatingScale, RatingScale]], CategoryMap]:
    """Read rating scales and the category map from an INI-style config.

    Recognised sections::

        [scales.GAPED]
        valence = 0, 100
        arousal = 0, 100

        [category_map]
        neutral_radius = 0.25
        sector_offset_deg = 0
        sector_labels = Happy, Delighted, ...

    Sections that are absent fall back to the defaults.
    """
    scales = dict(DEFAULT_SCALES)
    cmap = CategoryMap()
    if path is None:
        return scales, cmap
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not parser.read(path, encoding="utf-8"):
        raise FileNotFoundError(path)
    for section in parser.sections():
        if section.startswith("scales."):
            src = section.split(".", 1)[1]
            sec = parser[section]
            scales[src] = (RatingScale(*_parse_pair(sec["valence"])),
                           RatingScale(*_parse_pair(sec["arousal"])))
    if parser.has_section("category_map"):
        sec = parser["category_map"]
        kwargs = {}
        if "neutral_radius" in sec:
            kwargs["neutral_radius"] = sec.getfloat("neutral_radius")
        if "sector_offset_deg" in sec:
            kwargs["sector_offset_deg"] = sec.getfloat("sector_offset_deg")
        if "sector_labels" in sec:
            kwargs["sector_labels"] = tuple(s.strip() for s in sec["sector_labels"].split(","))
        cmap = CategoryMap(**kwargs)
    return scales, cmap


def histogram_report(ds: AffectiveDataset, title: str = "dataset") -> str:
    """Markdown tables of per-source quadrant counts and category counts."""
    lines = [f"# {title}", "", f"records: {len(ds)}", "",
             "| Dataset | Quarter I | Quarter II | Quarter III | Quarter IV |",
             "|---|---|---|---|---|"]
    sources = sorted({r.source for r in ds.records})
    for src in sources:
        counts = Counter(r.quadrant.value for r in ds.records if r.source == src)
        lines.append(f"| {src} | " + " | ".join(str(counts.get(q.value, 0)) for q in Quadrant) + " |")
    total = ds.quadrant_counts()
    lines.append("| ALL | " + " | ".join(str(total[q.value]) for q in Quadrant) + " |")
    lines += ["", "| Category | Amount |", "|---|---|"]
    for cat, count in sorted(ds.category_counts().items()):
        lines.append(f"| {cat} | {count} |")
    return "\n".join(lines) + "\n"


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    rgb = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(choices):
        mask = i == k
        rgb[mask, 0], rgb[mask, 1], rgb[mask, 2] = r[mask], g[mask], b[mask]
    return rgb


def synth_image(valence: float, arousal: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Colour field whose hue follows valence and whose contrast follows arousal."""
    # hue runs from violet (unpleasant) through to warm yellow (pleasant)
    hue = (0.78 - 0.63 * (valence + 1) / 2) % 1.0
    contrast = 0.1 + 0.4 * (arousal + 1) / 2
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(1.0, 3.0)
    phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    h = (hue + 0.04 * wave) % 1.0
    s = np.full_like(h, 0.55 + 0.3 * (arousal + 1) / 2)
    v = np.clip(0.55 + contrast * wave, 0.0, 1.0)
    rgb = _hsv_to_rgb(h, s, v)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def synth_fixture(n: int, seed: int, out_dir: str | os.PathLike, image_size: int = 64,
                  source: str = "synthetic") -> Path:
    """Write ``n`` synthetic RGB images and their manifest; returns the manifest path.

    Ratings are drawn on the 1..9 scale. Output is a pure function of
    ``(n, seed, image_size, source)``.
    """
    from PIL import Image

    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write fixture to {out_dir}: {exc}") from exc
    if not os.access(img_dir, os.W_OK):
        raise PermissionError(f"{out_dir} is not writable")
    rng = np.random.default_rng(seed)
    width = len(str(n - 1))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for i in range(n):
        v_raw = round(float(rng.uniform(1, 9)), 4)
        a_raw = round(float(rng.uniform(1, 9)), 4)
        v, a = (v_raw - 5) / 4, (a_raw - 5) / 4
        arr = synth_image(v, a, image_size, rng)
        rel = f"images/{source}_{i:0{width}d}.png"
        Image.fromarray(arr, "RGB").save(out_dir / rel, format="PNG")
        writer.writerow([rel, source, repr(v_raw), repr(a_raw)])
    manifest = out_dir / "manifest.csv"
    manifest.write_text(buf.getvalue(), encoding="utf-8")
    return manifest


def write_manifest(rows: Iterable[Sequence], path: str | os.PathLike) -> Path:
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for row in rows:
        writer.writerow(row)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def load_images(ds: AffectiveDataset, image_size: int | None = None) -> np.ndarray:
    """Decode every image as uint8 RGB, shape (N, 3, H, W), optionally resized."""
    from PIL import Image

    out = []
    bad = []
    for rec in ds.records:
        try:
            with Image.open(rec.image_path) as im:
                im = im.convert("RGB")
                if image_size is not None and im.size != (image_size, image_size):
                    im = im.resize((image_size, image_size), Image.BILINEAR)
                out.append(np.asarray(im, dtype=np.uint8).transpose(2, 0, 1))
        except OSError:
            bad.append(str(rec.image_path))
    if bad:
        raise DatasetError(f"{len(bad)} unreadable image(s): {bad[:20]}")
    if not out:
        size = image_size or 0
        return np.zeros((0, 3, size, size), dtype=np.uint8)
    return np.stack(out)


__all__ = [
    "AffectiveDataset", "AffectiveRecord", "CategoryMap", "DatasetError", "Quadrant",
    "RatingOutOfRange", "RatingScale", "DEFAULT_SCALES", "NEUTRAL", "assign_category",
    "assign_quadrant", "build_dataset", "dataset_from_csv", "dataset_to_csv",
    "histogram_report", "label_record", "load_data_config", "load_images",
    "normalize_rating", "read_manifest", "split", "synth_fixture", "write_manifest",
]
