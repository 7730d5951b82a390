"""Eightfold, label-preserving expansion of an affective dataset.

Every source image yields seven variants: two sharpening filters, a brighter
and a darker copy, and three rotations. All operations work on uint8 arrays of
shape (H, W, 3) so results are reproducible bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import AffectiveDataset, DatasetError, dataset_to_csv


class AugmentKind(str, Enum):
    DETAIL = "detail"
    EDGE_ENHANCE = "edge_enhance"
    BRIGHTEN = "brighten"
    DARKEN = "darken"
    ROTATE90 = "rotate90"
    ROTATE180 = "rotate180"
    ROTATE270 = "rotate270"


# Both kernels sum to one, so flat regions pass through untouched.
DETAIL_KERNEL = np.array([
    [0.0, -0.2, 0.0],
    [-0.2, 1.8, -0.2],
    [0.0, -0.2, 0.0],
])
EDGE_ENHANCE_KERNEL = np.array([
    [-0.5, -0.5, -0.5],
    [-0.5, 5.0, -0.5],
    [-0.5, -0.5, -0.5],
])

_PARAMETERS = {AugmentKind.BRIGHTEN: 1.2, AugmentKind.DARKEN: 0.9}


@dataclass(frozen=True)
class AugmentationOp:
    kind: AugmentKind
    parameter: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AugmentKind(self.kind))
        expected = _PARAMETERS.get(self.kind)
        if self.parameter is None:
            object.__setattr__(self, "parameter", expected)
        elif self.parameter != expected:
            raise ValueError(f"{self.kind.value} takes parameter {expected}, got {self.parameter}")

    @property
    def name(self) -> str:
        return self.kind.value


OPS: tuple[AugmentationOp, ...] = tuple(AugmentationOp(k) for k in AugmentKind)


def _round_clip(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def _convolve(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.empty(img.shape, dtype=np.float64)
    for c in range(img.shape[2]):
        out[..., c] = ndimage.correlate(img[..., c].astype(np.float64), kernel, mode="nearest")
    return _round_clip(out)


def augment_image(img: np.ndarray, op: AugmentationOp) -> np.ndarray:
    """Apply one augmentation to an (H, W, 3) uint8 image.

    Rotations are counterclockwise and lossless; 90 and 270 degrees swap
    height and width.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"expected a non-empty (H, W, C) image, got shape {img.shape}")
    kind = op.kind
    if kind is AugmentKind.DETAIL:
        return _convolve(img, DETAIL_KERNEL)
    if kind is AugmentKind.EDGE_ENHANCE:
        return _convolve(img, EDGE_ENHANCE_KERNEL)
    if kind in (AugmentKind.BRIGHTEN, AugmentKind.DARKEN):
        return _round_clip(img.astype(np.float64) * op.parameter)
    turns = {AugmentKind.ROTATE90: 1, AugmentKind.ROTATE180: 2, AugmentKind.ROTATE270: 3}[kind]
    return np.ascontiguousarray(np.rot90(img, k=turns, axes=(0, 1)))


def variant_path(image_path: str | os.PathLike, op: AugmentationOp, out_dir: str | os.PathLike,
                 source: str) -> Path:
    return Path(out_dir) / source / f"{Path(image_path).stem}__{op.name}.png"


def augment_dataset(ds: AffectiveDataset, out_dir: str | os.PathLike,
                    write_manifest: bool = True) -> AffectiveDataset:
    """Write seven variants of every record to ``out_dir`` and return the 8N dataset.

    Originals keep their paths; variants are stored as
    ``out_dir/<source>/<stem>__<op>.png`` and inherit every label of their
    source record. When ``write_manifest`` is set the result is also written to
    ``out_dir/manifest.csv``.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    records = [r for r in ds.records if not r.augmentation]
    if len(records) != len(ds.records):
        raise DatasetError("dataset already contains augmented records")

    targets: dict[Path, Path] = {}
    for rec in records:
        for op in OPS:
            dest = variant_path(rec.image_path, op, out_dir, rec.source)
            if dest in targets:
                raise DatasetError(
                    f"augmented name collision: {rec.image_path} and {targets[dest]} map to {dest}")
            targets[dest] = rec.image_path

    bad = []
    new_records = list(ds.records)
    for rec in records:
        try:
            with Image.open(rec.image_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except OSError:
            bad.append(str(rec.image_path))
            continue
        (out_dir / rec.source).mkdir(parents=True, exist_ok=True)
        for op in OPS:
            dest = variant_path(rec.image_path, op, out_dir, rec.source)
            Image.fromarray(augment_image(arr, op), "RGB").save(dest, format="PNG")
            new_records.append(replace(rec, image_path=dest, augmentation=op.name))
    if bad:
        raise DatasetError(f"{len(bad)} unreadable image(s):\n  " + "\n  ".join(bad))

    result = AffectiveDataset(tuple(new_records), ds.category_map)
    if write_manifest:
        dataset_to_csv(result, out_dir / "manifest.csv")
    return result
