"""Transfer-learning baseline: fine-tune a pretrained backbone on the 13 categories.

Backbones are TorchScript files mapping images in [-1, 1] to a feature vector;
a fresh linear head produces the 13 category logits. The train/validation
split is the stratified split from :mod:`affgan.data`.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import AffectiveDataset, load_images, split


class FreezeMode(str, Enum):
    HEAD_ONLY = "HeadOnly"
    FULL = "FullFineTune"


# feature widths of the torchvision models with their last layer removed
PRESETS = {
    "resnet18": 512,
    "resnet152": 2048,
    "vgg19": 4096,
    "efficientnet_b7": 2560,
}


class BackboneError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    feature_dim: int
    weights_path: str
    freeze_mode: FreezeMode = FreezeMode.FULL
    input_size: int = 224

    def __post_init__(self):
        object.__setattr__(self, "freeze_mode", FreezeMode(self.freeze_mode))


@dataclass
class ClassifierResult:
    history: list[tuple[int, float, float]] = field(default_factory=list)
    initial_train_accuracy: float = 0.0
    initial_val_accuracy: float = 0.0

    @property
    def best_val_accuracy(self) -> float:
        return max(v for _, _, v in self.history) if self.history else self.initial_val_accuracy

    @property
    def best_epoch(self) -> int:
        if not self.history:
            return 0
        best = self.best_val_accuracy
        return next(e for e, _, v in self.history if v == best)

    def write_csv(self, path: str | os.PathLike, backbone: str, dataset: str) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["backbone", "dataset", "epoch", "train_acc", "val_acc"])
            w.writerow([backbone, dataset, 0, repr(self.initial_train_accuracy),
                        repr(self.initial_val_accuracy)])
            for epoch, tr, va in self.history:
                w.writerow([backbone, dataset, epoch, repr(tr), repr(va)])
        return path


class Classifier(nn.Module):
    def __init__(self, backbone: nn.Module, feature_dim: int, num_classes: int = 13):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(feature_dim, num_classes)

    def forward(self, x):
        feats = self.backbone(x)
        return self.head(feats.reshape(len(x), -1))


def load_backbone(spec: BackboneSpec) -> nn.Module:
    if not os.path.isfile(spec.weights_path):
        raise BackboneError(f"backbone weights not found: {spec.weights_path}")
    try:
        module = torch.jit.load(spec.weights_path, map_location="cpu")
    except (RuntimeError, ValueError) as exc:
        raise BackboneError(f"cannot load backbone {spec.weights_path}: {exc}") from None
    module.eval()
    with torch.no_grad():
        probe = module(torch.zeros(2, 3, spec.input_size, spec.input_size))
    if probe.reshape(2, -1).shape[1] != spec.feature_dim:
        raise BackboneError(f"{spec.name} emits {probe.reshape(2, -1).shape[1]} features, "
                            f"declared {spec.feature_dim}")
    return module


def build_classifier(spec: BackboneSpec, num_classes: int = 13, seed: int = 0) -> Classifier:
    backbone = load_backbone(spec)
    torch.manual_seed(seed)
    model = Classifier(backbone, spec.feature_dim, num_classes)
    if spec.freeze_mode is FreezeMode.HEAD_ONLY:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
    return model


@torch.no_grad()
def predict(model: nn.Module, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        x = images[i: i + batch_size]
        if x.dtype == torch.uint8:
            x = x.float() / 127.5 - 1.0
        out.append(model(x).argmax(dim=1))
    model.train(was_training)
    return torch.cat(out)


def evaluate(model, images: torch.Tensor, labels: torch.Tensor) -> float:
    """Top-1 accuracy. ``model`` is any callable returning logits."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty set")
    if isinstance(model, nn.Module):
        preds = predict(model, images)
    else:
        preds = torch.as_tensor(model(images)).argmax(dim=1)
    return float((preds == torch.as_tensor(labels)).double().mean())


def fine_tune(backbone: BackboneSpec, dataset: AffectiveDataset, epochs: int = 25, seed: int = 0,
              lr: float = 1e-4, batch_size: int = 32, train_fraction: float = 0.8,
              images: np.ndarray | None = None) -> ClassifierResult:
    """Fine-tune ``backbone`` plus a fresh head on the stratified train split.

    Accuracies on both splits are measured before training and after every
    epoch. ``images`` may carry pre-decoded uint8 (N, 3, S, S) pixels in
    dataset order to skip decoding.
    """
    labels_all = dataset.labels()
    if len(set(labels_all.tolist())) < 2:
        raise ValueError("fine-tuning needs at least two categories present")
    num_classes = len(dataset.category_map.categories)
    train_ds, val_ds = split(dataset, train_fraction, seed)
    pos = {r.image_path: i for i, r in enumerate(dataset.records)}
    tr_idx = np.array([pos[r.image_path] for r in train_ds.records])
    va_idx = np.array([pos[r.image_path] for r in val_ds.records])
    absent = set(range(num_classes)) - set(labels_all[tr_idx].tolist())
    present = set(labels_all.tolist())
    missing = sorted(absent & present)
    if missing:
        names = [dataset.category_map.categories[i] for i in missing]
        warnings.warn(f"categories absent from the train split: {names}")

    if images is None:
        images = load_images(dataset, backbone.input_size)
    x = torch.from_numpy(np.ascontiguousarray(images))
    y = torch.from_numpy(labels_all)
    x_tr, y_tr, x_va, y_va = x[tr_idx], y[tr_idx], x[va_idx], y[va_idx]

    model = build_classifier(backbone, num_classes, seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr)
    gen = torch.Generator().manual_seed(seed)
    result = ClassifierResult(
        initial_train_accuracy=evaluate(model, x_tr, y_tr),
        initial_val_accuracy=evaluate(model, x_va, y_va) if len(y_va) else 0.0,
    )
    for epoch in range(1, epochs + 1):
        model.train()
        if backbone.freeze_mode is FreezeMode.HEAD_ONLY:
            model.backbone.eval()
        perm = torch.randperm(len(x_tr), generator=gen)
        for i in range(0, len(perm), batch_size):
            idx = perm[i: i + batch_size]
            logits = model(x_tr[idx].float() / 127.5 - 1.0)
            loss = F.cross_entropy(logits, y_tr[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        result.history.append((epoch, evaluate(model, x_tr, y_tr),
                               evaluate(model, x_va, y_va) if len(y_va) else 0.0))
    return result


class _ImageNetInput(nn.Module):
    """Maps [-1, 1] images to ImageNet-normalized input before the backbone."""

    def __init__(self, net: nn.Module):
        super().__init__()
        self.net = net
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        x = (x + 1.0) / 2.0
        return self.net((x - self.mean) / self.std)


def export_torchvision_backbone(name: str, path: str | os.PathLike, weights: str | None = None,
                                input_size: int = 224) -> BackboneSpec:
    """Script a torchvision classifier without its final layer.

    ``weights`` is a torchvision weights enum name such as ``"DEFAULT"``;
    fetching pretrained weights needs network access or a populated torch hub
    cache. With ``weights=None`` the backbone is randomly initialised.
    """
    import torchvision.models as tvm

    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    net = getattr(tvm, name)(weights=weights)
    if name.startswith("resnet"):
        net.fc = nn.Identity()
    else:
        net.classifier[-1] = nn.Identity()
    scripted = torch.jit.script(_ImageNetInput(net.eval()))
    scripted.save(str(path))
    return BackboneSpec(name, PRESETS[name], str(path), input_size=input_size)
