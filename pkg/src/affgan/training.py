"""Adversarial training loops, checkpoints and periodic FID/KID evaluation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import AffectiveDataset, load_images
from .metrics import MetricsContext, extract_features, fid, fit_gaussian, kid
from .models import (
    Discriminator, Family, Generator, ModelSpec, PAGAN_LEVEL_CAP, build_discriminator,
    build_generator, pagan_augment_input,
)

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "loss_d", "loss_g", "gp", "pagan_level")
METRIC_COLUMNS = ("epoch", "fid", "kid", "pagan_level")


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, what: str, epoch: int | None = None, step: int | None = None):
        self.epoch, self.step = epoch, step
        super().__init__(f"non-finite {what} at epoch {epoch}, step {step}")


class CheckpointError(RuntimeError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr_generator: float = 5e-4
    lr_discriminator: float = 2e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    real_label: float = 0.9
    gp_lambda: float = 10.0
    critic_steps: int | None = None
    eval_every_epochs: int = 5
    metric_batch: int = 200
    pagan_stall_window: int = 3
    pagan_stall_epsilon: float = 0.02
    pagan_max_level: int = PAGAN_LEVEL_CAP
    seed: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0.5 < self.real_label <= 1.0:
            raise ValueError(f"real_label must lie in (0.5, 1], got {self.real_label}")
        if self.gp_lambda < 0:
            raise ValueError("gp_lambda must be non-negative")
        if self.critic_steps is not None and self.critic_steps < 1:
            raise ValueError("critic_steps must be at least 1")
        if self.eval_every_epochs <= 0:
            raise ValueError("eval_every_epochs must be positive")
        if self.metric_batch < 2:
            raise ValueError("metric_batch must be at least 2")
        if self.pagan_stall_window < 1:
            raise ValueError("pagan_stall_window must be at least 1")
        if not 0 <= self.pagan_max_level <= PAGAN_LEVEL_CAP:
            raise ValueError(f"pagan_max_level must lie in [0, {PAGAN_LEVEL_CAP}]")

    def resolved_critic_steps(self, family: Family) -> int:
        if self.critic_steps is not None:
            return self.critic_steps
        return 5 if family is Family.WGAN_GP else 1

    def effective_real_label(self, family: Family) -> float:
        # smoothing would blunt the PAGAN input augmentation
        return 1.0 if family is Family.PAGAN else self.real_label

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class RunResult:
    model_id: str
    dataset_id: str
    evaluations: list[dict] = field(default_factory=list)
    pagan_level_trace: list[int] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    wall_time: float = 0.0
    status: str = "completed"
    error: str = ""
    state: "GanState | None" = field(default=None, repr=False, compare=False)

    @property
    def best_fid(self) -> float:
        vals = [e["fid"] for e in self.evaluations]
        return min(vals) if vals else math.nan

    @property
    def best_kid(self) -> float:
        vals = [e["kid"] for e in self.evaluations]
        return min(vals) if vals else math.nan

    def to_dict(self, with_best: bool = True) -> dict:
        d = {
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "evaluations": [dict(e) for e in self.evaluations],
            "pagan_level_trace": list(self.pagan_level_trace),
            "checkpoints": list(self.checkpoints),
            "wall_time": self.wall_time,
            "status": self.status,
            "error": self.error,
        }
        if not with_best:
            return d
        d["best_fid"] = self.best_fid
        d["best_kid"] = self.best_kid
        return d

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunResult":
        d = json.loads(Path(path).read_text())
        d.pop("best_fid", None)
        d.pop("best_kid", None)
        return cls(**d)


@dataclass
class GanState:
    spec: ModelSpec
    gen: Generator
    disc: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer

    @property
    def pagan_level(self) -> int:
        return self.disc.pagan_level


def make_state(spec: ModelSpec, config: TrainConfig, pagan_level: int = 0) -> GanState:
    gen = build_generator(spec, seed=derive_seed(config.seed, "generator"))
    disc = build_discriminator(spec, pagan_level, seed=derive_seed(config.seed, "discriminator"))
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_generator, betas=config.adam_betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_discriminator, betas=config.adam_betas)
    return GanState(spec, gen, disc, opt_g, opt_d)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints and strings."""
    ints = []
    for p in parts:
        if isinstance(p, str):
            ints.append(int.from_bytes(hashlib.sha256(p.encode()).digest()[:4], "little"))
        else:
            ints.append(int(p))
    state = np.random.SeedSequence(ints).generate_state(1, dtype=np.uint64)[0]
    return int(state) & 0x7FFF_FFFF_FFFF_FFFF


# --- losses ---------------------------------------------------------------

def bce_discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor, real_label: float
                           ) -> torch.Tensor:
    real_t = torch.full_like(d_real, real_label)
    fake_t = torch.zeros_like(d_fake)
    return F.binary_cross_entropy(d_real, real_t) + F.binary_cross_entropy(d_fake, fake_t)


def bce_generator_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating objective: maximize log D(G(z))."""
    return F.binary_cross_entropy(d_fake, torch.ones_like(d_fake))


def gradient_penalty(critic: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor,
                     fake: torch.Tensor, eps: torch.Tensor, weight: float = 1.0
                     ) -> tuple[torch.Tensor, torch.Tensor]:
    """Weighted penalty ``weight * mean((||grad critic(x_hat)|| - 1)^2)``.

    ``x_hat = eps * real + (1 - eps) * fake`` with ``eps`` broadcast per
    sample. Returns the penalty (differentiable w.r.t. critic parameters) and
    the per-sample gradient norms.
    """
    x_hat = (eps * real + (1 - eps) * fake).detach().requires_grad_(True)
    out = critic(x_hat)
    (grads,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    norms = grads.reshape(len(x_hat), -1).norm(2, dim=1)
    return weight * ((norms - 1.0) ** 2).mean(), norms


def _check(value: torch.Tensor, what: str, epoch, step) -> float:
    v = float(value.detach())
    if not math.isfinite(v):
        raise NonFiniteLossError(what, epoch, step)
    return v


def _split_output(out):
    return out if isinstance(out, tuple) else (out, None)


def gan_step(state: GanState, real: torch.Tensor, config: TrainConfig, gen: torch.Generator,
             labels: torch.Tensor | None = None, aug_seed: int = 0, step: int = 0,
             epoch: int | None = None) -> tuple[float, float]:
    """One discriminator and one generator update for the BCE families.

    Returns ``(loss_d, loss_g)``.
    """
    spec = state.spec
    if spec.family is Family.WGAN_GP:
        raise ValueError("use wgan_gp_step for the WGAN_GP family")
    if len(real) == 0:
        raise ValueError("empty batch")
    n = len(real)
    level = state.pagan_level
    real_label = config.effective_real_label(spec.family)
    cond = spec.conditional
    if cond and labels is None:
        raise ValueError(f"{spec.family.value} training needs labels")

    z = torch.randn(n, spec.latent_dim, generator=gen)
    fake_labels = torch.randint(0, spec.num_classes, (n,), generator=gen) if cond else None
    fake = state.gen(z, fake_labels)

    real_in = pagan_augment_input(real, level, aug_seed, 2 * step)
    fake_in = pagan_augment_input(fake, level, aug_seed, 2 * step + 1)
    d_labels_real = labels if spec.family is Family.CGAN else None
    d_labels_fake = fake_labels if spec.family is Family.CGAN else None

    state.opt_d.zero_grad(set_to_none=True)
    d_real, cls_real = _split_output(state.disc(real_in, d_labels_real))
    d_fake, cls_fake = _split_output(state.disc(fake_in.detach(), d_labels_fake))
    loss_d = bce_discriminator_loss(d_real, d_fake, real_label)
    if cls_real is not None:
        loss_d = loss_d + F.cross_entropy(cls_real, labels) + F.cross_entropy(cls_fake, fake_labels)
    _check(loss_d, "discriminator loss", epoch, step)
    loss_d.backward()
    state.opt_d.step()

    state.opt_g.zero_grad(set_to_none=True)
    d_out, cls_out = _split_output(state.disc(fake_in, d_labels_fake))
    loss_g = bce_generator_loss(d_out)
    if cls_out is not None:
        loss_g = loss_g + F.cross_entropy(cls_out, fake_labels)
    _check(loss_g, "generator loss", epoch, step)
    loss_g.backward()
    state.opt_g.step()
    return float(loss_d.detach()), float(loss_g.detach())


def wgan_gp_step(state: GanState, real: torch.Tensor, config: TrainConfig, gen: torch.Generator,
                 labels: torch.Tensor | None = None, aug_seed: int = 0, step: int = 0,
                 epoch: int | None = None) -> tuple[float, float, float]:
    """``critic_steps`` critic updates on ``real`` followed by one generator update.

    Returns ``(loss_d, loss_g, gp)`` where the critic values come from the
    last critic update and ``gp`` already includes ``gp_lambda``.
    """
    spec = state.spec
    if spec.family is not Family.WGAN_GP:
        raise ValueError("wgan_gp_step only trains the WGAN_GP family")
    n = len(real)
    if n == 0:
        raise ValueError("empty batch")
    loss_d = gp = None
    for _ in range(config.resolved_critic_steps(spec.family)):
        z = torch.randn(n, spec.latent_dim, generator=gen)
        with torch.no_grad():
            fake = state.gen(z)
        eps = torch.rand(n, 1, 1, 1, generator=gen)
        state.opt_d.zero_grad(set_to_none=True)
        gp, norms = gradient_penalty(state.disc, real, fake, eps, config.gp_lambda)
        if not torch.isfinite(norms).all():
            raise NonFiniteLossError("gradient norm", epoch, step)
        loss_d = state.disc(fake).mean() - state.disc(real).mean() + gp
        _check(loss_d, "critic loss", epoch, step)
        loss_d.backward()
        state.opt_d.step()

    state.opt_g.zero_grad(set_to_none=True)
    z = torch.randn(n, spec.latent_dim, generator=gen)
    loss_g = -state.disc(state.gen(z)).mean()
    _check(loss_g, "generator loss", epoch, step)
    loss_g.backward()
    state.opt_g.step()
    return float(loss_d.detach()), float(loss_g.detach()), float(gp.detach())


# --- PAGAN schedule ---------------------------------------------------------

def pagan_level_trace(kid_history: Sequence[float], config: TrainConfig) -> list[int]:
    """Augmentation level after each evaluation in ``kid_history``.

    After a level change the comparison restarts: the level rises again only
    once two full windows of evaluations have been made at the current level
    and the best KID of the newer window improves on the older one by less
    than ``pagan_stall_epsilon`` (relative).
    """
    w = config.pagan_stall_window
    cap = min(config.pagan_max_level, PAGAN_LEVEL_CAP)
    level, start, trace = 0, 0, []
    for t in range(len(kid_history)):
        seg = kid_history[start: t + 1]
        if level < cap and len(seg) >= 2 * w:
            before = min(seg[-2 * w: -w])
            recent = min(seg[-w:])
            improvement = (before - recent) / max(abs(before), 1e-12)
            if improvement < config.pagan_stall_epsilon:
                level += 1
                start = t + 1
        trace.append(level)
    return trace


def pagan_schedule(kid_history: Sequence[float], config: TrainConfig) -> int:
    trace = pagan_level_trace(kid_history, config)
    return trace[-1] if trace else 0


# --- checkpoints ------------------------------------------------------------

_MAGIC = b"AFFGANCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | os.PathLike, spec: ModelSpec, epoch: int, payload: dict) -> Path:
    """Write ``payload`` (tensors and plain data) with a checksummed JSON header.

    Layout: magic, u32 header length, UTF-8 JSON header, torch-serialized
    payload. The header records the format version, the model spec, the epoch
    and the SHA-256 of the payload bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "epoch": epoch,
        "payload_bytes": len(body),
        "sha256": hashlib.sha256(body).hexdigest(),
    }, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(header)) + header + body)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike, spec: ModelSpec | None = None
                    ) -> tuple[ModelSpec, int, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC or len(raw) < 12:
        raise CheckpointIntegrityError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12: 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointIntegrityError(f"{path}: corrupt header") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    body = raw[12 + hlen:]
    if len(body) != header["payload_bytes"] or hashlib.sha256(body).hexdigest() != header["sha256"]:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch (truncated or corrupt)")
    stored = ModelSpec.from_dict(header["spec"])
    if spec is not None and stored != spec:
        raise SpecMismatchError(f"{path}: checkpoint spec {stored} does not match {spec}")
    payload = torch.load(io.BytesIO(body), map_location="cpu", weights_only=False)
    return stored, header["epoch"], payload


def state_payload(state: GanState) -> dict:
    return {
        "generator": state.gen.state_dict(),
        "discriminator": state.disc.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "pagan_level": state.pagan_level,
    }


def restore_state(spec: ModelSpec, config: TrainConfig, payload: dict) -> GanState:
    state = make_state(spec, config, pagan_level=payload["pagan_level"])
    state.gen.load_state_dict(payload["generator"])
    state.disc.load_state_dict(payload["discriminator"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    return state


def _grow_discriminator(state: GanState, level: int, config: TrainConfig) -> None:
    state.disc.grow(level)
    old = state.opt_d
    new = torch.optim.Adam(state.disc.parameters(), lr=config.lr_discriminator,
                           betas=config.adam_betas)
    # carry Adam moments for every parameter that survived
    for p in state.disc.parameters():
        if p in old.state:
            new.state[p] = old.state[p]
    state.opt_d = new


# --- data -------------------------------------------------------------------

@dataclass
class Corpus:
    """Training images as uint8 (N, C, H, W) with integer class labels."""

    images: torch.Tensor
    labels: torch.Tensor
    name: str = "dataset"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_dataset(cls, ds: AffectiveDataset, image_size: int, name: str = "dataset") -> "Corpus":
        imgs = torch.from_numpy(load_images(ds, image_size))
        return cls(imgs, torch.from_numpy(ds.labels()), name)


def to_unit_range(images: torch.Tensor) -> torch.Tensor:
    return images.float() / 127.5 - 1.0


def image_grid(images: torch.Tensor, nrow: int = 8, pad: int = 2) -> np.ndarray:
    """Tile (N, C, H, W) images in [-1, 1] into one uint8 (H', W', C) array."""
    x = ((images.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).numpy()
    n, c, h, w = x.shape
    ncol = nrow
    nrows = math.ceil(n / ncol)
    grid = np.zeros((nrows * (h + pad) + pad, ncol * (w + pad) + pad, c), dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, ncol)
        y0, x0 = pad + r * (h + pad), pad + col * (w + pad)
        grid[y0: y0 + h, x0: x0 + w] = x[i].transpose(1, 2, 0)
    return grid


def save_grid(images: torch.Tensor, path: str | os.PathLike, nrow: int = 8) -> Path:
    from PIL import Image

    grid = image_grid(images, nrow)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "RGB" if grid.shape[2] == 3 else "L"
    Image.fromarray(grid if mode == "RGB" else grid[..., 0], mode).save(path, format="PNG")
    return path


@torch.no_grad()
def generate(gen: Generator, n: int, seed: int, labels: torch.Tensor | None = None,
             batch_size: int = 256) -> torch.Tensor:
    was_training = gen.training
    gen.eval()
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(n, gen.spec.latent_dim, generator=g)
    if gen.spec.conditional and labels is None:
        labels = torch.randint(0, gen.spec.num_classes, (n,), generator=g)
    out = []
    for i in range(0, n, batch_size):
        out.append(gen(z[i: i + batch_size], None if labels is None else labels[i: i + batch_size]))
    gen.train(was_training)
    return torch.cat(out)


def evaluate_generator(gen: Generator, corpus: Corpus, metrics: MetricsContext, n: int, seed: int
                       ) -> tuple[float, float]:
    """FID and KID between ``n`` real images and ``n`` generated ones."""
    n = min(n, len(corpus))
    rng = np.random.default_rng(seed)
    idx = torch.from_numpy(np.sort(rng.choice(len(corpus), size=n, replace=False)))
    real = to_unit_range(corpus.images[idx])
    labels = corpus.labels[idx] if gen.spec.conditional else None
    fake = generate(gen, n, derive_seed(seed, "fake"), labels)
    fr = extract_features(real, metrics.extractor)
    ff = extract_features(fake, metrics.extractor)
    return fid(fit_gaussian(fr), fit_gaussian(ff)), kid(fr, ff)


# --- loop -------------------------------------------------------------------

def _read_rows(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_rows(path: Path, columns: Sequence[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def latest_checkpoint(out_dir: str | os.PathLike) -> Path | None:
    ckpts = sorted(Path(out_dir, "checkpoints").glob("epoch_*.ckpt"))
    return ckpts[-1] if ckpts else None


def train(spec: ModelSpec, data: Corpus | AffectiveDataset, config: TrainConfig,
          metrics: MetricsContext, out_dir: str | os.PathLike | None = None,
          resume: bool = False, dataset_id: str | None = None,
          stop_after_epoch: int | None = None) -> RunResult:
    """Train one model and evaluate it every ``eval_every_epochs`` epochs.

    Per-epoch randomness is derived from ``(config.seed, epoch)``, so resuming
    from a checkpoint reproduces an uninterrupted run. With ``out_dir`` set,
    the step log, metric trajectory, checkpoints, 8x8 sample grids and
    ``run_result.json`` are written there. ``stop_after_epoch`` ends the run
    early (used to simulate interruptions).
    """
    t0 = time.perf_counter()
    if isinstance(data, AffectiveDataset):
        data = Corpus.from_dataset(data, spec.image_size, dataset_id or "dataset")
    if len(data) < 2:
        raise ValueError("training needs at least two images")
    if tuple(data.images.shape[1:]) != (spec.channels, spec.image_size, spec.image_size):
        raise ValueError(f"corpus images have shape {tuple(data.images.shape[1:])}, spec expects "
                         f"{(spec.channels, spec.image_size, spec.image_size)}")
    dataset_id = dataset_id or data.name
    if spec.pagan_max_level > config.pagan_max_level:
        spec = ModelSpec(**{**spec.to_dict(), "pagan_max_level": config.pagan_max_level})
    result = RunResult(spec.model_id, dataset_id)
    kid_history: list[float] = []
    start_epoch = 0
    state = None

    out = Path(out_dir) if out_dir is not None else None
    log_rows: list[dict] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume:
            ckpt = latest_checkpoint(out)
            if ckpt is not None:
                _, start_epoch, payload = load_checkpoint(ckpt, spec)
                state = restore_state(spec, config, payload)
                result = RunResult(**payload["result"])
                kid_history = [e["kid"] for e in result.evaluations]
                log_rows = [r for r in _read_rows(out / "train_log.csv") if int(r["epoch"]) <= start_epoch]
                logger.info("resuming %s from epoch %d", spec.model_id, start_epoch)
        _write_rows(out / "train_log.csv", LOG_COLUMNS, log_rows)
    if state is None:
        state = make_state(spec, config)

    wgan = spec.family is Family.WGAN_GP
    n = len(data)
    bs = min(config.batch_size, n)
    grid_seed = derive_seed(config.seed, "grid")
    grid_labels = (torch.arange(64) % spec.num_classes) if spec.conditional else None
    log_fh = open(out / "train_log.csv", "a", newline="") if out is not None else None
    log = csv.writer(log_fh, lineterminator="\n") if log_fh else None
    step = start_epoch * math.ceil(n / bs)
    last_epoch = config.epochs if stop_after_epoch is None else min(stop_after_epoch, config.epochs)
    try:
        for epoch in range(start_epoch + 1, last_epoch + 1):
            epoch_seed = derive_seed(config.seed, epoch)
            torch.manual_seed(epoch_seed)
            gen = torch.Generator().manual_seed(epoch_seed)
            aug_seed = derive_seed(config.seed, epoch, "pagan")
            state.gen.train()
            state.disc.train()
            perm = torch.randperm(n, generator=gen)
            for b0 in range(0, n, bs):
                idx = perm[b0: b0 + bs]
                if len(idx) < 2:
                    continue
                real = to_unit_range(data.images[idx])
                labels = data.labels[idx]
                if wgan:
                    loss_d, loss_g, gp = wgan_gp_step(state, real, config, gen, labels,
                                                      aug_seed, step, epoch)
                else:
                    loss_d, loss_g = gan_step(state, real, config, gen, labels, aug_seed, step, epoch)
                    gp = 0.0
                if log:
                    log.writerow([epoch, step, repr(loss_d), repr(loss_g), repr(gp), state.pagan_level])
                step += 1

            if epoch % config.eval_every_epochs == 0:
                f, k = evaluate_generator(state.gen, data, metrics, config.metric_batch,
                                          derive_seed(config.seed, epoch, "eval"))
                if not (math.isfinite(f) and math.isfinite(k)):
                    raise NonFiniteLossError("metric", epoch, step)
                level_now = state.pagan_level
                result.evaluations.append({"epoch": epoch, "fid": f, "kid": k, "pagan_level": level_now})
                kid_history.append(k)
                if spec.family is Family.PAGAN:
                    new_level = pagan_schedule(kid_history, config)
                    if new_level > state.pagan_level:
                        logger.info("epoch %d: PAGAN level %d -> %d", epoch, state.pagan_level, new_level)
                        _grow_discriminator(state, new_level, config)
                result.pagan_level_trace.append(state.pagan_level)
                logger.info("%s epoch %d: FID %.4f KID %.6f", spec.model_id, epoch, f, k)
                if out is not None:
                    log_fh.flush()
                    save_grid(generate(state.gen, 64, grid_seed, grid_labels),
                              out / "samples" / f"epoch_{epoch:04d}.png")
                    ckpt = out / "checkpoints" / f"epoch_{epoch:04d}.ckpt"
                    result.checkpoints.append(str(ckpt.relative_to(out)))
                    payload = state_payload(state)
                    payload["result"] = result.to_dict(with_best=False)
                    save_checkpoint(ckpt, spec, epoch, payload)
                    _write_rows(out / "metrics.csv", METRIC_COLUMNS,
                                [{k_: _fmt(v) for k_, v in e.items()} for e in result.evaluations])
    finally:
        if log_fh:
            log_fh.close()

    result.wall_time = time.perf_counter() - t0
    if out is not None and last_epoch == config.epochs:
        result.save(out / "run_result.json")
    result.state = state
    return result
