"""DCGAN-style generators and discriminators for the ablation grid.

Families share one generator backbone. The discriminator backbone comes in
three variants: BatchNorm, BatchNorm plus dropout, and spectral normalization
in place of batch norm. Family-specific changes:

* CGAN: label embedding concatenated to z; label plane appended to D's input.
* ACGAN: label embedding in G; D gains an auxiliary class head.
* PAGAN: D's first conv grows by one input channel per augmentation level.
* WGAN_GP: D is a critic with an unbounded scalar output.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn as nn
import torch.nn.utils.parametrize as parametrize


class Family(str, Enum):
    DCGAN = "DCGAN"
    CGAN = "CGAN"
    ACGAN = "ACGAN"
    PAGAN = "PAGAN"
    WGAN_GP = "WGAN_GP"


class DiscVariant(str, Enum):
    BATCHNORM = "BatchNorm"
    DROPOUT = "Dropout"
    SPECTRALNORM = "SpectralNorm"


CONDITIONAL = (Family.CGAN, Family.ACGAN)
PAGAN_LEVEL_CAP = 2
DROPOUT_P = 0.3


def _parse_enum(enum_cls, value):
    if isinstance(value, enum_cls):
        return value
    text = str(value).replace("-", "_").lower()
    for member in enum_cls:
        if text in (member.value.lower(), member.name.lower()):
            return member
    aliases = {"bn": "batchnorm", "sn": "spectralnorm", "d": "dropout", "wgan": "wgan_gp",
               "wgangp": "wgan_gp"}
    if text in aliases:
        return _parse_enum(enum_cls, aliases[text])
    raise ValueError(f"unknown {enum_cls.__name__}: {value!r}")


@dataclass(frozen=True)
class ModelSpec:
    family: Family = Family.DCGAN
    disc_variant: DiscVariant = DiscVariant.BATCHNORM
    latent_dim: int = 100
    image_size: int = 64
    channels: int = 3
    num_classes: int = 0
    pagan_max_level: int = PAGAN_LEVEL_CAP
    width: int = 64

    def __post_init__(self):
        object.__setattr__(self, "family", _parse_enum(Family, self.family))
        object.__setattr__(self, "disc_variant", _parse_enum(DiscVariant, self.disc_variant))
        if self.latent_dim <= 0:
            raise ValueError(f"latent_dim must be positive, got {self.latent_dim}")
        size = self.image_size
        if size < 32 or size & (size - 1):
            raise ValueError(f"image_size must be a power of two >= 32, got {size}")
        if self.channels <= 0 or self.width <= 0:
            raise ValueError("channels and width must be positive")
        conditional = self.family in CONDITIONAL
        if conditional and self.num_classes <= 0:
            raise ValueError(f"{self.family.value} needs num_classes > 0")
        if not conditional and self.num_classes != 0:
            raise ValueError(f"{self.family.value} is unconditional; num_classes must be 0")
        if not 0 <= self.pagan_max_level <= PAGAN_LEVEL_CAP:
            raise ValueError(f"pagan_max_level must lie in [0, {PAGAN_LEVEL_CAP}]")

    @property
    def model_id(self) -> str:
        return f"{self.family.value.lower()}-{self.disc_variant.value.lower()}"

    @property
    def conditional(self) -> bool:
        return self.family in CONDITIONAL

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.value
        d["disc_variant"] = self.disc_variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _n_blocks(image_size: int) -> int:
    # 4x4 seed doubled until image_size
    return int(math.log2(image_size)) - 2


def dcgan_init(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        weight = module.parametrizations.weight.original if parametrize.is_parametrized(module) \
            else module.weight
        nn.init.normal_(weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.normal_(module.weight, 1.0, 0.02)
        nn.init.zeros_(module.bias)


class Generator(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        n = _n_blocks(spec.image_size)
        in_dim = spec.latent_dim
        self.embedding = None
        if spec.conditional:
            self.embedding = nn.Embedding(spec.num_classes, spec.num_classes)
            in_dim += spec.num_classes
        ch = spec.width * 2 ** (n - 1)
        layers: list[nn.Module] = [
            nn.ConvTranspose2d(in_dim, ch, 4, 1, 0, bias=False),
            nn.BatchNorm2d(ch),
            nn.ReLU(True),
        ]
        for _ in range(n - 1):
            layers += [nn.ConvTranspose2d(ch, ch // 2, 4, 2, 1, bias=False),
                       nn.BatchNorm2d(ch // 2), nn.ReLU(True)]
            ch //= 2
        layers += [nn.ConvTranspose2d(ch, spec.channels, 4, 2, 1, bias=False), nn.Tanh()]
        self.main = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor, labels: torch.Tensor | None = None) -> torch.Tensor:
        z = z.reshape(len(z), -1)
        if self.embedding is not None:
            if labels is None:
                raise ValueError(f"{self.spec.family.value} generator needs class labels")
            z = torch.cat([z, self.embedding(labels)], dim=1)
        return self.main(z[:, :, None, None])


class PowerIterationSN(nn.Module):
    """Parametrization dividing a weight by its power-iteration spectral norm.

    The left singular vector estimate is kept as a buffer and refined by one
    iteration per forward pass in training mode.
    """

    def __init__(self, weight: torch.Tensor, n_power_iterations: int = 1):
        super().__init__()
        rows = weight.shape[0]
        u = torch.randn(rows, generator=torch.Generator().manual_seed(rows))
        self.register_buffer("u", u / u.norm().clamp_min(1e-12))
        self.n_power_iterations = n_power_iterations

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        iters = self.n_power_iterations if self.training else 0
        w_sn, u = spectral_normalize(weight, iters, self.u)
        if self.training:
            with torch.no_grad():
                self.u.copy_(u)
        return w_sn


def spectral_normalize(W: torch.Tensor, iters: int, u: torch.Tensor | None = None,
                       eps: float = 1e-12) -> tuple[torch.Tensor, torch.Tensor]:
    """Divide ``W`` by its largest singular value estimated via power iteration.

    ``W`` may have any shape with the output dimension first; it is viewed as
    (out, fan_in) for the estimate. ``u`` is the running left singular vector
    (random when omitted). With ``iters == 0`` the stored ``u`` is reused
    without refinement, which is how evaluation mode behaves.

    Returns the normalized weight (same shape as ``W``) and the updated ``u``.
    Gradients flow through ``W`` but not through the power iteration.
    """
    if iters < 0:
        raise ValueError("iters must be non-negative")
    mat = W.reshape(W.shape[0], -1)
    if u is None:
        u = torch.randn(mat.shape[0], dtype=mat.dtype, device=mat.device)
    u = u.to(mat.dtype)
    u = u / u.norm().clamp_min(eps)
    with torch.no_grad():
        v = mat.t() @ u
        v = v / v.norm().clamp_min(eps)
        for _ in range(iters):
            u = mat @ v
            u = u / u.norm().clamp_min(eps)
            v = mat.t() @ u
            v = v / v.norm().clamp_min(eps)
    sigma = torch.dot(u, mat @ v).abs().clamp_min(eps)
    return W / sigma, u.detach()


def apply_spectral_norm(module: nn.Module, n_power_iterations: int = 1) -> nn.Module:
    parametrize.register_parametrization(
        module, "weight", PowerIterationSN(module.weight.detach(), n_power_iterations))
    return module


class Discriminator(nn.Module):
    """Convolutional discriminator / critic.

    ``forward`` returns the realness score of shape (N,) and, for ACGAN, a
    tuple ``(score, class_logits)``.
    """

    def __init__(self, spec: ModelSpec, pagan_level: int = 0):
        super().__init__()
        if pagan_level < 0 or pagan_level > spec.pagan_max_level:
            raise ValueError(f"pagan_level {pagan_level} outside [0, {spec.pagan_max_level}]")
        if pagan_level > 0 and spec.family is not Family.PAGAN:
            raise ValueError("input augmentation levels apply to the PAGAN family only")
        self.spec = spec
        self.pagan_level = pagan_level
        sn = spec.disc_variant is DiscVariant.SPECTRALNORM
        self.label_plane = None
        extra = 0
        if spec.family is Family.CGAN:
            self.label_plane = nn.Embedding(spec.num_classes, spec.image_size * spec.image_size)
            extra = 1
        self.first = self._conv(spec.channels + extra + pagan_level, spec.width, 4, 2, 1, sn)

        layers: list[nn.Module] = [nn.LeakyReLU(0.2, inplace=True)]
        if spec.disc_variant is DiscVariant.DROPOUT:
            layers.append(nn.Dropout(DROPOUT_P))
        ch = spec.width
        for _ in range(_n_blocks(spec.image_size) - 1):
            layers.append(self._conv(ch, ch * 2, 4, 2, 1, sn))
            if not sn:
                layers.append(nn.BatchNorm2d(ch * 2))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            if spec.disc_variant is DiscVariant.DROPOUT:
                layers.append(nn.Dropout(DROPOUT_P))
            ch *= 2
        self.trunk = nn.Sequential(*layers)
        self.feature_channels = ch
        self.head = self._conv(ch, 1, 4, 1, 0, sn)
        self.class_head = None
        if spec.family is Family.ACGAN:
            self.class_head = self._conv(ch, spec.num_classes, 4, 1, 0, sn)
        # critics stay unbounded
        self.squash = nn.Identity() if spec.family is Family.WGAN_GP else nn.Sigmoid()

    @staticmethod
    def _conv(cin, cout, k, s, p, sn) -> nn.Conv2d:
        conv = nn.Conv2d(cin, cout, k, s, p, bias=False)
        return apply_spectral_norm(conv) if sn else conv

    @property
    def in_channels(self) -> int:
        return self.first.in_channels

    def forward(self, x: torch.Tensor, labels: torch.Tensor | None = None):
        if self.label_plane is not None:
            if labels is None:
                raise ValueError("CGAN discriminator needs class labels")
            size = self.spec.image_size
            plane = self.label_plane(labels).reshape(len(x), 1, size, size)
            img, noise = x[:, : self.spec.channels], x[:, self.spec.channels:]
            x = torch.cat([img, plane, noise], dim=1)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"discriminator expects {self.in_channels} input channels "
                             f"(pagan level {self.pagan_level}), got {x.shape[1]}")
        h = self.trunk(self.first(x))
        score = self.squash(self.head(h)).reshape(len(x))
        if self.class_head is not None:
            return score, self.class_head(h).reshape(len(x), -1)
        return score

    def grow(self, level: int) -> None:
        """Raise the PAGAN level, widening the first conv in place.

        Existing filters are kept; weights for new input channels start at
        DCGAN's N(0, 0.02) init.
        """
        if level < self.pagan_level:
            raise ValueError("PAGAN level never decreases")
        if level > self.spec.pagan_max_level:
            raise ValueError(f"pagan_level {level} exceeds cap {self.spec.pagan_max_level}")
        if level == self.pagan_level:
            return
        if self.spec.family is not Family.PAGAN:
            raise ValueError("input augmentation levels apply to the PAGAN family only")
        add = level - self.pagan_level
        old = self.first
        sn = self.spec.disc_variant is DiscVariant.SPECTRALNORM
        new = self._conv(old.in_channels + add, old.out_channels, 4, 2, 1, sn)
        old_w = old.parametrizations.weight.original if sn else old.weight
        new_w = new.parametrizations.weight.original if sn else new.weight
        with torch.no_grad():
            nn.init.normal_(new_w, 0.0, 0.02)
            new_w[:, : old.in_channels].copy_(old_w)
            if sn:
                new.parametrizations.weight[0].u.copy_(old.parametrizations.weight[0].u)
        self.first = new.to(old_w.device)
        self.pagan_level = level


def build_generator(spec: ModelSpec, seed: int | None = None) -> Generator:
    if seed is not None:
        torch.manual_seed(seed)
    g = Generator(spec)
    g.apply(dcgan_init)
    return g


def build_discriminator(spec: ModelSpec, pagan_level: int = 0, seed: int | None = None
                        ) -> Discriminator:
    if seed is not None:
        torch.manual_seed(seed)
    d = Discriminator(spec, pagan_level)
    d.apply(dcgan_init)
    return d


def _noise_generator(seed: int, batch_index: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, batch_index]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(state) & 0x7FFF_FFFF_FFFF_FFFF)


def pagan_augment_input(batch: torch.Tensor, level: int, seed: int, batch_index: int = 0
                        ) -> torch.Tensor:
    """Append ``level`` channels of i.i.d. +/-1 noise to every sample."""
    if not 0 <= level <= PAGAN_LEVEL_CAP:
        raise ValueError(f"level must lie in [0, {PAGAN_LEVEL_CAP}], got {level}")
    if level == 0:
        return batch
    n, _, h, w = batch.shape
    gen = _noise_generator(seed, batch_index)
    bits = torch.randint(0, 2, (n, level, h, w), generator=gen)
    noise = (bits * 2 - 1).to(dtype=batch.dtype, device=batch.device)
    return torch.cat([batch, noise], dim=1)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
