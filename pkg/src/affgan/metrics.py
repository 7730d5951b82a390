"""FID, KID and Inception Score over pluggable feature extractors.

Extractors map a batch of images in [-1, 1] with shape (N, C, H, W) to an
(N, d) float64 feature matrix. Two are provided: ``StubExtractor``, a fixed
random projection of 8x8 thumbnails that needs no model assets, and
``TorchScriptExtractor``, which wraps a serialized network (for example an
Inception-v3 pool layer exported with ``torch.jit.save``).
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import rel_entr


class NumericalQualityWarning(RuntimeWarning):
    pass


class FeatureExtractor(Protocol):
    name: str
    feature_dim: int

    def __call__(self, images) -> np.ndarray: ...


def _as_tensor(images) -> torch.Tensor:
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(images)
    if images.dtype == torch.uint8:
        images = images.float() / 127.5 - 1.0
    return images.float()


class StubExtractor:
    """Bilinear 8x8 thumbnail, flattened, times a seeded Gaussian projection."""

    def __init__(self, feature_dim: int = 64, channels: int = 3, seed: int = 0, thumb: int = 8):
        self.name = f"stub{feature_dim}"
        self.feature_dim = feature_dim
        self.thumb = thumb
        self.channels = channels
        rng = np.random.default_rng(seed)
        in_dim = channels * thumb * thumb
        self.projection = rng.standard_normal((in_dim, feature_dim)) / np.sqrt(in_dim)

    def __call__(self, images) -> np.ndarray:
        x = _as_tensor(images)
        if x.ndim != 4 or x.shape[0] == 0:
            raise ValueError(f"expected a non-empty (N, C, H, W) batch, got {tuple(x.shape)}")
        x = x[:, : self.channels]
        with torch.no_grad():
            small = F.interpolate(x, size=(self.thumb, self.thumb), mode="bilinear",
                                  align_corners=False)
        flat = small.reshape(len(small), -1).double().numpy()
        return flat @ self.projection


class TorchScriptExtractor:
    """Features from a TorchScript module loaded from a local file.

    The module receives images scaled to [-1, 1] and resized to
    ``input_size``; it must return (N, feature_dim) features. If it returns a
    tuple, the first element is taken as features and the second as class
    logits (used by :meth:`probabilities`).
    """

    def __init__(self, weights_path: str | os.PathLike, feature_dim: int = 2048,
                 input_size: int = 299, name: str = "torchscript", batch_size: int = 50):
        if not os.path.isfile(weights_path):
            raise FileNotFoundError(f"extractor weights not found: {weights_path}")
        self.module = torch.jit.load(str(weights_path), map_location="cpu").eval()
        self.name = name
        self.feature_dim = feature_dim
        self.input_size = input_size
        self.batch_size = batch_size

    def _run(self, images):
        x = _as_tensor(images)
        if x.ndim != 4 or x.shape[0] == 0:
            raise ValueError(f"expected a non-empty (N, C, H, W) batch, got {tuple(x.shape)}")
        feats, logits = [], []
        with torch.no_grad():
            for chunk in x.split(self.batch_size):
                if chunk.shape[-1] != self.input_size or chunk.shape[-2] != self.input_size:
                    chunk = F.interpolate(chunk, size=(self.input_size, self.input_size),
                                          mode="bilinear", align_corners=False)
                out = self.module(chunk)
                if isinstance(out, (tuple, list)):
                    feats.append(out[0])
                    logits.append(out[1])
                else:
                    feats.append(out)
        return feats, logits

    def __call__(self, images) -> np.ndarray:
        feats, _ = self._run(images)
        out = torch.cat(feats).reshape(-1, self.feature_dim)
        return out.double().numpy()

    def probabilities(self, images) -> np.ndarray:
        _, logits = self._run(images)
        if not logits:
            raise ValueError(f"{self.name} does not emit class logits")
        return torch.softmax(torch.cat(logits).double(), dim=1).numpy()


def extract_features(images, extractor: FeatureExtractor) -> np.ndarray:
    if len(images) == 0:
        raise ValueError("cannot extract features from an empty batch")
    feats = np.asarray(extractor(images), dtype=np.float64)
    if feats.shape != (len(images), extractor.feature_dim):
        raise ValueError(f"{extractor.name} returned shape {feats.shape}, "
                         f"expected ({len(images)}, {extractor.feature_dim})")
    return feats


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("FeatureStats needs at least two samples")
        if self.sigma.shape != (len(self.mu), len(self.mu)):
            raise ValueError(f"covariance shape {self.sigma.shape} does not match mean {self.mu.shape}")


def fit_gaussian(features: np.ndarray) -> FeatureStats:
    """Column mean and unbiased (n - 1) sample covariance."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError(f"need an (n >= 2, d) feature matrix, got shape {features.shape}")
    mu = features.mean(axis=0)
    sigma = np.atleast_2d(np.cov(features, rowvar=False, ddof=1))
    sigma = (sigma + sigma.T) / 2
    return FeatureStats(mu, sigma, features.shape[0])


def _check_symmetric(S: np.ndarray, tol: float = 1e-8) -> None:
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if S.size and np.max(np.abs(S - S.T)) > tol * scale:
        raise ValueError("matrix is not symmetric")


def _sqrt_eig(S: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    S = (S + S.T) / 2
    w, V = np.linalg.eigh(S)
    root = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    return (root + root.T) / 2, w, V


def matrix_sqrt_psd(S: np.ndarray) -> np.ndarray:
    """Symmetric square root via eigendecomposition; negative eigenvalues clamp to zero."""
    S = np.asarray(S, dtype=np.float64)
    _check_symmetric(S)
    return _sqrt_eig(S)[0]


def _trace_sqrt_product(sigma1: np.ndarray, sigma2: np.ndarray) -> tuple[float, float]:
    """tr((S1 S2)^1/2) through the similar symmetric matrix S1^1/2 S2 S1^1/2.

    Returns the trace and the most negative eigenvalue of that matrix.
    """
    root1 = _sqrt_eig(sigma1)[0]
    inner = root1 @ sigma2 @ root1
    inner = (inner + inner.T) / 2
    w = np.linalg.eigvalsh(inner)
    return float(np.sum(np.sqrt(np.clip(w, 0.0, None)))), float(w.min()) if w.size else 0.0


def fid(real: FeatureStats, fake: FeatureStats, eps: float = 1e-6) -> float:
    """Frechet distance between two Gaussians fitted to features."""
    if real.mu.shape != fake.mu.shape:
        raise ValueError(f"feature dimension mismatch: {real.mu.shape} vs {fake.mu.shape}")
    s1, s2 = real.sigma, fake.sigma
    diff = real.mu - fake.mu
    tr_root, min_eig = _trace_sqrt_product(s1, s2)
    # a negative eigenvalue -l corresponds to an imaginary root component sqrt(l)
    if min_eig < -1e-6:
        offset = eps * np.eye(len(diff))
        s1, s2 = s1 + offset, s2 + offset
        tr_root, _ = _trace_sqrt_product(s1, s2)
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_root)
    if value < -1e-3:
        warnings.warn(f"FID evaluated to {value:.3g} before clamping", NumericalQualityWarning)
    return max(value, 0.0)


def polynomial_kernel(x: np.ndarray, y: np.ndarray, degree: int = 3) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** degree


def kid(real_feats: np.ndarray, fake_feats: np.ndarray) -> float:
    """Unbiased squared MMD with the cubic kernel (x.y/d + 1)^3.

    Can be slightly negative when the two samples match.
    """
    x = np.asarray(real_feats, dtype=np.float64)
    y = np.asarray(fake_feats, dtype=np.float64)
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise ValueError(f"KID needs at least two samples per side, got {n} and {m}")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    k_xx = polynomial_kernel(x, x)
    k_yy = polynomial_kernel(y, y)
    k_xy = polynomial_kernel(x, y)
    sum_xx = k_xx.sum() - np.trace(k_xx)
    sum_yy = k_yy.sum() - np.trace(k_yy)
    return float(sum_xx / (n * (n - 1)) + sum_yy / (m * (m - 1)) - 2.0 * k_xy.sum() / (n * m))


def inception_score(probs: np.ndarray) -> float:
    """exp of the mean KL divergence between each row and the marginal."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError(f"expected an (n, K) probability matrix, got shape {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("rows must be probability vectors")
    marginal = p.mean(axis=0, keepdims=True)
    kl = rel_entr(p, marginal).sum(axis=1)
    return float(np.exp(kl.mean()))


@dataclass
class MetricsContext:
    """What the training loop needs to score a generator."""

    extractor: FeatureExtractor


def score_batches(real_images, fake_images, extractor: FeatureExtractor) -> tuple[float, float]:
    """(FID, KID) between two image batches."""
    fr = extract_features(real_images, extractor)
    ff = extract_features(fake_images, extractor)
    return fid(fit_gaussian(fr), fit_gaussian(ff)), kid(fr, ff)


def make_extractor(kind: str = "stub", weights: str | None = None, feature_dim: int | None = None,
                   input_size: int = 299, seed: int = 0) -> FeatureExtractor:
    if kind == "stub":
        return StubExtractor(feature_dim or 64, seed=seed)
    if kind == "torchscript":
        if not weights:
            raise ValueError("the torchscript extractor needs a weights path")
        return TorchScriptExtractor(weights, feature_dim or 2048, input_size=input_size)
    raise ValueError(f"unknown extractor {kind!r}")
