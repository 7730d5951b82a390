"""Acceptance criteria, one test each.

Each test prints a ``criterion N: PASS|FAIL`` line (collected again in the
terminal summary). Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import math
import statistics
import time
from fractions import Fraction

import numpy as np
import pytest
import scipy.linalg
import torch
from torch import nn

from affgan import grid as gridmod
from affgan.augment import OPS, AugmentationOp, AugmentKind, augment_dataset, augment_image
from affgan.classify import BackboneSpec, build_classifier, evaluate, fine_tune
from affgan.config import ALL_MODELS, apply_overrides, read_config
from affgan.data import (
    NEUTRAL, AffectiveDataset, CategoryMap, RatingScale, build_dataset, label_record, split,
    synth_fixture,
)
from affgan.grid import ExperimentGrid, ScoreTable, run_grid
from affgan.metrics import (
    FeatureStats, MetricsContext, StubExtractor, extract_features, fid, fit_gaussian, kid,
    matrix_sqrt_psd,
)
from affgan.models import DiscVariant, Family, ModelSpec, build_discriminator, build_generator, spectral_normalize
from affgan.report import build_report
from affgan.training import (
    NonFiniteLossError, TrainConfig, bce_generator_loss, gradient_penalty, pagan_level_trace, train,
)


# --- 1 ------------------------------------------------------------------------

def test_criterion_01_metric_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    errs = {}
    a = fit_gaussian(rng.standard_normal((500, 32)))
    errs["fid(A,A)"] = abs(fid(a, a))
    e1 = np.eye(16)[0]
    errs["unit shift"] = abs(fid(FeatureStats(np.zeros(16), np.eye(16), 10),
                                 FeatureStats(e1, np.eye(16), 10)) - 1.0)
    worst = 0.0
    for seed in range(10):
        r = np.random.default_rng(seed)
        mu1, mu2 = r.standard_normal(8), r.standard_normal(8)
        s1 = (lambda m: m @ m.T / 8 + 1e-3 * np.eye(8))(r.standard_normal((8, 8)))
        s2 = (lambda m: m @ m.T / 8 + 1e-3 * np.eye(8))(r.standard_normal((8, 8)))
        oracle = float((mu1 - mu2) @ (mu1 - mu2) + np.trace(s1 + s2)
                       - 2 * np.trace(np.real(scipy.linalg.sqrtm(s1 @ s2))))
        worst = max(worst, abs(fid(FeatureStats(mu1, s1, 9), FeatureStats(mu2, s2, 9)) - oracle))
    errs["8-dim oracle"] = worst
    recon = 0.0
    for d in (2, 16, 64, 128, 256):
        m = rng.standard_normal((d, d))
        s = m @ m.T / d + 1e-3 * np.eye(d)
        root = matrix_sqrt_psd(s)
        recon = max(recon, np.linalg.norm(root @ root - s) / np.linalg.norm(s))
    errs["sqrt reconstruction"] = recon
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-6 for v in errs.values()) and elapsed < 60
    verdict(1, ok, ", ".join(f"{k}={v:.2e}" for k, v in errs.items()) + f", {elapsed:.1f}s")


# --- 2 ------------------------------------------------------------------------

def test_criterion_02_kid_unbiasedness(verdict):
    t0 = time.perf_counter()
    ext = StubExtractor(feature_dim=64)
    rng = np.random.default_rng(11)
    vals = []
    for _ in range(100):
        imgs = rng.integers(0, 256, size=(200, 3, 32, 32), dtype=np.uint8)
        f = extract_features(imgs, ext)
        perm = rng.permutation(200)
        vals.append(kid(f[perm[:100]], f[perm[100:]]))
    mean = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(len(vals)))
    x = [[1, 0, 2, 1], [0, 1, 1, 0], [2, 2, 0, 1]]
    y = [[1, 1, 1, 0], [0, 0, 3, 1], [1, 2, 0, 2]]

    def k(p, q):
        return (sum(Fraction(pi) * qi for pi, qi in zip(p, q)) / len(p) + 1) ** 3

    brute = (sum(k(x[i], x[j]) for i in range(3) for j in range(3) if i != j) / 6
             + sum(k(y[i], y[j]) for i in range(3) for j in range(3) if i != j) / 6
             - 2 * sum(k(x[i], y[j]) for i in range(3) for j in range(3)) / 9)
    exact = kid(np.array(x, float), np.array(y, float)) == float(brute)
    elapsed = time.perf_counter() - t0
    ok = abs(mean) <= 3 * se and exact and elapsed < 120
    verdict(2, ok, f"mean KID {mean:.3e} vs 3*SE {3 * se:.3e}, tiny exact={exact}, {elapsed:.1f}s")


# --- 3 and 4 ------------------------------------------------------------------

@pytest.fixture(scope="module")
def corpus_5866(tmp_path_factory):
    root = tmp_path_factory.mktemp("c5866")
    ds = build_dataset([synth_fixture(5866, seed=0, out_dir=root / "src", image_size=16)])
    aug = augment_dataset(ds, root / "aug")
    return ds, aug


def test_criterion_03_dataset_arithmetic(corpus_5866, verdict):
    ds, aug = corpus_5866
    tr, va = split(ds, 0.8, seed=0)
    q, c = sum(ds.quadrant_counts().values()), sum(ds.category_counts().values())
    ok = (len(ds) == 5866 and len(aug) == 46_928 and (len(tr), len(va)) == (4693, 1173)
          and q == c == 5866)
    verdict(3, ok, f"built {len(ds)}, augmented {len(aug)}, split ({len(tr)}, {len(va)}), "
                   f"quadrant sum {q}, category sum {c}")


def test_criterion_04_augmentation_correctness(corpus_5866, verdict):
    ds, aug = corpus_5866
    by_stem = {r.image_path.stem: r for r in ds}
    variants = [r for r in aug if r.augmentation]
    kept = sum((r.valence, r.arousal, r.quadrant, r.category)
               == (lambda s: (s.valence, s.arousal, s.quadrant, s.category))(
                   by_stem[r.image_path.stem.split("__")[0]]) for r in variants)
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(17, 23, 3), dtype=np.uint8)
    r90, r180, r270 = (AugmentationOp(k) for k in
                       (AugmentKind.ROTATE90, AugmentKind.ROTATE180, AugmentKind.ROTATE270))
    ident180 = np.array_equal(augment_image(augment_image(img, r180), r180), img)
    ident90 = np.array_equal(augment_image(augment_image(img, r90), r270), img)
    px = augment_image(np.full((2, 2, 3), 100, np.uint8), AugmentationOp(AugmentKind.BRIGHTEN))
    ok = kept == len(variants) == 7 * len(ds) and ident180 and ident90 and np.all(px == 120)
    verdict(4, ok, f"labels kept {kept}/{len(variants)}, rot180^2={ident180}, "
                   f"rot90.rot270={ident90}, brighten(100)={int(px[0, 0, 0])}")


# --- 5 ------------------------------------------------------------------------

def test_criterion_05_spectral_norm_bounds(verdict):
    disc = build_discriminator(ModelSpec(Family.DCGAN, DiscVariant.SPECTRALNORM), seed=0)
    shapes = [m.parametrizations.weight.original.shape for m in disc.modules()
              if isinstance(m, nn.Conv2d)]
    sigmas = []
    for i, shape in enumerate(shapes):
        g = torch.Generator().manual_seed(i)
        W = torch.randn(*shape, dtype=torch.float64, generator=g)
        u = torch.randn(shape[0], dtype=torch.float64, generator=g)
        for _ in range(200):  # converge the carried state as training would
            _, u = spectral_normalize(W, 1, u)
        w_sn, _ = spectral_normalize(W, 5, u)
        sigmas.append(float(np.linalg.svd(w_sn.reshape(shape[0], -1).numpy(), compute_uv=False)[0]))
    ok = all(0.95 <= s <= 1.05 for s in sigmas)
    verdict(5, ok, "layer sigmas " + ", ".join(f"{tuple(s)}:{v:.4f}" for s, v in zip(shapes, sigmas)))


# --- 6 ------------------------------------------------------------------------

def test_criterion_06_gradient_penalty(verdict):
    torch.manual_seed(0)
    net = nn.Sequential(nn.Conv2d(1, 4, 3, padding=1), nn.Tanh(), nn.Flatten(), nn.Linear(64, 1)).double()

    def critic(x):
        return net(x).reshape(len(x))

    g = torch.Generator().manual_seed(5)
    real = torch.randn(4, 1, 4, 4, dtype=torch.float64, generator=g)
    fake = torch.randn(4, 1, 4, 4, dtype=torch.float64, generator=g)
    eps = torch.rand(4, 1, 1, 1, dtype=torch.float64, generator=g)
    gp, norms = gradient_penalty(critic, real, fake, eps, weight=10.0)
    x_hat = eps * real + (1 - eps) * fake
    h = 1e-5
    fd_norms = []
    with torch.no_grad():
        for i in range(4):
            grad = torch.zeros(16, dtype=torch.float64)
            for j in range(16):
                e = torch.zeros(16, dtype=torch.float64)
                e[j] = h
                e = e.reshape(1, 1, 4, 4)
                grad[j] = (critic(x_hat[i:i + 1] + e) - critic(x_hat[i:i + 1] - e)).item() / (2 * h)
            fd_norms.append(float(grad.norm()))
    fd_norms = torch.tensor(fd_norms, dtype=torch.float64)
    fd_gp = 10.0 * float(((fd_norms - 1) ** 2).mean())
    rel = abs(float(gp) - fd_gp) / abs(fd_gp)
    rel_norms = float(((norms.detach() - fd_norms).abs() / fd_norms).max())

    a = torch.zeros(16, dtype=torch.float64)
    a[3] = 1.0
    gp0, _ = gradient_penalty(lambda x: x.reshape(len(x), -1) @ a, real, fake, eps, weight=10.0)
    ok = rel <= 1e-3 and rel_norms <= 1e-3 and float(gp0) == 0.0
    verdict(6, ok, f"penalty rel err {rel:.2e}, norm rel err {rel_norms:.2e}, unit-gradient gp={float(gp0)}")


# --- 7 ------------------------------------------------------------------------

def test_criterion_07_pagan_schedule(verdict):
    trace = pagan_level_trace([0.4] * 60, TrainConfig())
    levels = sorted(set(trace))
    monotone = all(a <= b for a, b in zip(trace, trace[1:]))
    spec = ModelSpec(Family.PAGAN, DiscVariant.BATCHNORM, width=8)
    channels = [build_discriminator(spec, lvl).in_channels for lvl in (0, 1, 2)]
    grown = build_discriminator(spec, 0)
    grown.grow(1)
    grown.grow(2)
    label = TrainConfig(real_label=0.9).effective_real_label(Family.PAGAN)
    ok = (levels == [0, 1, 2] and monotone and max(trace) == 2 and channels == [3, 4, 5]
          and grown.in_channels == 5 and label == 1.0)
    verdict(7, ok, f"levels {levels} (first rise at eval {trace.index(1) + 1}, second at "
                   f"{trace.index(2) + 1}), input channels {channels}, PAGAN real_label {label}")


# --- 8 ------------------------------------------------------------------------

SMOKE_WIDTH = 16


def test_criterion_08_smoke_training(tmp_path, verdict):
    t0 = time.perf_counter()
    ds = build_dataset([synth_fixture(1000, seed=0, out_dir=tmp_path / "fx", image_size=64)])
    spec = ModelSpec(Family.DCGAN, DiscVariant.DROPOUT, image_size=64, width=SMOKE_WIDTH)
    metrics = MetricsContext(StubExtractor())
    at5, at20 = [], []
    from affgan.training import Corpus
    corpus = Corpus.from_dataset(ds, 64, "smoke")
    for seed in range(3):
        res = train(spec, corpus, TrainConfig(epochs=20, eval_every_epochs=5, seed=seed), metrics)
        by_epoch = {e["epoch"]: e["fid"] for e in res.evaluations}
        at5.append(by_epoch[5])
        at20.append(by_epoch[20])
    m5, m20 = statistics.median(at5), statistics.median(at20)
    elapsed = time.perf_counter() - t0
    ok = m20 < m5 and elapsed <= 15 * 60
    verdict(8, ok, f"median FID epoch 5 {m5:.3f} -> epoch 20 {m20:.3f} "
                   f"(seeds {[round(v, 2) for v in at5]} -> {[round(v, 2) for v in at20]}), "
                   f"width {SMOKE_WIDTH}, {elapsed / 60:.1f} min")


# --- 9 ------------------------------------------------------------------------

def test_criterion_09_equilibrium_anchor(verdict):
    spec = ModelSpec(width=8)
    gen = build_generator(spec, seed=0)
    disc = build_discriminator(spec, seed=0)
    with torch.no_grad():
        disc.head.weight.zero_()  # sigmoid(0) = 0.5 for every input
    out = disc(gen(torch.randn(32, 100)))
    loss = float(bce_generator_loss(out))
    ok = bool(torch.all(out == 0.5)) and abs(loss - math.log(2)) <= 1e-6
    verdict(9, ok, f"D output 0.5 everywhere, generator BCE {loss:.8f} vs ln 2 {math.log(2):.8f}")


# --- 10 -----------------------------------------------------------------------

class _Pool(nn.Module):
    def __init__(self):
        super().__init__()
        self.mix = nn.Conv2d(3, 3, 1)
        self.pool = nn.AdaptiveAvgPool2d(2)

    def forward(self, x):
        return self.pool(self.mix(x)).flatten(1)


def _balanced(per_class):
    cmap = CategoryMap()
    scale = (RatingScale(-1, 1), RatingScale(-1, 1))
    recs = []
    for cat in cmap.categories:
        if cat == NEUTRAL:
            v = a = 0.0
        else:
            ang = math.radians(30 * cmap.sector_labels.index(cat) + 15)
            v, a = 0.8 * math.cos(ang), 0.8 * math.sin(ang)
        recs += [label_record(f"{cat}_{i}.png", "synthetic", v, a, scale, cmap) for i in range(per_class)]
    return AffectiveDataset(tuple(recs), cmap)


def test_criterion_10_classifier_harness(tmp_path, verdict):
    torch.manual_seed(0)
    path = tmp_path / "pool.pt"
    torch.jit.script(_Pool()).save(str(path))
    spec = BackboneSpec("pool", 12, str(path), input_size=16)

    ds = _balanced(100)
    rng = np.random.default_rng(2)
    noise = torch.from_numpy(rng.integers(0, 256, size=(len(ds), 3, 16, 16), dtype=np.uint8))
    chance = evaluate(build_classifier(spec, seed=0), noise, torch.from_numpy(ds.labels()))

    sep = _balanced(40)
    codes = rng.normal(size=(13, 3, 2, 2))
    codes /= np.linalg.norm(codes.reshape(13, -1), axis=1)[:, None, None, None]
    base = np.repeat(np.repeat(codes[sep.labels()], 8, axis=2), 8, axis=3)
    imgs = np.clip(127.5 + 90 * base + rng.normal(scale=4, size=base.shape), 0, 255).astype(np.uint8)
    res = fine_tune(spec, sep, epochs=5, seed=0, lr=0.05, batch_size=16, images=imgs)
    ok = len(ds) == 1300 and abs(chance - 1 / 13) <= 0.02 and res.best_val_accuracy > 0.90
    verdict(10, ok, f"random head {chance:.4f} vs 1/13={1 / 13:.4f} on {len(ds)}, "
                    f"separable best val {res.best_val_accuracy:.3f} at epoch {res.best_epoch}")


# --- 11 -----------------------------------------------------------------------

def test_criterion_11_grid_bookkeeping(tmp_path, monkeypatch, verdict):
    datasets = {}
    for i, name in enumerate(("affective", "augmented", "natural")):
        m = synth_fixture(16, seed=i, out_dir=tmp_path / name, image_size=32)
        from affgan.data import dataset_to_csv
        datasets[name] = str(dataset_to_csv(build_dataset([m]), tmp_path / name / "dataset.csv"))
    cfg = read_config(None)
    # dry-run settings, as `affgan grid --dry-run`
    cfg = apply_overrides(cfg, {
        "model": {"image_size": 32, "width": 8},
        "train": {"epochs": 1, "eval_every_epochs": 1, "batch_size": 8, "metric_batch": 16},
        "metrics": {"extractor": "stub", "feature_dim": 64},
        "grid": {"models": ", ".join(f"{f}:{v}" for f, v in ALL_MODELS),
                 "datasets": ", ".join(f"{k}={v}" for k, v in datasets.items())},
    })
    grid = ExperimentGrid.from_config(cfg, tmp_path / "results")

    real_train = gridmod.train

    def sometimes_diverging(spec, corpus, *a, **k):
        if spec.model_id == "wgan_gp-dropout" and corpus.name == "natural":
            raise NonFiniteLossError("critic loss", 1, 0)
        return real_train(spec, corpus, *a, **k)

    monkeypatch.setattr(gridmod, "train", sometimes_diverging)
    table = run_grid(grid)
    rows = ScoreTable.read_csv(tmp_path / "results" / "scores.csv").rows
    failed = [(r.model, r.dataset) for r in rows if r.status == "failed"]
    completed = sum(r.status == "completed" and math.isfinite(r.best_fid) for r in rows)
    build_report(tmp_path / "results", tmp_path / "r1")
    build_report(tmp_path / "results", tmp_path / "r2")
    names = sorted(p.name for p in (tmp_path / "r1").iterdir())
    identical = names == sorted(p.name for p in (tmp_path / "r2").iterdir()) and all(
        (tmp_path / "r1" / n).read_bytes() == (tmp_path / "r2" / n).read_bytes() for n in names)
    ok = (len(grid.cells) == 36 and len(rows) == len(table.rows) == 36
          and failed == [("wgan_gp-dropout", "natural")] and completed == 35 and identical)
    verdict(11, ok, f"{len(rows)} rows, failed {failed}, {completed} completed, "
                    f"{len(names)} report files byte-identical={identical}")


# --- 12 -----------------------------------------------------------------------

@pytest.mark.skip(reason="optional directional benchmark: needs a 5,000-image natural subset "
                         "and 100-epoch runs; not part of CI")
def test_criterion_12_directional_dropout_vs_spectral_norm():
    pass
