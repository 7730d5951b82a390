import csv
import math

import numpy as np
import pytest
import torch
from torch import nn

from affgan.metrics import MetricsContext, StubExtractor
from affgan.models import DiscVariant, Family, ModelSpec
from affgan.training import (
    CheckpointIntegrityError, Corpus, NonFiniteLossError, RunResult, SpecMismatchError, TrainConfig,
    bce_discriminator_loss, bce_generator_loss, derive_seed, gan_step, gradient_penalty, load_checkpoint,
    make_state, pagan_level_trace, pagan_schedule, restore_state, save_checkpoint, state_payload,
    to_unit_range, train, wgan_gp_step,
)

METRICS = MetricsContext(StubExtractor())


def _spec(family=Family.DCGAN, variant=DiscVariant.BATCHNORM, **kw):
    classes = 13 if family in (Family.CGAN, Family.ACGAN) else 0
    return ModelSpec(family, variant, image_size=32, width=8, num_classes=classes, **kw)


def _corpus(n=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    imgs = torch.randint(0, 256, (n, 3, 32, 32), dtype=torch.uint8, generator=g)
    return Corpus(imgs, torch.arange(n) % 13, "toy")


def _cfg(**kw):
    base = dict(epochs=2, batch_size=8, eval_every_epochs=1, metric_batch=8, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# --- losses ------------------------------------------------------------------------

def test_generator_loss_at_equilibrium_is_ln2():
    assert abs(float(bce_generator_loss(torch.full((64,), 0.5))) - math.log(2)) <= 1e-6


def test_smoothed_real_side_bce():
    d_real = torch.full((4,), 0.9, dtype=torch.float64)
    d_fake = torch.zeros(4, dtype=torch.float64)
    expected = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
    assert abs(expected - 0.3251) < 5e-5
    assert float(bce_discriminator_loss(d_real, d_fake, 0.9)) == pytest.approx(expected, abs=1e-9)


def test_discriminator_step_descends_on_fixed_batch():
    spec = _spec()
    cfg = _cfg()
    state = make_state(spec, cfg)
    real = to_unit_range(_corpus(8).images)
    z = torch.randn(8, spec.latent_dim, generator=torch.Generator().manual_seed(1))
    state.disc.eval()
    state.gen.eval()
    with torch.no_grad():
        fake = state.gen(z)

    def d_loss():
        return bce_discriminator_loss(state.disc(real), state.disc(fake), cfg.real_label)

    before = float(d_loss())
    state.opt_d.zero_grad()
    d_loss().backward()
    state.opt_d.step()
    assert float(d_loss()) < before


@pytest.mark.parametrize("family", [Family.DCGAN, Family.CGAN, Family.ACGAN, Family.PAGAN])
def test_gan_step_returns_finite_losses(family):
    spec = _spec(family)
    state = make_state(spec, _cfg())
    corpus = _corpus(8)
    loss_d, loss_g = gan_step(state, to_unit_range(corpus.images), _cfg(),
                              torch.Generator().manual_seed(0), corpus.labels)
    assert math.isfinite(loss_d) and math.isfinite(loss_g)
    with pytest.raises(ValueError):
        gan_step(state, to_unit_range(corpus.images[:0]), _cfg(), torch.Generator())


def test_pagan_forces_hard_real_labels():
    cfg = _cfg(real_label=0.9)
    assert cfg.effective_real_label(Family.PAGAN) == 1.0
    assert cfg.effective_real_label(Family.DCGAN) == 0.9


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.lr_discriminator, cfg.lr_generator) == (2e-4, 5e-4)
    assert cfg.adam_betas == (0.5, 0.999) and cfg.gp_lambda == 10.0
    assert cfg.resolved_critic_steps(Family.WGAN_GP) == 5
    assert cfg.resolved_critic_steps(Family.DCGAN) == 1


# --- gradient penalty ------------------------------------------------------------

def test_gradient_penalty_vanishes_for_unit_gradient():
    a = torch.randn(16, dtype=torch.float64)
    a = a / a.norm()

    def critic(x):
        return x.reshape(len(x), -1) @ a

    real, fake = torch.randn(5, 16, dtype=torch.float64), torch.randn(5, 16, dtype=torch.float64)
    gp, norms = gradient_penalty(critic, real, fake, torch.rand(5, 1, dtype=torch.float64), weight=10.0)
    assert float(gp) == 0.0 or abs(float(gp)) < 1e-28
    assert torch.allclose(norms, torch.ones(5, dtype=torch.float64))


def test_gradient_penalty_equals_lambda_for_norm_two():
    # D(x) = 2 * sum(x) on a one-dimensional input has gradient norm 2
    def critic(x):
        return 2 * x.reshape(len(x), -1).sum(dim=1)

    real, fake = torch.randn(6, 1), torch.randn(6, 1)
    gp, _ = gradient_penalty(critic, real, fake, torch.rand(6, 1), weight=10.0)
    assert float(gp) == pytest.approx(10.0, rel=1e-12)


def _toy_critic():
    torch.manual_seed(0)
    return nn.Sequential(nn.Conv2d(1, 4, 3, padding=1), nn.Tanh(), nn.Flatten(),
                         nn.Linear(64, 1)).double()


def test_gradient_norms_match_finite_differences():
    net = _toy_critic()

    def critic(x):
        return net(x).reshape(len(x))

    g = torch.Generator().manual_seed(3)
    real = torch.randn(3, 1, 4, 4, dtype=torch.float64, generator=g)
    fake = torch.randn(3, 1, 4, 4, dtype=torch.float64, generator=g)
    eps = torch.rand(3, 1, 1, 1, dtype=torch.float64, generator=g)
    _, norms = gradient_penalty(critic, real, fake, eps)
    x_hat = eps * real + (1 - eps) * fake
    h = 1e-5
    with torch.no_grad():
        for i in range(3):
            grad = torch.zeros(16, dtype=torch.float64)
            for j in range(16):
                e = torch.zeros(16, dtype=torch.float64)
                e[j] = h
                e = e.reshape(1, 1, 4, 4)
                grad[j] = (critic(x_hat[i:i + 1] + e) - critic(x_hat[i:i + 1] - e)) / (2 * h)
            assert abs(float(norms[i]) - float(grad.norm())) <= 1e-3 * float(grad.norm())


def test_wgan_step_runs_critic_steps_and_reports_gp():
    spec = _spec(Family.WGAN_GP)
    cfg = _cfg(critic_steps=3)
    state = make_state(spec, cfg)
    calls = []
    orig = state.opt_d.step
    state.opt_d.step = lambda *a, **k: (calls.append(1), orig(*a, **k))[1]
    loss_d, loss_g, gp = wgan_gp_step(state, to_unit_range(_corpus(8).images), cfg,
                                      torch.Generator().manual_seed(0))
    assert len(calls) == 3
    assert all(math.isfinite(v) for v in (loss_d, loss_g, gp)) and gp >= 0
    with pytest.raises(ValueError):
        wgan_gp_step(make_state(_spec(), cfg), to_unit_range(_corpus(8).images), cfg, torch.Generator())


# --- PAGAN schedule --------------------------------------------------------------

def test_pagan_schedule_examples():
    cfg = TrainConfig()
    assert pagan_schedule([], cfg) == 0
    assert pagan_schedule([1.0 / (i + 1) for i in range(30)], cfg) == 0
    assert pagan_schedule([0.5] * 6, cfg) == 1
    assert pagan_schedule([0.5] * 5, cfg) == 0
    assert pagan_schedule([0.5] * 200, cfg) == 2


def test_pagan_trace_monotone_and_bounded():
    rng = np.random.default_rng(0)
    cfg = TrainConfig()
    for _ in range(50):
        hist = rng.uniform(0, 1, size=rng.integers(0, 60)).tolist()
        trace = pagan_level_trace(hist, cfg)
        assert all(a <= b for a, b in zip(trace, trace[1:]))
        assert all(0 <= t <= 2 for t in trace)


def test_pagan_flat_history_levels():
    trace = pagan_level_trace([0.3] * 12, TrainConfig())
    assert trace[5] == 1 and trace[4] == 0
    assert trace[11] == 2 and max(trace) == 2


def test_pagan_small_improvement_counts_as_stall():
    # 1% relative gain between windows is below the 2% threshold
    hist = [1.0, 1.0, 1.0, 0.99, 0.995, 0.999]
    assert pagan_schedule(hist, TrainConfig()) == 1
    hist = [1.0, 1.0, 1.0, 0.9, 0.95, 0.99]
    assert pagan_schedule(hist, TrainConfig()) == 0


# --- checkpoints --------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    spec = _spec()
    state = make_state(spec, _cfg())
    path = save_checkpoint(tmp_path / "c.ckpt", spec, 7, state_payload(state))
    got_spec, epoch, payload = load_checkpoint(path, spec)
    assert got_spec == spec and epoch == 7
    restored = restore_state(spec, _cfg(), payload)
    for a, b in zip(state.gen.state_dict().values(), restored.gen.state_dict().values()):
        assert torch.equal(a, b)
    for a, b in zip(state.disc.state_dict().values(), restored.disc.state_dict().values()):
        assert torch.equal(a, b)


def test_checkpoint_spec_mismatch(tmp_path):
    spec = _spec()
    path = save_checkpoint(tmp_path / "c.ckpt", spec, 1, {"x": 1})
    with pytest.raises(SpecMismatchError):
        load_checkpoint(path, _spec(latent_dim=64))


def test_checkpoint_truncation_and_corruption(tmp_path):
    spec = _spec()
    path = save_checkpoint(tmp_path / "c.ckpt", spec, 1, state_payload(make_state(spec, _cfg())))
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(path)
    flipped = bytearray(raw)
    flipped[-10] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(path)


# --- train -------------------------------------------------------------------------

def test_derive_seed_is_stable():
    assert derive_seed(0, 1) == derive_seed(0, 1)
    assert derive_seed(0, 1) != derive_seed(0, 2)
    assert derive_seed(0, "eval") != derive_seed(1, "eval")


@pytest.mark.parametrize("epochs, every, expected", [(5, 5, 1), (4, 1, 4), (7, 2, 3)])
def test_evaluation_cadence(epochs, every, expected):
    res = train(_spec(), _corpus(), _cfg(epochs=epochs, eval_every_epochs=every), METRICS)
    assert len(res.evaluations) == expected == epochs // every
    assert [e["epoch"] for e in res.evaluations] == [every * (i + 1) for i in range(expected)]


def test_train_outputs(tmp_path):
    res = train(_spec(), _corpus(), _cfg(epochs=2), METRICS, out_dir=tmp_path)
    assert res.status == "completed"
    for name in ("train_log.csv", "metrics.csv", "run_result.json",
                 "samples/epoch_0001.png", "samples/epoch_0002.png",
                 "checkpoints/epoch_0001.ckpt", "checkpoints/epoch_0002.ckpt"):
        assert (tmp_path / name).exists(), name
    with open(tmp_path / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2  # 16 images, batch 8
    loaded = RunResult.load(tmp_path / "run_result.json")
    assert loaded.best_fid == res.best_fid and len(loaded.evaluations) == 2


def test_training_is_deterministic(tmp_path):
    a = train(_spec(), _corpus(), _cfg(epochs=2), METRICS, out_dir=tmp_path / "a")
    b = train(_spec(), _corpus(), _cfg(epochs=2), METRICS, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    assert a.evaluations == b.evaluations


@pytest.mark.parametrize("family", [Family.DCGAN, Family.PAGAN, Family.WGAN_GP])
def test_resume_matches_uninterrupted_run(tmp_path, family):
    spec = _spec(family)
    cfg = _cfg(epochs=4, critic_steps=2 if family is Family.WGAN_GP else None)
    full = train(spec, _corpus(), cfg, METRICS, out_dir=tmp_path / "full")
    part = tmp_path / "part"
    train(spec, _corpus(), cfg, METRICS, out_dir=part, stop_after_epoch=2)
    assert not (part / "run_result.json").exists()
    resumed = train(spec, _corpus(), cfg, METRICS, out_dir=part, resume=True)
    assert resumed.evaluations == full.evaluations
    assert (part / "train_log.csv").read_bytes() == (tmp_path / "full" / "train_log.csv").read_bytes()
    for a, b in zip(full.state.gen.state_dict().values(), resumed.state.gen.state_dict().values()):
        assert torch.equal(a, b)


def test_wgan_log_has_gp_column(tmp_path):
    train(_spec(Family.WGAN_GP), _corpus(), _cfg(epochs=1, critic_steps=1), METRICS, out_dir=tmp_path)
    with open(tmp_path / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(float(r["gp"]) >= 0 for r in rows)
    assert any(float(r["gp"]) > 0 for r in rows)


def test_pagan_levels_recorded_in_run():
    res = train(_spec(Family.PAGAN), _corpus(), _cfg(epochs=3), METRICS)
    assert len(res.pagan_level_trace) == 3
    assert all(0 <= t <= 2 for t in res.pagan_level_trace)
    assert res.state.disc.in_channels == 3 + res.pagan_level_trace[-1]


def test_pagan_growth_during_training(monkeypatch):
    import affgan.training as tr

    # constant KID drives the schedule up as soon as two windows exist
    monkeypatch.setattr(tr, "evaluate_generator", lambda *a, **k: (1.0, 0.5))
    cfg = _cfg(epochs=14, pagan_stall_window=1)
    res = train(_spec(Family.PAGAN), _corpus(8), cfg, METRICS)
    assert res.pagan_level_trace[:3] == [0, 1, 1]
    assert max(res.pagan_level_trace) == 2
    assert res.state.disc.in_channels == 5


def test_non_finite_loss_aborts_with_location(monkeypatch):
    import affgan.training as tr

    monkeypatch.setattr(tr, "bce_generator_loss", lambda d: torch.tensor(float("nan")))
    with pytest.raises(NonFiniteLossError) as err:
        train(_spec(), _corpus(), _cfg(epochs=1), METRICS)
    assert "epoch 1" in str(err.value) and "step 0" in str(err.value)


def test_train_rejects_mismatched_corpus():
    with pytest.raises(ValueError):
        train(ModelSpec(width=8), _corpus(), _cfg(), METRICS)
