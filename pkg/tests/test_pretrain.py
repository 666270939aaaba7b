import math

import pytest
import torch

from mpmae.checkpoint import load_checkpoint, load_state_strict, save_checkpoint, tensor_digest
from mpmae.errors import ConfigError, IntegrityError, NumericError, ShapeMismatch, UnsupportedVersion
from mpmae.pretrain import PretrainConfig, lr_schedule, model_from_checkpoint, run_pretraining


def small_cfg(**kw):
    base = dict(
        epochs=2,
        base_lr=1e-3,
        effective_batch=32,
        batch_size=16,
        warmup_epochs=1,
        crop_size=32,
        patch_size=8,
        widths=(8, 8, 8, 8),
        depths=(1, 1, 1, 1),
        decoder_width=16,
        tasks="sentinel2,dynamic_world,biome,latitude",
    )
    return PretrainConfig(**{**base, **kw})


def test_lr_schedule_shape():
    total, warm, peak = 100, 10, 1e-3
    assert lr_schedule(0, total, warm, peak) == 0.0
    assert lr_schedule(5, total, warm, peak) == pytest.approx(peak / 2)
    assert lr_schedule(warm, total, warm, peak) == pytest.approx(peak)
    assert lr_schedule(total - 1, total, warm, peak) < 1e-8
    lrs = [lr_schedule(s, total, warm, peak) for s in range(warm, total)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_peak_lr_scaling():
    assert PretrainConfig(base_lr=1.5e-4, effective_batch=4096, batch_size=64).peak_lr == pytest.approx(2.4e-3)


@pytest.mark.parametrize("bad", [dict(loss_mode="x"), dict(crop_size=30), dict(effective_batch=20, batch_size=16), dict(epochs=0)])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        small_cfg(**bad)


@pytest.fixture(scope="module")
def trained(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_pretraining(tiny_dataset, small_cfg(), out), out


def test_checkpoint_roundtrip(trained):
    res, _ = trained
    ckpt = load_checkpoint(res.checkpoint_path)
    model = model_from_checkpoint(ckpt)
    assert tensor_digest(dict(model.state_dict())) == tensor_digest(dict(res.model.state_dict()))
    assert ckpt.epoch == 2 and ckpt.config["tasks"] == ["sentinel2", "dynamic_world", "biome", "latitude"]


def test_checkpoint_corruption(trained, tmp_path):
    res, _ = trained
    raw = bytearray(res.checkpoint_path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_checkpoint(bad)


def test_checkpoint_version(tmp_path):
    import hashlib

    p = save_checkpoint(tmp_path / "a.ckpt", torch.nn.Linear(2, 2), {}, 0)
    body = bytearray(p.read_bytes()[:-32])
    body[8:12] = (7).to_bytes(4, "little")
    p.write_bytes(bytes(body) + hashlib.sha256(bytes(body)).digest())
    with pytest.raises(UnsupportedVersion):
        load_checkpoint(p)


def test_shape_mismatch_names_tensor():
    with pytest.raises(ShapeMismatch, match="weight"):
        load_state_strict(torch.nn.Linear(3, 2), torch.nn.Linear(2, 2).state_dict())


def test_log_has_every_task_and_log_var(trained):
    res, out = trained
    rows = res.log.epoch_rows(1)
    assert [r["task_id"] for r in rows] == ["sentinel2", "dynamic_world", "biome", "latitude"]
    assert all(math.isfinite(r["raw_loss"]) and math.isfinite(r["log_var"]) for r in rows)
    assert (out / "train_log.csv").exists()


def test_reproducible_logs(tiny_dataset, tmp_path, trained):
    res, out = trained
    again = run_pretraining(tiny_dataset, small_cfg(), tmp_path)
    assert (tmp_path / "train_log.csv").read_bytes() == (out / "train_log.csv").read_bytes()
    assert tensor_digest(dict(again.model.state_dict())) == tensor_digest(dict(res.model.state_dict()))


def test_resume_is_bit_exact(tiny_dataset, tmp_path, trained):
    res, out = trained
    first = run_pretraining(tiny_dataset, small_cfg(), tmp_path, stop_after_epoch=1)
    assert first.epoch == 1
    resumed = run_pretraining(tiny_dataset, small_cfg(), tmp_path, resume=first.checkpoint_path)
    assert tensor_digest(dict(resumed.model.state_dict())) == tensor_digest(dict(res.model.state_dict()))
    assert (tmp_path / "train_log.csv").read_bytes() == (out / "train_log.csv").read_bytes()


def test_equal_mode_matches_frozen_uncertainty(tiny_dataset):
    a = run_pretraining(tiny_dataset, small_cfg(epochs=1, loss_mode="equal"))
    b = run_pretraining(tiny_dataset, small_cfg(epochs=1, loss_mode="uncertainty", freeze_log_vars=True))
    assert a.log.totals() == pytest.approx(b.log.totals(), rel=1e-6)
    assert torch.allclose(
        torch.cat([p.flatten() for p in a.model.encoder.parameters()]),
        torch.cat([p.flatten() for p in b.model.encoder.parameters()]),
        atol=1e-6,
    )


def test_log_vars_move_in_uncertainty_mode(trained):
    res, _ = trained
    assert res.model.log_vars.detach().abs().max() > 0


def test_non_finite_loss_raises(tiny_dataset, monkeypatch):
    import mpmae.pretrain as pt

    real = pt.compute_task_losses

    def poisoned(*a, **k):
        results, used = real(*a, **k)
        results[0].raw_loss = results[0].raw_loss * float("nan")
        return results, used

    monkeypatch.setattr(pt, "compute_task_losses", poisoned)
    with pytest.raises(NumericError, match="sentinel2"):
        run_pretraining(tiny_dataset, small_cfg(epochs=1))
