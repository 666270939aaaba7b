import math

import numpy as np
import pytest
import torch

from mpmae.errors import InvalidArgument
from mpmae.losses import TaskLossResult, aggregate_multitask, image_level_loss, masked_cross_entropy, masked_mse
from mpmae.masking import PatchGrid, sample_masks, upsample_mask_to_pixels
from mpmae.model import DecoderConfig, EncoderConfig, MPMAE
from mpmae.pretrain import compute_task_losses
from mpmae.schema import build_modality_registry, default_tasks, select_tasks


def test_mse_example():
    pred = torch.zeros(1, 1, 2, 2)
    target = torch.tensor([[[[1.0, 3.0], [5.0, 7.0]]]])
    m = torch.tensor([[[True, True], [False, False]]])
    loss, n = masked_mse(pred, target, m)
    assert loss.item() == pytest.approx(5.0) and n == 2


def test_mse_excludes_invalid_and_nonfinite():
    pred = torch.zeros(1, 1, 2, 2, requires_grad=True)
    target = torch.tensor([[[[2.0, float("nan")], [1.0, 1.0]]]])
    m = torch.ones(1, 2, 2, dtype=torch.bool)
    valid = torch.isfinite(target[:, 0])
    loss, n = masked_mse(pred, target, m, valid)
    assert n == 3 and loss.item() == pytest.approx(2.0)
    loss.backward()
    assert torch.isfinite(pred.grad).all() and pred.grad[0, 0, 0, 1] == 0


def test_mse_nothing_scored():
    loss, n = masked_mse(torch.ones(1, 2, 4, 4), torch.zeros(1, 2, 4, 4), torch.zeros(1, 4, 4, dtype=torch.bool))
    assert n == 0 and loss.item() == 0


def test_ce_uniform_is_log_k():
    k = 7
    loss, n = masked_cross_entropy(torch.zeros(2, k, 3, 3), torch.randint(0, k, (2, 3, 3)), torch.ones(2, 3, 3, dtype=torch.bool))
    assert loss.item() == pytest.approx(math.log(k)) and n == 18


def test_ce_with_ignore_matches_oracle():
    g = torch.Generator().manual_seed(0)
    scores = torch.randn(2, 5, 4, 4, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 5, (2, 4, 4), generator=g)
    mask = torch.rand(2, 4, 4, generator=g) > 0.3
    loss, n = masked_cross_entropy(scores, labels, mask, ignore_label=0)
    terms = []
    for b in range(2):
        for i in range(4):
            for j in range(4):
                if mask[b, i, j] and labels[b, i, j] != 0:
                    s = scores[b, :, i, j].numpy()
                    terms.append(np.log(np.exp(s).sum()) - s[labels[b, i, j]])
    assert n == len(terms)
    assert loss.item() == pytest.approx(np.mean(terms), abs=1e-12)


def test_image_level_mse_unit():
    reg = build_modality_registry(raster_size=32)
    lat = {t.task_id: t for t in default_tasks(reg)}["latitude"]
    loss, n = image_level_loss(torch.zeros(4, 2), torch.tensor([[1.0, 0.0]] * 4), lat)
    # mean over both components of a unit vector vs 0
    assert loss.item() == pytest.approx(0.5) and n == 4
    loss, n = image_level_loss(torch.zeros(2, 2), torch.tensor([[0.0, 1.0], [float("nan"), 0.0]]), lat)
    assert n == 1


def _results(vals):
    return [TaskLossResult(f"t{i}", torch.tensor(v), 1) for i, v in enumerate(vals)]


def test_aggregate_zero_log_vars_equals_sum():
    vals = [0.3, 1.7, 2.0]
    idx = {f"t{i}": i for i in range(3)}
    u = aggregate_multitask(_results(vals), torch.zeros(3), "uncertainty", idx)
    e = aggregate_multitask(_results(vals), torch.zeros(3), "equal", idx)
    assert u.item() == pytest.approx(sum(vals)) == e.item()


def test_aggregate_worked_example():
    s = torch.tensor([math.log(4.0)], requires_grad=True)
    total = aggregate_multitask(_results([2.0]), s, "uncertainty", {"t0": 0})
    assert total.item() == pytest.approx(0.5 + math.log(4) / 2, abs=1e-6)
    assert total.item() == pytest.approx(1.193, abs=1e-3)
    total.backward()
    assert s.grad.item() == pytest.approx(-2.0 / 4 + 0.5)


def test_aggregate_optimum_is_log_loss():
    s = torch.zeros(1, requires_grad=True)
    opt = torch.optim.SGD([s], lr=0.5)
    for _ in range(300):
        opt.zero_grad()
        aggregate_multitask(_results([3.0]), s, "uncertainty", {"t0": 0}).backward()
        opt.step()
    assert s.item() == pytest.approx(math.log(6.0), abs=1e-3)


def test_aggregate_skips_and_order():
    idx = {"t0": 0, "t1": 1, "t2": 2}
    s = torch.tensor([0.1, 0.7, -0.2], dtype=torch.float64)
    rs = _results([1.0, 2.0, 3.0])
    rs[1] = TaskLossResult("t1", torch.tensor(0.0), 0)
    a = aggregate_multitask(rs, s, "uncertainty", idx)
    want = math.exp(-0.1) * 1 + 0.05 + math.exp(0.2) * 3 - 0.1
    assert a.item() == pytest.approx(want)
    b = aggregate_multitask(list(reversed(rs)), s, "uncertainty", idx)
    assert a.item() == b.item()
    with pytest.raises(InvalidArgument):
        aggregate_multitask([TaskLossResult("t0", torch.tensor(0.0), 0)], s, "equal", idx)
    with pytest.raises(InvalidArgument):
        aggregate_multitask(rs, s, "bogus", idx)


def test_loss_gradients_only_through_masked_targets():
    reg = build_modality_registry(raster_size=32)
    grid = PatchGrid(32, 8)
    model = MPMAE(
        EncoderConfig(12, (1, 1, 1, 1), (8, 8, 8, 8), image_size=32, patch_size=8),
        select_tasks(reg, "sentinel2,dynamic_world"),
        DecoderConfig(16),
    )
    x = torch.randn(2, 12, 32, 32, requires_grad=True)
    batch = {
        "input": x,
        "sentinel2": x,
        "dynamic_world": torch.randint(0, 10, (2, 1, 32, 32)).float(),
        "valid/sentinel2": torch.ones(2, 32, 32, dtype=torch.bool),
    }
    mask = sample_masks(grid, 0.5, 2, torch.Generator().manual_seed(0))
    preds = model(x, mask)
    preds = {k: v.detach().requires_grad_(True) for k, v in preds.items()}
    results, _ = compute_task_losses(model, preds, batch, mask, grid)
    sum(r.raw_loss for r in results).backward()
    pix = upsample_mask_to_pixels(mask, grid)
    for k in preds:
        g = preds[k].grad.abs().sum(1)
        assert (g[~pix] == 0).all()
        assert (g[pix] > 0).any()
