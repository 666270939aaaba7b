"""Masked per-task losses and the multi-task aggregation.

Pixel-level losses only score pixels inside masked patches that also hold
valid data. The multi-task total is

    sum_t exp(-s_t) * L_t + s_t / 2,      s_t = log(sigma_t^2)

in ``uncertainty`` mode, and ``sum_t L_t`` in ``equal`` mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import InvalidArgument
from .schema import TaskSpec

EQUAL = "equal"
UNCERTAINTY = "uncertainty"
LOSS_MODES = (EQUAL, UNCERTAINTY)


@dataclass
class TaskLossResult:
    task_id: str
    raw_loss: torch.Tensor
    count: int
    weighted: torch.Tensor | None = None

    @property
    def skipped(self) -> bool:
        return self.count == 0


def masked_mse(pred, target, pixel_mask, valid_mask=None) -> tuple[torch.Tensor, int]:
    """Mean squared error over pixels that are masked and valid.

    ``pred``/``target``: (B, C, H, W); ``pixel_mask``/``valid_mask``: (B, H, W)
    bool. Returns (loss, scored element count); the loss is 0 with count 0
    when nothing is scoreable.
    """
    if pred.shape != target.shape:
        raise InvalidArgument(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    keep = pixel_mask if valid_mask is None else pixel_mask & valid_mask
    w = keep.unsqueeze(1).expand_as(pred)
    count = int(w.sum())
    if count == 0:
        return pred.sum() * 0.0, 0
    # sanitise before differencing so a NaN target cannot leak NaN into the gradient
    target = torch.where(w, target, pred.detach())
    sq = torch.where(w, (pred - target) ** 2, torch.zeros((), dtype=pred.dtype))
    return sq.sum() / count, count


def masked_cross_entropy(scores, labels, pixel_mask, ignore_label: int | None = None) -> tuple[torch.Tensor, int]:
    """Mean NLL over masked pixels whose label is not ``ignore_label``.

    ``scores``: (B, K, H, W); ``labels``: (B, H, W) integer.
    """
    labels = labels.long()
    keep = pixel_mask.clone()
    if ignore_label is not None:
        keep &= labels != ignore_label
    count = int(keep.sum())
    if count == 0:
        return scores.sum() * 0.0, 0
    logp = F.log_softmax(scores, dim=1)
    nll = -logp.gather(1, labels.clamp(0, scores.shape[1] - 1).unsqueeze(1)).squeeze(1)
    return torch.where(keep, nll, torch.zeros((), dtype=nll.dtype)).sum() / count, count


def image_level_loss(pred, target, task: TaskSpec) -> tuple[torch.Tensor, int]:
    """MSE for continuous image-level tasks, cross entropy for categorical ones.

    Samples with non-finite targets are dropped from the task.
    """
    if task.is_pixel:
        raise InvalidArgument(f"{task.task_id} is pixel-level")
    if task.is_classification:
        labels = target.reshape(-1)
        ok = torch.isfinite(labels.float()) if labels.is_floating_point() else torch.ones_like(labels, dtype=torch.bool)
        if not ok.any():
            return pred.sum() * 0.0, 0
        return F.cross_entropy(pred[ok], labels[ok].long()), int(ok.sum())
    ok = torch.isfinite(target).all(dim=1)
    if not ok.any():
        return pred.sum() * 0.0, 0
    return F.mse_loss(pred[ok], target[ok]), int(ok.sum())


def aggregate_multitask(results: Sequence[TaskLossResult], log_vars, mode: str, task_index: dict[str, int]) -> torch.Tensor:
    """Combine task losses. Skipped tasks contribute nothing, not even s_t/2.

    ``log_vars`` is the vector of s_t; ``task_index`` maps task id to its slot.
    Fills ``weighted`` on each result.
    """
    if mode not in LOSS_MODES:
        raise InvalidArgument(f"loss mode must be one of {LOSS_MODES}, got {mode!r}")
    live = [r for r in results if not r.skipped]
    if not live:
        raise InvalidArgument("no task produced a scoreable loss")
    # fixed reduction order (task slot order) regardless of list order
    live.sort(key=lambda r: task_index[r.task_id])
    total = None
    for r in live:
        if mode == UNCERTAINTY:
            s = log_vars[task_index[r.task_id]]
            term = torch.exp(-s) * r.raw_loss + 0.5 * s
        else:
            term = r.raw_loss
        r.weighted = term
        total = term if total is None else total + term
    return total
