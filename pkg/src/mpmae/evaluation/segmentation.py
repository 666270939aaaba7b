"""U-Net segmenter on the encoder's feature pyramid, with two-phase fine-tuning."""

from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, InvariantViolation
from ..model import LayerNorm2d, MaskedEncoder, init_weights
from .downstream import SEGMENTATION, DownstreamTask
from .metrics import macro_iou
from .probe import FT, MetricReport, ProbeConfig, _fit, encoder_digest


class UpBlock(nn.Module):
    """Nearest-neighbour upsample, concat skip, 3x3 conv, LayerNorm, GELU."""

    def __init__(self, in_dim: int, skip_dim: int, out_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(in_dim + skip_dim, out_dim, kernel_size=3, padding=1)
        self.norm = LayerNorm2d(out_dim, eps=1e-6)
        self.act = nn.GELU()

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
        return self.act(self.norm(self.conv(torch.cat([x, skip], dim=1))))


class UNetSegmenter(nn.Module):
    """Decoder walks the pyramid from the deepest stage up to input resolution.

    With the modified stem the pyramid starts with full-resolution stem
    features, giving four skip connections; otherwise a final upsample
    without skip restores the input size.
    """

    def __init__(self, encoder: MaskedEncoder, num_classes: int, width: int | None = None):
        super().__init__()
        dims = encoder.pyramid_dims() if hasattr(encoder, "pyramid_dims") else ()
        if len(dims) < 4:
            raise ConfigError("encoder exposes no feature pyramid")
        self.encoder = encoder
        skips = dims[:-1][::-1]
        width = width or dims[0]
        self.up = nn.ModuleList()
        cur = dims[-1]
        for i, sd in enumerate(skips):
            out = max(width, skips[i])
            self.up.append(UpBlock(cur, sd, out))
            cur = out
        self.head = nn.Conv2d(cur, num_classes, kernel_size=1)
        init_weights(self.up)
        init_weights(self.head)

    @property
    def num_skips(self) -> int:
        return len(self.up)

    def decode(self, pyramid, size):
        x = pyramid[-1]
        for blk, skip in zip(self.up, pyramid[:-1][::-1]):
            x = blk(x, skip)
        if x.shape[-1] != size:
            x = F.interpolate(x, size=(size, size), mode="nearest")
        return self.head(x)

    def forward(self, x):
        _, pyramid = self.encoder(x)
        return self.decode(pyramid, x.shape[-1])


def build_unet_segmenter(encoder: MaskedEncoder, num_classes: int, width: int | None = None) -> UNetSegmenter:
    return UNetSegmenter(copy.deepcopy(encoder), num_classes, width)


@torch.no_grad()
def _predict(model: nn.Module, x, batch: int = 64) -> torch.Tensor:
    model.eval()
    return torch.cat([model(torch.as_tensor(np.asarray(x[i : i + batch]))).argmax(1) for i in range(0, len(x), batch)])


def evaluate_segmenter(model: UNetSegmenter, task: DownstreamTask, split: str = "test") -> float:
    idx = task.splits[split]
    return macro_iou(_predict(model, task.x[idx]).numpy(), np.asarray(task.y[idx]), task.num_classes)


def fine_tune_segmenter_two_phase(
    model: UNetSegmenter,
    task: DownstreamTask,
    cfg: ProbeConfig,
    checkpoint_id: str = "checkpoint",
    fraction: float = 1.0,
    on_phase_end=None,
) -> tuple[MetricReport, MetricReport]:
    """Phase 1 trains the decoder on a frozen encoder; phase 2 trains everything.

    Returns the test reports after phase 1 and after phase 2.
    ``on_phase_end(phase, model)`` is called after each phase (for archiving).
    """
    if task.kind != SEGMENTATION:
        raise ConfigError("two-phase fine-tuning is for segmentation tasks")
    train_idx = task.splits["train"]
    x_tr = torch.as_tensor(np.asarray(task.x[train_idx]))
    y_tr = torch.as_tensor(np.asarray(task.y[train_idx]).astype(np.int64))
    batch = min(cfg.seg_batch, len(train_idx))
    lr = cfg.lr(batch=cfg.seg_batch, base=cfg.seg_base_lr)
    reports = []

    before = encoder_digest(model.encoder)
    for p in model.encoder.parameters():
        p.requires_grad_(False)
    model.train()
    decoder_params = [p for n, p in model.named_parameters() if not n.startswith("encoder.")]
    _fit(decoder_params, model, x_tr, y_tr, SEGMENTATION, cfg, cfg.seg_phase1_epochs, batch, lr, 0.05, (21,))
    if encoder_digest(model.encoder) != before:
        raise InvariantViolation("encoder changed during the frozen phase")
    reports.append(_report(model, task, cfg, checkpoint_id, fraction, "ft-seg-phase1"))
    if on_phase_end is not None:
        on_phase_end(1, model)

    for p in model.encoder.parameters():
        p.requires_grad_(True)
    model.train()
    _fit(list(model.parameters()), model, x_tr, y_tr, SEGMENTATION, cfg, cfg.seg_phase2_epochs, batch, lr, 0.05, (22,))
    reports.append(_report(model, task, cfg, checkpoint_id, fraction, FT))
    if on_phase_end is not None:
        on_phase_end(2, model)
    return reports[0], reports[1]


def _report(model, task, cfg, checkpoint_id, fraction, mode) -> MetricReport:
    train_iou = evaluate_segmenter(model, task, "train")
    test_iou = evaluate_segmenter(model, task, "test")
    model.train()
    return MetricReport(task.name, "macro_iou", test_iou, "test", fraction, checkpoint_id, cfg.seed, mode, train_iou)
