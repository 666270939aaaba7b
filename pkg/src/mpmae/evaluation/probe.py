"""Linear probing and full fine-tuning of a pretrained encoder."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..checkpoint import tensor_digest
from ..errors import ConfigError, InvariantViolation, NumericError
from ..model import MaskedEncoder
from ..pretrain import derive_generator, lr_schedule
from .downstream import MULTICLASS, MULTILABEL, SEGMENTATION, DownstreamTask
from .metrics import macro_iou, micro_f1, overall_accuracy

log = logging.getLogger(__name__)

LP, FT = "lp", "ft"


@dataclass
class ProbeConfig:
    mode: str = LP
    epochs: int = 100
    effective_batch: int = 128
    base_lr: float = 2e-4
    weight_decay: float = 0.0
    warmup_epochs: int = 0
    multilabel_threshold: float = 0.5
    # segmentation: two phases, decoder-only then full
    seg_batch: int = 32
    seg_base_lr: float = 0.01
    seg_phase1_epochs: int = 50
    seg_phase2_epochs: int = 150
    seg_decoder_width: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (LP, FT):
            raise ConfigError(f"probe mode must be 'lp' or 'ft', got {self.mode!r}")
        if self.epochs <= 0 or self.effective_batch <= 0:
            raise ConfigError("epochs and effective_batch must be positive")

    def lr(self, batch: int | None = None, base: float | None = None) -> float:
        b = self.effective_batch if batch is None else batch
        return (self.base_lr if base is None else base) * b / 256

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricReport:
    task: str
    metric: str
    value: float
    split: str
    fraction: float
    checkpoint: str
    seed: int
    mode: str
    train_value: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise InvariantViolation(f"metric {self.metric} outside [0, 1]: {self.value}")

    def key(self) -> str:
        return f"{self.checkpoint}|{self.task}|{self.mode}|{self.fraction:g}|{self.seed}"

    def to_dict(self) -> dict:
        return asdict(self)


def metric_name(kind: str) -> str:
    return {MULTICLASS: "accuracy", MULTILABEL: "micro_f1", SEGMENTATION: "macro_iou"}[kind]


def score(kind: str, logits: torch.Tensor, y: np.ndarray, num_classes: int, threshold: float = 0.5) -> float:
    if kind == MULTICLASS:
        return overall_accuracy(logits.argmax(1).numpy(), y)
    if kind == MULTILABEL:
        return micro_f1((torch.sigmoid(logits) > threshold).numpy(), y)
    return macro_iou(logits.argmax(1).numpy(), y, num_classes)


def task_loss(kind: str, logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if kind == MULTILABEL:
        return F.binary_cross_entropy_with_logits(logits, y.float())
    return F.cross_entropy(logits, y.long())


class Classifier(nn.Module):
    """Encoder, global average pooling, LayerNorm, linear head."""

    def __init__(self, encoder: MaskedEncoder, num_outputs: int):
        super().__init__()
        self.encoder = encoder
        self.norm = nn.LayerNorm(encoder.out_dim, eps=1e-6)
        self.head = nn.Linear(encoder.out_dim, num_outputs)
        nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        z, _ = self.encoder(x)
        return self.head(self.norm(z.mean(dim=(2, 3))))


def encoder_digest(encoder: nn.Module) -> str:
    return tensor_digest(dict(encoder.state_dict()))


@torch.no_grad()
def pooled_features(encoder: MaskedEncoder, x: np.ndarray, batch: int = 256) -> torch.Tensor:
    """Global-average-pooled final-stage features from a dense, unmasked forward."""
    encoder.eval()
    out = []
    for i in range(0, len(x), batch):
        z, _ = encoder(torch.as_tensor(np.asarray(x[i : i + batch])))
        out.append(z.mean(dim=(2, 3)))
    return torch.cat(out)


def _batches(n: int, size: int, generator: torch.Generator):
    perm = torch.randperm(n, generator=generator)
    starts = list(range(0, n, size))
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()  # fold a trailing singleton into the previous batch (batch norm needs >1)
    for j, i in enumerate(starts):
        yield perm[i : starts[j + 1] if j + 1 < len(starts) else n]


def _fit(params, forward, x_train, y_train, kind, cfg: ProbeConfig, epochs: int, batch: int, lr: float, wd: float, gen_key):
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=wd)
    n = len(x_train)
    steps_per_epoch = math.ceil(n / batch)
    total = epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        gen = derive_generator(cfg.seed, *gen_key, epoch)
        for idx in _batches(n, batch, gen):
            for g in opt.param_groups:
                g["lr"] = lr_schedule(step, total, warm, lr) if total > 1 else lr
            xb = x_train[idx] if torch.is_tensor(x_train) else torch.as_tensor(np.asarray(x_train[idx.numpy()]))
            yb = y_train[idx] if torch.is_tensor(y_train) else torch.as_tensor(np.asarray(y_train[idx.numpy()]))
            loss = task_loss(kind, forward(xb), yb)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite downstream loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1


def linear_probe(
    encoder: MaskedEncoder,
    task: DownstreamTask,
    cfg: ProbeConfig,
    checkpoint_id: str = "checkpoint",
    fraction: float = 1.0,
) -> MetricReport:
    """Train a linear layer on frozen pooled features; score the test split."""
    if task.kind == SEGMENTATION:
        raise ConfigError("linear probing applies to classification tasks")
    before = encoder_digest(encoder)
    grads_before = [p.grad for p in encoder.parameters()]
    flags = [p.requires_grad for p in encoder.parameters()]
    for p in encoder.parameters():
        p.requires_grad_(False)
    train_idx, test_idx = task.splits["train"], task.splits["test"]
    f_train = pooled_features(encoder, task.x[train_idx])
    f_test = pooled_features(encoder, task.x[test_idx])
    y_train = torch.as_tensor(np.asarray(task.y[train_idx]))

    torch.manual_seed(cfg.seed)
    head = nn.Sequential(nn.BatchNorm1d(f_train.shape[1], affine=False, eps=1e-6), nn.Linear(f_train.shape[1], task.num_classes))
    nn.init.trunc_normal_(head[1].weight, std=0.01)
    nn.init.zeros_(head[1].bias)
    head.train()
    batch = min(cfg.effective_batch, len(train_idx))
    _fit(list(head.parameters()), head, f_train, y_train, task.kind, cfg, cfg.epochs, batch, cfg.lr(), cfg.weight_decay, (11,))
    head.eval()
    with torch.no_grad():
        test_value = score(task.kind, head(f_test), np.asarray(task.y[test_idx]), task.num_classes, cfg.multilabel_threshold)
        train_value = score(task.kind, head(f_train), np.asarray(task.y[train_idx]), task.num_classes, cfg.multilabel_threshold)
    grads_moved = any(p.grad is not g for p, g in zip(encoder.parameters(), grads_before))
    if grads_moved or encoder_digest(encoder) != before:
        raise InvariantViolation("encoder parameters changed during linear probing")
    for p, f in zip(encoder.parameters(), flags):
        p.requires_grad_(f)
    return MetricReport(task.name, metric_name(task.kind), test_value, "test", fraction, checkpoint_id, cfg.seed, LP, train_value)


def fine_tune_classifier(
    encoder: MaskedEncoder,
    task: DownstreamTask,
    cfg: ProbeConfig,
    checkpoint_id: str = "checkpoint",
    fraction: float = 1.0,
    freeze_encoder: bool = False,
) -> tuple[MetricReport, Classifier]:
    """Train encoder and head end to end; report the last-epoch test score.

    The input encoder is copied, never modified in place.
    """
    if task.kind == SEGMENTATION:
        raise ConfigError("use the U-Net path for segmentation")
    torch.manual_seed(cfg.seed)
    model = Classifier(copy.deepcopy(encoder), task.num_classes)
    for p in model.encoder.parameters():
        p.requires_grad_(not freeze_encoder)
    model.train()
    train_idx, test_idx = task.splits["train"], task.splits["test"]
    batch = min(cfg.effective_batch, len(train_idx))
    x_tr = torch.as_tensor(np.asarray(task.x[train_idx]))
    y_tr = torch.as_tensor(np.asarray(task.y[train_idx]))
    params = [p for p in model.parameters() if p.requires_grad]
    _fit(params, model, x_tr, y_tr, task.kind, cfg, cfg.epochs, batch, cfg.lr(), cfg.weight_decay or 0.05, (12,))
    model.eval()
    with torch.no_grad():
        test_logits = torch.cat([model(torch.as_tensor(np.asarray(task.x[test_idx[i : i + 256]]))) for i in range(0, len(test_idx), 256)])
        train_logits = torch.cat([model(x_tr[i : i + 256]) for i in range(0, len(x_tr), 256)])
    test_value = score(task.kind, test_logits, np.asarray(task.y[test_idx]), task.num_classes, cfg.multilabel_threshold)
    train_value = score(task.kind, train_logits, np.asarray(y_tr), task.num_classes, cfg.multilabel_threshold)
    report = MetricReport(task.name, metric_name(task.kind), test_value, "test", fraction, checkpoint_id, cfg.seed, FT, train_value)
    return report, model
