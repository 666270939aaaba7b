"""Pretraining loop: crop, mask, encode, decode every task, aggregate, step."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, load_state_strict, restore_optimizer, save_checkpoint
from .errors import ConfigError, NumericError
from .losses import (
    LOSS_MODES,
    TaskLossResult,
    aggregate_multitask,
    image_level_loss,
    masked_cross_entropy,
    masked_mse,
)
from .masking import PatchGrid, patch_normalize, sample_masks, upsample_mask_to_pixels
from .model import MPMAE, DecoderConfig, EncoderConfig, encoder_config_from
from .schema import OPTICAL, PRODUCT_LEVELS, BandStats, ModalitySpec, TaskSpec, registry_by_name, select_tasks

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "task_id", "raw_loss", "log_var", "weighted", "total_loss", "lr")


@dataclass
class PretrainConfig:
    epochs: int = 200
    base_lr: float = 1.5e-4
    effective_batch: int = 256
    batch_size: int = 64
    warmup_epochs: int = 20
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    masking_ratio: float = 0.6
    loss_mode: str = "uncertainty"
    crop_size: int = 56
    patch_size: int = 8
    encoder: str = "atto"
    widths: tuple[int, ...] | None = None
    depths: tuple[int, ...] | None = None
    stem_kind: str = "modified"
    decoder_width: int = 256
    tasks: str = "all"
    patch_norm_tasks: tuple[str, ...] = ("sentinel2",)
    freeze_log_vars: bool = False
    checkpoint_every: int = 0
    split: str = "pretrain"
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.patch_norm_tasks = tuple(self.patch_norm_tasks)
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if self.crop_size % self.patch_size:
            raise ConfigError(f"crop size {self.crop_size} not divisible by patch size {self.patch_size}")
        if self.effective_batch <= 0 or self.batch_size <= 0 or self.effective_batch % min(self.batch_size, self.effective_batch):
            raise ConfigError("effective_batch must be a positive multiple of batch_size")
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")

    @property
    def peak_lr(self) -> float:
        # linear scaling rule: lr = base_lr * effective_batch / 256
        return self.base_lr * self.effective_batch / 256

    def encoder_config(self) -> EncoderConfig:
        over = {"image_size": self.crop_size, "patch_size": self.patch_size, "stem_kind": self.stem_kind}
        if self.widths is not None:
            over["widths"] = tuple(self.widths)
        if self.depths is not None:
            over["depths"] = tuple(self.depths)
        return encoder_config_from(self.encoder, **over)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear warmup from 0, then half-cosine reaching 0 at the last step."""
    if step < 0:
        raise ConfigError("step must be non-negative")
    warmup_steps = min(warmup_steps, max(total_steps - 1, 0))
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    if span <= 0:
        return peak_lr if step == warmup_steps and total_steps > 1 else 0.0
    progress = min((step - warmup_steps) / span, 1.0)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def derive_generator(*keys: int) -> torch.Generator:
    seed = int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0] >> 1)
    return torch.Generator().manual_seed(seed)


# ---------------------------------------------------------------------------
# batches


class StatsTensors:
    """Band statistics as tensors, with optical stats stacked by product level."""

    def __init__(self, stats: BandStats, registry: Sequence[ModalitySpec]):
        self.mean, self.std = {}, {}
        for m in registry:
            if not m.standardized:
                continue
            if m.name == OPTICAL:
                mu = [stats.lookup(m.name, lv)[0] for lv in PRODUCT_LEVELS]
                sd = [stats.lookup(m.name, lv)[1] for lv in PRODUCT_LEVELS]
            else:
                mu, sd = stats.lookup(m.name)
            self.mean[m.name] = torch.as_tensor(np.asarray(mu), dtype=torch.float32)
            self.std[m.name] = torch.as_tensor(np.asarray(sd), dtype=torch.float32)

    def standardize(self, name: str, raw: torch.Tensor, levels: torch.Tensor | None = None):
        mu, sd = self.mean[name], self.std[name]
        if name == OPTICAL:
            mu, sd = mu[levels], sd[levels]
        if raw.dim() == 4:
            mu, sd = mu.reshape(*mu.shape, 1, 1), sd.reshape(*sd.shape, 1, 1)
        ok = torch.isfinite(raw)
        return torch.where(ok, (raw - mu) / sd, torch.zeros((), dtype=raw.dtype)), ok


def load_batch(dataset, indices: np.ndarray, stats: StatsTensors, modalities: Sequence[str]) -> dict:
    """Gather and standardize ``indices`` from a dataset.

    Returns tensors keyed by modality, plus ``valid/<name>`` (B, H, W) for
    standardized pixel modalities and ``input`` (the optical raster).
    """
    order = np.argsort(indices)
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    sorted_idx = np.asarray(indices)[order]
    reg = registry_by_name(dataset.registry)
    levels = torch.as_tensor(np.asarray(dataset.arrays["product_level"][sorted_idx])[inv].astype(np.int64))
    out: dict = {"product_level": levels}
    for name in dict.fromkeys([OPTICAL, *modalities]):
        m = reg[name]
        raw = torch.as_tensor(np.asarray(dataset.arrays[name][sorted_idx])[inv])
        if m.standardized:
            val, ok = stats.standardize(name, raw.float(), levels if name == OPTICAL else None)
            out[name] = val
            if m.is_pixel:
                out[f"valid/{name}"] = ok.all(dim=1)
        elif m.is_categorical:
            out[name] = raw.long()
        else:
            out[name] = raw.float()
    out["input"] = out[OPTICAL]
    return out


def random_crop(batch: dict, size: int, generator: torch.Generator) -> dict:
    """Crop every raster of each sample at one shared random offset."""
    x = batch["input"]
    n, full = x.shape[0], x.shape[-1]
    if size == full:
        return batch
    if size > full:
        raise ConfigError(f"crop {size} larger than raster {full}")
    offs = torch.randint(0, full - size + 1, (n, 2), generator=generator)
    out = {}
    for k, v in batch.items():
        if torch.is_tensor(v) and v.dim() >= 3 and v.shape[-1] == full and v.shape[-2] == full:
            out[k] = torch.stack([v[i, ..., r : r + size, c : c + size] for i, (r, c) in enumerate(offs.tolist())])
        else:
            out[k] = v
    out["input"] = out[OPTICAL]
    return out


def task_modalities(tasks: Sequence[TaskSpec]) -> list[str]:
    return list(dict.fromkeys(m for t in tasks for m in t.target_modalities))


def task_target(task: TaskSpec, batch: dict) -> torch.Tensor:
    parts = []
    for name, lo, hi in task.targets:
        v = batch[name]
        parts.append(v[:, lo:hi])
    return parts[0] if len(parts) == 1 else torch.cat(parts, dim=1)


def compute_task_losses(
    model: MPMAE,
    preds: dict,
    batch: dict,
    mask: torch.Tensor,
    grid: PatchGrid,
    patch_norm_tasks: Sequence[str] = (OPTICAL,),
) -> tuple[list[TaskLossResult], dict[str, torch.Tensor]]:
    """Per-task losses for one batch; every pixel task scores the same mask.

    Returns the results and, per task, the pixel mask object it used.
    """
    pixel_mask = upsample_mask_to_pixels(mask, grid)
    results, used = [], {}
    for task in model.tasks:
        pred = preds[task.task_id]
        if task.is_pixel:
            used[task.task_id] = pixel_mask
            if task.is_classification:
                labels = task_target(task, batch)[:, 0]
                loss, count = masked_cross_entropy(pred, labels, pixel_mask, task.ignore_label)
            else:
                target = task_target(task, batch)
                name = task.targets[0][0]
                valid = batch.get(f"valid/{name}")
                if task.task_id in patch_norm_tasks:
                    target = patch_normalize(target, grid, valid)
                loss, count = masked_mse(pred, target, pixel_mask, valid)
        else:
            loss, count = image_level_loss(pred, task_target(task, batch), task)
        results.append(TaskLossResult(task.task_id, loss, count))
    return results, used


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)

    def epoch_rows(self, epoch: int) -> list[dict]:
        return [r for r in self.rows if r["epoch"] == epoch]

    def totals(self) -> list[float]:
        seen, out = set(), []
        for r in self.rows:
            if r["epoch"] not in seen:
                seen.add(r["epoch"])
                out.append(r["total_loss"])
        return out

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "TrainLog":
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append(
                    {
                        "epoch": int(r["epoch"]),
                        "task_id": r["task_id"],
                        **{k: float(r[k]) for k in ("raw_loss", "log_var", "weighted", "total_loss", "lr")},
                    }
                )
        return cls(rows)


@dataclass
class PretrainResult:
    model: MPMAE
    log: TrainLog
    checkpoint_path: Path | None
    epoch: int


def build_model(cfg: PretrainConfig, registry: Sequence[ModalitySpec]) -> MPMAE:
    torch.manual_seed(cfg.seed)
    tasks = select_tasks(registry, cfg.tasks)
    return MPMAE(cfg.encoder_config(), tasks, DecoderConfig(width=cfg.decoder_width))


def make_optimizer(model: MPMAE, cfg: PretrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        # biases, norms, GRN, mask token and log-variances are not decayed
        (no_decay if p.ndim <= 1 or name.endswith(("gamma", "beta")) or name == "log_vars" else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=0.0, betas=cfg.betas)


def checkpoint_config(cfg: PretrainConfig, registry: Sequence[ModalitySpec]) -> dict:
    return {
        "pretrain": cfg.to_dict(),
        "encoder": asdict(cfg.encoder_config()),
        "decoder_width": cfg.decoder_width,
        "tasks": [t.task_id for t in select_tasks(registry, cfg.tasks)],
        "registry": [asdict(m) for m in registry],
    }


def model_from_checkpoint(ckpt: Checkpoint) -> MPMAE:
    from .schema import ModalitySpec as _M

    registry = [_M(**m) for m in ckpt.config["registry"]]
    tasks = select_tasks(registry, ckpt.config["tasks"])
    model = MPMAE(EncoderConfig(**ckpt.config["encoder"]), tasks, DecoderConfig(width=ckpt.config["decoder_width"]))
    load_state_strict(model, ckpt.section("model"))
    return model


def run_pretraining(
    dataset,
    cfg: PretrainConfig,
    out_dir: str | os.PathLike | None = None,
    resume: str | os.PathLike | None = None,
    stop_after_epoch: int | None = None,
    on_epoch: Callable[[int, TrainLog], None] | None = None,
) -> PretrainResult:
    """Train from scratch (or resume) and return the model and its log.

    Shuffling, crops and masks draw from generators keyed on
    (seed, epoch, step), so a resumed run replays exactly what an
    uninterrupted run would have done.
    """
    registry = dataset.registry
    stats = StatsTensors(dataset.stats, registry)
    model = build_model(cfg, registry)
    opt = make_optimizer(model, cfg)
    if cfg.freeze_log_vars:
        model.log_vars.requires_grad_(False)
    grid = PatchGrid(cfg.crop_size, cfg.patch_size)
    mods = task_modalities(model.tasks)
    index = {t: i for i, t in enumerate(model.task_ids)}
    train_idx = np.asarray(dataset.split(cfg.split))
    n = len(train_idx)
    step_size = min(cfg.effective_batch, n)
    micro = min(cfg.batch_size, step_size)
    steps_per_epoch = math.ceil(n / step_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    ckpt_cfg = checkpoint_config(cfg, registry)

    trainlog = TrainLog()
    start_epoch = 1
    if resume is not None:
        ckpt = load_checkpoint(resume)
        load_state_strict(model, ckpt.section("model"))
        restore_optimizer(opt, ckpt)
        start_epoch = ckpt.epoch + 1
        if out_dir is not None and (Path(out_dir) / "train_log.csv").exists():
            trainlog = TrainLog([r for r in TrainLog.read_csv(Path(out_dir) / "train_log.csv").rows if r["epoch"] <= ckpt.epoch])
    ckpt_path = None
    last_epoch = start_epoch - 1
    for epoch in range(start_epoch, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = torch.randperm(n, generator=derive_generator(cfg.seed, 1, epoch)).numpy()
        sums = {t: 0.0 for t in model.task_ids}
        wsums = {t: 0.0 for t in model.task_ids}
        seen = {t: 0 for t in model.task_ids}
        total_sum, lr = 0.0, 0.0
        model.train()
        for step in range(steps_per_epoch):
            global_step = (epoch - 1) * steps_per_epoch + step
            lr = lr_schedule(global_step, total_steps, warmup_steps, cfg.peak_lr)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)
            step_idx = perm[step * step_size : (step + 1) * step_size]
            gen = derive_generator(cfg.seed, 2, epoch, step)
            step_total = 0.0
            for mstart in range(0, len(step_idx), micro):
                idx = train_idx[step_idx[mstart : mstart + micro]]
                batch = random_crop(load_batch(dataset, idx, stats, mods), cfg.crop_size, gen)
                mask = sample_masks(grid, cfg.masking_ratio, len(idx), gen)
                preds = model(batch["input"], mask)
                results, used = compute_task_losses(model, preds, batch, mask, grid, cfg.patch_norm_tasks)
                if __debug__ and used:
                    first = next(iter(used.values()))
                    assert all(m is first for m in used.values()), "pixel tasks must share one mask"
                for r in results:
                    if not r.skipped and not torch.isfinite(r.raw_loss):
                        raise NumericError(f"non-finite loss for task {r.task_id!r} at epoch {epoch} step {step}")
                total = aggregate_multitask(results, model.log_vars, cfg.loss_mode, index)
                if not torch.isfinite(total):
                    raise NumericError(f"non-finite total loss at epoch {epoch} step {step}")
                frac = len(idx) / len(step_idx)
                (total * frac).backward()
                step_total += float(total.detach()) * frac
                for r in results:
                    if not r.skipped:
                        sums[r.task_id] += float(r.raw_loss.detach()) * frac
                        wsums[r.task_id] += float(r.weighted.detach()) * frac
                        seen[r.task_id] += frac
            opt.step()
            total_sum += step_total
        s = model.log_vars.detach()
        for t in model.task_ids:
            k = max(seen[t], 1e-12)
            trainlog.rows.append(
                {
                    "epoch": epoch,
                    "task_id": t,
                    "raw_loss": sums[t] / k if seen[t] else float("nan"),
                    "log_var": float(s[index[t]]),
                    "weighted": wsums[t] / k if seen[t] else float("nan"),
                    "total_loss": total_sum / steps_per_epoch,
                    "lr": lr,
                }
            )
        trainlog.wall_time.append(time.perf_counter() - t0)
        log.info("epoch %d total %.4f lr %.3g (%.1fs)", epoch, total_sum / steps_per_epoch, lr, trainlog.wall_time[-1])
        last_epoch = epoch
        if on_epoch is not None:
            on_epoch(epoch, trainlog)
        is_last = epoch == cfg.epochs or epoch == stop_after_epoch
        if out_dir is not None and (is_last or (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0)):
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            ckpt_path = save_checkpoint(out / f"checkpoint-{epoch:04d}.ckpt", model, ckpt_cfg, epoch, opt)
            trainlog.write_csv(out / "train_log.csv")
        if epoch == stop_after_epoch:
            break
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trainlog.write_csv(out / "train_log.csv")
        if ckpt_path is None:
            ckpt_path = save_checkpoint(out / f"checkpoint-{last_epoch:04d}.ckpt", model, ckpt_cfg, last_epoch, opt)
        with open(out / "timing.csv", "a") as fh:
            for i, t in enumerate(trainlog.wall_time):
                fh.write(f"{start_epoch + i},{t:.3f}\n")
    return PretrainResult(model, trainlog, ckpt_path, last_epoch)
