"""Synthetic downstream tasks mirroring the three benchmark task types.

Labels come straight from generator ground truth (the clean landcover map):
multi-class is the window's modal class, multi-label marks classes covering
more than 5% of pixels, segmentation is the landcover raster itself.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..errors import ConfigError, InvalidArgument
from ..schema import OPTICAL, PRODUCT_LEVELS, BandStats
from ..synthgen.container import read_arrays, write_arrays
from ..synthgen.world import DW_CLASSES, WorldConfig, generate_latent_world, landcover, plan_samples, render_sample, sample_rng

MULTICLASS = "multi-class"
MULTILABEL = "multi-label"
SEGMENTATION = "segmentation"
TASK_KINDS = {"scene": MULTICLASS, "presence": MULTILABEL, "landcover": SEGMENTATION}
PRESENCE_THRESHOLD = 0.05
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass
class DownstreamTask:
    name: str
    kind: str
    num_classes: int
    x: np.ndarray  # (N, 12, S, S) standardized optical input
    y: np.ndarray  # (N,), (N, K) or (N, S, S)
    strata: np.ndarray  # (N,) modal class, used for stratified subsampling
    splits: dict[str, np.ndarray]

    def subset(self, split: str, indices: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[split] if indices is None else indices
        return np.asarray(self.x[idx]), np.asarray(self.y[idx])

    def with_train(self, indices: np.ndarray) -> "DownstreamTask":
        return replace(self, splits={**self.splits, "train": np.asarray(indices)})


def downstream_labels(classes: np.ndarray, num_classes: int = DW_CLASSES) -> tuple[int, np.ndarray]:
    """Modal class and presence vector for one clean landcover window."""
    counts = np.bincount(classes.ravel(), minlength=num_classes)
    frac = counts / counts.sum()
    return int(counts.argmax()), (frac > PRESENCE_THRESHOLD).astype(np.uint8)


def standardize_optical(raw: np.ndarray, level: str, stats: BandStats) -> np.ndarray:
    mean, std = stats.lookup(OPTICAL, level)
    ok = np.isfinite(raw)
    return np.where(ok, (raw - mean[:, None, None]) / std[:, None, None], 0.0).astype(np.float32)


def build_downstream(
    world_config: WorldConfig,
    stats: BandStats,
    directory: str | os.PathLike,
    n_train: int = 1000,
    n_val: int = 200,
    n_test: int = 500,
) -> Path:
    """Render a held-out world and write inputs plus all three label sets.

    Optical inputs are standardized with the *pretraining* statistics.
    """
    total = n_train + n_val + n_test
    if min(n_train, n_test) <= 0 or n_val < 0:
        raise InvalidArgument("downstream splits must be non-empty (val may be 0)")
    world = generate_latent_world(world_config)
    plans, _ = plan_samples(world, total)
    s = world_config.raster_size
    x = np.zeros((total, 12, s, s), dtype=np.float32)
    y_seg = np.zeros((total, s, s), dtype=np.uint8)
    y_cls = np.zeros(total, dtype=np.int64)
    y_ml = np.zeros((total, DW_CLASSES), dtype=np.uint8)
    for i, plan in enumerate(plans):
        sample = render_sample(world, plan.location, plan.month, sample_rng(world_config.seed, plan.sample_id), plan.sample_id)
        x[i] = standardize_optical(sample.pixel[OPTICAL], sample.product_level, stats)
        cls = landcover(world, plan.location)
        y_seg[i] = cls
        y_cls[i], y_ml[i] = downstream_labels(cls)
    split = np.repeat(np.array([0, 1, 2], dtype=np.uint8), [n_train, n_val, n_test])
    return write_arrays(
        directory,
        {"x": x, "y_class": y_cls, "y_multilabel": y_ml, "y_seg": y_seg, "split": split},
        meta={"num_classes": DW_CLASSES, "world_config": world_config.to_dict(), "levels": list(PRODUCT_LEVELS)},
    )


def load_downstream(directory: str | os.PathLike, name: str) -> DownstreamTask:
    """Open one of the tasks ``scene`` (multi-class), ``presence`` (multi-label), ``landcover`` (segmentation)."""
    if name not in TASK_KINDS:
        raise ConfigError(f"unknown downstream task {name!r}; choose from {sorted(TASK_KINDS)}")
    arrays, meta = read_arrays(directory)
    kind = TASK_KINDS[name]
    y = {MULTICLASS: arrays["y_class"], MULTILABEL: arrays["y_multilabel"], SEGMENTATION: arrays["y_seg"]}[kind]
    split = np.asarray(arrays["split"])
    splits = {k: np.nonzero(split == v)[0] for k, v in SPLIT_CODES.items()}
    return DownstreamTask(name, kind, int(meta["num_classes"]), arrays["x"], y, np.asarray(arrays["y_class"]), splits)


def stratified_subsample(strata: np.ndarray, pool: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Pick ``round(fraction * n_c)`` items of every stratum ``c`` from ``pool``.

    Strata that would receive zero items get one instead, so every class
    present in the pool stays represented.
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidArgument(f"fraction must lie in (0, 1], got {fraction}")
    pool = np.asarray(pool)
    if fraction == 1.0:
        return np.sort(pool)
    chosen = []
    for c in np.unique(strata[pool]):
        members = pool[strata[pool] == c]
        k = max(1, int(round(fraction * len(members))))
        chosen.append(rng.choice(members, size=k, replace=False))
    return np.sort(np.concatenate(chosen))
