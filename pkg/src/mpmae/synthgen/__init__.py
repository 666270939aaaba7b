"""Synthetic multi-modal world, stratified sampling and the dataset container."""

from __future__ import annotations

import os
from pathlib import Path

from ..schema import build_modality_registry
from .container import MMDataset, read_dataset, write_dataset
from .sampling import StratumAllocation, allocate_stratified
from .stats import compute_band_stats
from .world import LatentWorld, WorldConfig, generate_latent_world, iter_samples, plan_samples, render_sample

__all__ = [
    "LatentWorld",
    "MMDataset",
    "StratumAllocation",
    "WorldConfig",
    "allocate_stratified",
    "build_dataset",
    "compute_band_stats",
    "generate_latent_world",
    "plan_samples",
    "read_dataset",
    "render_sample",
    "write_dataset",
]


def build_dataset(config: WorldConfig, directory: str | os.PathLike) -> tuple[MMDataset, dict[int, int]]:
    """Generate, write and standardize-profile a pretraining dataset.

    Returns the opened dataset and the per-biome sample counts.
    """
    registry = build_modality_registry(config.raster_size, config.ecoregion_classes, config.biome_count)
    world = generate_latent_world(config)
    plans, _ = plan_samples(world)
    per_biome: dict[int, int] = {}
    for p in plans:
        per_biome[p.biome] = per_biome.get(p.biome, 0) + 1
    write_dataset(
        iter_samples(world, plans),
        directory,
        registry,
        count=len(plans),
        splits={"pretrain": list(range(len(plans)))},
        extra={"world_config": config.to_dict(), "world_digest": world.digest()},
    )
    ds = read_dataset(Path(directory))
    ds.save_stats(compute_band_stats(ds, "pretrain"))
    return ds, dict(sorted(per_biome.items()))
