"""Synthetic latent world and per-location rendering of all twelve modalities.

Every modality is an explicit function of a handful of smooth latent fields,
so the cross-modal relations the pretext tasks rely on are known exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import InvalidArgument
from ..schema import MultiModalSample, encode_geolocation, encode_month
from .sampling import StratumAllocation, allocate_stratified

DW_CLASSES = 9
ESA_CLASSES = 11
S2_BANDS = 12
S1_BANDS = 8
# dynamic-world class indices (0-based, before the +1 no-data shift) that carry canopy
TREE_CLASSES = (0, 4)
L1C_OFFSET = 0.03
LAT_NORTH, LAT_SOUTH = 75.0, -60.0

DEFAULT_NOISE = {
    "sentinel2": 0.02,
    "sentinel1": 0.5,
    "aster": 1.0,
    "canopy_height": 0.3,
    "climate": 0.2,
}


@dataclass
class WorldConfig:
    seed: int = 0
    raster_size: int = 64
    num_latent_fields: int = 4
    smoothness: float = 6.0
    noise_scale: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_NOISE))
    biome_count: int = 14
    ecoregion_classes: int = 16
    samples_total: int = 4096
    world_size: int | None = None
    missing_fraction: float = 0.02
    nodata_fraction: float = 0.005

    def __post_init__(self):
        if self.raster_size < 16:
            raise InvalidArgument(f"raster_size must be >= 16, got {self.raster_size}")
        if self.biome_count < 1:
            raise InvalidArgument(f"biome_count must be >= 1, got {self.biome_count}")
        if self.num_latent_fields < 3:
            raise InvalidArgument("need at least 3 latent fields")
        if any(v < 0 for v in self.noise_scale.values()):
            raise InvalidArgument("noise_scale must be non-negative")
        if self.ecoregion_classes < self.biome_count:
            raise InvalidArgument("ecoregion_classes must be >= biome_count (one ecoregion per biome minimum)")
        if not 0 <= self.missing_fraction < 1 or not 0 <= self.nodata_fraction < 1:
            raise InvalidArgument("missing/nodata fractions must lie in [0, 1)")
        if self.world_size is None:
            self.world_size = 8 * self.raster_size
        if self.world_size < self.raster_size:
            raise InvalidArgument("world_size smaller than raster_size")
        self.noise_scale = {**DEFAULT_NOISE, **self.noise_scale}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentWorld:
    config: WorldConfig
    latents: np.ndarray  # (K, H, W) float32, unit variance
    biome_field: np.ndarray  # (H, W)
    biome: np.ndarray  # (H, W) int
    ecoregion: np.ndarray  # (H, W) int, global ids
    ecoregion_parent: np.ndarray  # (E,) biome of each ecoregion
    params: dict[str, np.ndarray]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.latents, self.biome_field, self.biome, self.ecoregion):
            h.update(np.ascontiguousarray(arr).tobytes())
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    @property
    def size(self) -> int:
        return self.latents.shape[-1]


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _quantile_bins(values: np.ndarray, n: int) -> np.ndarray:
    edges = np.quantile(values, np.linspace(0, 1, n + 1)[1:-1])
    return np.searchsorted(edges, values, side="right")


def generate_latent_world(config: WorldConfig) -> LatentWorld:
    """Build the deterministic latent world for ``config.seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x57A1D]))
    n, k = config.world_size, config.num_latent_fields
    latents = np.stack([_smooth_noise(rng, (n, n), config.smoothness) for _ in range(k)]).astype(np.float32)

    # biomes follow a north-south gradient plus coarse noise, so latitude is
    # partly recoverable from imagery while longitude is not
    rows = np.linspace(1.0, -1.0, n)[:, None] * np.ones((1, n))
    biome_field = 1.2 * rows + 0.8 * _smooth_noise(rng, (n, n), 4 * config.smoothness)
    biome_field = ((biome_field - biome_field.mean()) / biome_field.std()).astype(np.float32)
    biome = _quantile_bins(biome_field, config.biome_count).astype(np.int32)

    per_biome = np.full(config.biome_count, config.ecoregion_classes // config.biome_count)
    per_biome[: config.ecoregion_classes % config.biome_count] += 1
    eco_field = _smooth_noise(rng, (n, n), 2 * config.smoothness)
    ecoregion = np.zeros((n, n), dtype=np.int32)
    parent = np.repeat(np.arange(config.biome_count), per_biome).astype(np.int32)
    start = np.concatenate([[0], np.cumsum(per_biome)[:-1]])
    for b in range(config.biome_count):
        sel = biome == b
        ecoregion[sel] = start[b] + _quantile_bins(eco_field[sel], per_biome[b])

    n_feat = k + 1
    signatures = np.sort(rng.uniform(0.02, 0.45, (DW_CLASSES, S2_BANDS)), axis=1)
    # shuffle band order per class so signatures differ in shape, not only level
    for c in range(DW_CLASSES):
        signatures[c] = signatures[c][rng.permutation(S2_BANDS)]
    params = {
        "dw_weights": rng.normal(0, 1.5, (DW_CLASSES, n_feat)),
        "dw_bias": rng.normal(0, 0.5, DW_CLASSES),
        "esa_weights": rng.normal(0, 1.5, (ESA_CLASSES, n_feat)),
        "esa_bias": rng.normal(0, 0.5, ESA_CLASSES),
        "s2_signatures": signatures,
        "s2_season": rng.uniform(-0.04, 0.04, (DW_CLASSES, S2_BANDS)),
        "s1_table": rng.uniform(-25.0, -5.0, (ESA_CLASSES, S1_BANDS)),
        "s1_slope_gain": rng.uniform(1.0, 4.0, S1_BANDS),
        "s1_texture_gain": rng.uniform(0.5, 2.0, S1_BANDS),
    }
    return LatentWorld(config, latents, biome_field, biome, ecoregion, parent, params)


# ---------------------------------------------------------------------------
# rendering


def _window(world: LatentWorld, location: tuple[int, int]) -> tuple[slice, slice]:
    r, c = location
    s = world.config.raster_size
    if r < 0 or c < 0 or r + s > world.size or c + s > world.size:
        raise InvalidArgument(f"window at {location} of size {s} exceeds world of size {world.size}")
    return slice(r, r + s), slice(c, c + s)


def window_features(world: LatentWorld, location: tuple[int, int]) -> np.ndarray:
    rs, cs = _window(world, location)
    return np.concatenate([world.latents[:, rs, cs], world.biome_field[None, rs, cs]]).astype(np.float64)


def landcover_logits(world: LatentWorld, location: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Affine mixtures of the latents that define both landcover products."""
    f = window_features(world, location)
    p = world.params
    dw = np.einsum("kf,fhw->khw", p["dw_weights"], f) + p["dw_bias"][:, None, None]
    esa = np.einsum("kf,fhw->khw", p["esa_weights"], f) + p["esa_bias"][:, None, None]
    return dw, esa


def landcover(world: LatentWorld, location: tuple[int, int]) -> np.ndarray:
    """Clean dynamic-world classes (0-based, no no-data) for a window."""
    return landcover_logits(world, location)[0].argmax(axis=0)


def location_latlon(world: LatentWorld, location: tuple[int, int]) -> tuple[float, float]:
    s = world.config.raster_size
    rc, cc = location[0] + s // 2, location[1] + s // 2
    lat = LAT_NORTH + (LAT_SOUTH - LAT_NORTH) * rc / (world.size - 1)
    lon = -180.0 + 360.0 * cc / world.size
    return float(lat), float(lon)


def _climate(lat: float, elev_mean: float, wetness: float, month: int, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    base = 28.0 - 0.45 * abs(lat) - 0.0065 * max(elev_mean - 300.0, 0.0)
    amp = 2.0 + 0.25 * abs(lat)
    hemi = 1.0 if lat >= 0 else -1.0

    def monthly(m):
        mean = base + hemi * amp * np.sin(2 * np.pi * (m - 4) / 12)
        spread = 4.0 + 1.5 * (1 - wetness)
        return [mean, mean - spread, mean + spread]

    prev = (month - 2) % 12 + 1
    temp = np.array([base, base - amp - 6.0, base + amp + 6.0] + monthly(month) + monthly(prev))
    yearly = 900.0 * np.exp(0.6 * wetness)

    def rain(m):
        return yearly / 12 * (1 + 0.6 * hemi * np.sin(2 * np.pi * (m - 1) / 12))

    precip = np.array([yearly, rain(month), rain(prev)])
    return temp + noise[:9], precip * np.exp(0.05 * noise[9:12])


def render_sample(
    world: LatentWorld,
    location: tuple[int, int],
    time_index: int,
    rng: np.random.Generator,
    sample_id: int = 0,
    product_level: str | None = None,
) -> MultiModalSample:
    """Render all modalities for the window with top-left corner ``location``.

    ``time_index`` is the month (1-12) of the optical observation.
    """
    if not 1 <= int(time_index) <= 12:
        raise InvalidArgument(f"time_index is a month in 1..12, got {time_index}")
    cfg, p = world.config, world.params
    s = cfg.raster_size
    noise = cfg.noise_scale
    rs, cs = _window(world, location)
    lat_f = world.latents[:, rs, cs].astype(np.float64)

    dw_logits, esa_logits = landcover_logits(world, location)
    dw_cls = dw_logits.argmax(axis=0)
    esa_cls = esa_logits.argmax(axis=0)

    if product_level is None:
        product_level = "L1C" if rng.random() < 0.5 else "L2A"

    elev = 800.0 + 450.0 * lat_f[0] + 150.0 * world.biome_field[rs, cs]
    gy, gx = np.gradient(elev, 10.0)
    slope = np.degrees(np.arctan(np.hypot(gx, gy)))

    season = np.sin(2 * np.pi * time_index / 12)
    brightness = 1.0 + 0.15 * np.tanh(lat_f[1])
    s2 = p["s2_signatures"][dw_cls].transpose(2, 0, 1) * brightness + season * p["s2_season"][dw_cls].transpose(2, 0, 1)
    s2 = s2 + noise["sentinel2"] * rng.standard_normal(s2.shape)
    if product_level == "L1C":
        s2 = s2 + L1C_OFFSET
    missing = rng.random((s, s)) < cfg.missing_fraction
    s2[:, missing] = np.nan

    s1 = (
        p["s1_table"][esa_cls].transpose(2, 0, 1)
        + p["s1_slope_gain"][:, None, None] * np.tanh(slope / 10.0)[None]
        + p["s1_texture_gain"][:, None, None] * np.sin(2.0 * lat_f[2])[None] ** 2
    )
    s1 = s1 + noise["sentinel1"] * rng.standard_normal(s1.shape)

    aster = np.stack([elev, slope]) + noise["aster"] * rng.standard_normal((2, s, s))

    trees = np.isin(dw_cls, TREE_CLASSES)
    height = np.where(trees, 4.0 + 25.0 / (1.0 + np.exp(-(0.8 * lat_f[0] + lat_f[1]))), 0.0)
    height = np.maximum(height + noise["canopy_height"] * rng.standard_normal((s, s)) * trees, 0.0)
    canopy = np.stack([height, np.where(trees, 0.5 + 0.1 * height, 0.0)])

    dw_label = (dw_cls + 1).astype(np.uint8)
    dw_label[rng.random((s, s)) < cfg.nodata_fraction] = 0

    lat, lon = location_latlon(world, location)
    temp, precip = _climate(
        lat, float(elev.mean()), float(np.tanh(lat_f[2].mean())), int(time_index), noise["climate"] * rng.standard_normal(12)
    )
    rc, cc = location[0] + s // 2, location[1] + s // 2

    return MultiModalSample(
        pixel={
            "sentinel2": s2.astype(np.float32),
            "sentinel1": s1.astype(np.float32),
            "aster": aster.astype(np.float32),
            "canopy_height": canopy.astype(np.float32),
            "dynamic_world": dw_label[None],
            "esa_worldcover": esa_cls.astype(np.uint8)[None],
        },
        image={
            "biome": np.array([world.biome[rc, cc]], dtype=np.int32),
            "ecoregion": np.array([world.ecoregion[rc, cc]], dtype=np.int32),
            "era5_temperature": temp.astype(np.float32),
            "era5_precipitation": precip.astype(np.float32),
            "geolocation": encode_geolocation(lat, lon),
            "date": encode_month(int(time_index)),
        },
        product_level=product_level,
        sample_id=int(sample_id),
        stratum_id=int(world.biome[rc, cc]),
    )


# ---------------------------------------------------------------------------
# sampling plan


@dataclass(frozen=True)
class SamplePlan:
    sample_id: int
    location: tuple[int, int]
    month: int
    ecoregion: int
    biome: int


def ecoregion_areas(world: LatentWorld) -> dict[int, tuple[int, int]]:
    """Area (in valid window centres) of every ecoregion, with its parent biome."""
    s = world.config.raster_size
    half = s // 2
    centres = world.ecoregion[half : world.size - s + half + 1, half : world.size - s + half + 1]
    ids, counts = np.unique(centres, return_counts=True)
    return {int(e): (int(a), int(world.ecoregion_parent[e])) for e, a in zip(ids, counts)}


def plan_samples(world: LatentWorld, total: int | None = None) -> tuple[list[SamplePlan], StratumAllocation]:
    """Draw window locations with the biome-balanced ecoregion allocation."""
    cfg = world.config
    total = cfg.samples_total if total is None else total
    areas = ecoregion_areas(world)
    alloc = allocate_stratified(total, areas, biome_count=len({b for _, b in areas.values()}))
    counts = alloc.with_residual()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5A3B1E]))
    s, half = cfg.raster_size, cfg.raster_size // 2
    span = world.size - s + 1
    centres = world.ecoregion[half : half + span, half : half + span]
    plans: list[SamplePlan] = []
    for e in sorted(counts):
        rows, cols = np.nonzero(centres == e)
        pick = rng.integers(0, len(rows), counts[e])
        for i in pick:
            plans.append(SamplePlan(0, (int(rows[i]), int(cols[i])), int(rng.integers(1, 13)), e, int(world.ecoregion_parent[e])))
    order = rng.permutation(len(plans))
    plans = [SamplePlan(i, plans[j].location, plans[j].month, plans[j].ecoregion, plans[j].biome) for i, j in enumerate(order)]
    return plans, alloc


def sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE, sample_id]))


def iter_samples(world: LatentWorld, plans: list[SamplePlan]) -> Iterator[MultiModalSample]:
    for plan in plans:
        yield render_sample(world, plan.location, plan.month, sample_rng(world.config.seed, plan.sample_id), plan.sample_id)
