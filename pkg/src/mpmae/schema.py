"""Modality registry, task list, sample container and input standardization."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InvalidArgument, SchemaCorruption

PIXEL = "pixel"
IMAGE = "image"
CONTINUOUS = "continuous"
CATEGORICAL = "categorical"

PRODUCT_LEVELS = ("L1C", "L2A")
OPTICAL = "sentinel2"
EXPECTED_TOTAL_BANDS = 46
PAPER_ECOREGION_CLASSES = 846
STD_FLOOR = 1e-6
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    level: str
    kind: str
    band_count: int
    class_count: int | None = None
    resolution: int | None = None
    # label reserved for "no data"; stored labels then span 0..class_count
    ignore_label: int | None = None
    cyclic: bool = False

    @property
    def num_labels(self) -> int | None:
        """Number of distinct stored label values (including the no-data label)."""
        if self.class_count is None:
            return None
        return self.class_count + (1 if self.ignore_label is not None else 0)

    @property
    def is_pixel(self) -> bool:
        return self.level == PIXEL

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    @property
    def standardized(self) -> bool:
        return self.kind == CONTINUOUS and not self.cyclic


# name, level, kind, bands, classes, ignore label, cyclic
_TABLE = (
    ("sentinel2", PIXEL, CONTINUOUS, 12, None, None, False),
    ("sentinel1", PIXEL, CONTINUOUS, 8, None, None, False),
    ("aster", PIXEL, CONTINUOUS, 2, None, None, False),
    ("canopy_height", PIXEL, CONTINUOUS, 2, None, None, False),
    ("dynamic_world", PIXEL, CATEGORICAL, 1, 9, 0, False),
    ("esa_worldcover", PIXEL, CATEGORICAL, 1, 11, None, False),
    ("biome", IMAGE, CATEGORICAL, 1, 14, None, False),
    ("ecoregion", IMAGE, CATEGORICAL, 1, PAPER_ECOREGION_CLASSES, None, False),
    ("era5_temperature", IMAGE, CONTINUOUS, 9, None, None, False),
    ("era5_precipitation", IMAGE, CONTINUOUS, 3, None, None, False),
    ("geolocation", IMAGE, CONTINUOUS, 4, None, None, True),
    ("date", IMAGE, CONTINUOUS, 2, None, None, True),
)


def build_modality_registry(
    raster_size: int = 64,
    ecoregion_classes: int = 16,
    biome_classes: int = 14,
) -> tuple[ModalitySpec, ...]:
    """Return the 12-modality registry in canonical order.

    ``ecoregion_classes`` defaults to a desk-scale value; pass
    ``PAPER_ECOREGION_CLASSES`` for the full label set. Class counts are
    metadata and never change band counts.
    """
    if raster_size <= 0 or ecoregion_classes <= 0 or biome_classes <= 0:
        raise InvalidArgument("raster size and class counts must be positive")
    registry = []
    for name, level, kind, bands, classes, ignore, cyclic in _TABLE:
        if name == "ecoregion":
            classes = ecoregion_classes
        elif name == "biome":
            classes = biome_classes
        registry.append(
            ModalitySpec(
                name=name,
                level=level,
                kind=kind,
                band_count=bands,
                class_count=classes,
                resolution=raster_size if level == PIXEL else None,
                ignore_label=ignore,
                cyclic=cyclic,
            )
        )
    total = sum(m.band_count for m in registry)
    if total != EXPECTED_TOTAL_BANDS:
        raise SchemaCorruption(f"registry holds {total} bands, expected {EXPECTED_TOTAL_BANDS}")
    return tuple(registry)


def registry_by_name(registry: Iterable[ModalitySpec]) -> dict[str, ModalitySpec]:
    return {m.name: m for m in registry}


def registry_to_json(registry: Sequence[ModalitySpec]) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "modalities": [asdict(m) for m in registry]}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def registry_from_json(text: str) -> tuple[ModalitySpec, ...]:
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported registry schema_version {doc.get('schema_version')!r}")
    return tuple(ModalitySpec(**m) for m in doc["modalities"])


def registry_hash(registry: Sequence[ModalitySpec]) -> str:
    return hashlib.sha256(registry_to_json(registry).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# tasks


MASKED_REGRESSION = "masked-regression"
MASKED_CLASSIFICATION = "masked-classification"
IMAGE_REGRESSION = "image-regression"
IMAGE_CLASSIFICATION = "image-classification"


@dataclass(frozen=True)
class TaskSpec:
    """One pretext task.

    ``targets`` lists ``(modality, first_band, stop_band)`` slices so that a
    single modality can be split across tasks (geolocation feeds both the
    latitude and longitude tasks) and several can be grouped (climate).
    """

    task_id: str
    targets: tuple[tuple[str, int, int], ...]
    loss_kind: str
    output_channels: int
    ignore_label: int | None = None

    @property
    def target_modalities(self) -> list[str]:
        return [t[0] for t in self.targets]

    @property
    def is_pixel(self) -> bool:
        return self.loss_kind in (MASKED_REGRESSION, MASKED_CLASSIFICATION)

    @property
    def is_classification(self) -> bool:
        return self.loss_kind in (MASKED_CLASSIFICATION, IMAGE_CLASSIFICATION)


TASK_ORDER = (
    "sentinel2",
    "sentinel1",
    "aster",
    "canopy_height",
    "dynamic_world",
    "esa_worldcover",
    "biome",
    "ecoregion",
    "climate",
    "latitude",
    "longitude",
    "month",
)
PIXEL_TASKS = TASK_ORDER[:6]
IMAGE_TASKS = TASK_ORDER[6:]


def default_tasks(registry: Sequence[ModalitySpec]) -> list[TaskSpec]:
    reg = registry_by_name(registry)
    tasks = []
    for name in ("sentinel2", "sentinel1", "aster", "canopy_height"):
        tasks.append(TaskSpec(name, ((name, 0, reg[name].band_count),), MASKED_REGRESSION, reg[name].band_count))
    for name in ("dynamic_world", "esa_worldcover"):
        m = reg[name]
        tasks.append(TaskSpec(name, ((name, 0, 1),), MASKED_CLASSIFICATION, m.num_labels, m.ignore_label))
    for name in ("biome", "ecoregion"):
        tasks.append(TaskSpec(name, ((name, 0, 1),), IMAGE_CLASSIFICATION, reg[name].num_labels))
    t, p = reg["era5_temperature"].band_count, reg["era5_precipitation"].band_count
    tasks.append(
        TaskSpec("climate", (("era5_temperature", 0, t), ("era5_precipitation", 0, p)), IMAGE_REGRESSION, t + p)
    )
    tasks.append(TaskSpec("latitude", (("geolocation", 0, 2),), IMAGE_REGRESSION, 2))
    tasks.append(TaskSpec("longitude", (("geolocation", 2, 4),), IMAGE_REGRESSION, 2))
    tasks.append(TaskSpec("month", (("date", 0, 2),), IMAGE_REGRESSION, 2))
    return tasks


TASK_PRESETS = {
    "s2": ("sentinel2",),
    "pixel": PIXEL_TASKS,
    "image": ("sentinel2",) + IMAGE_TASKS,
    "all": TASK_ORDER,
}


def select_tasks(registry: Sequence[ModalitySpec], names: str | Sequence[str]) -> list[TaskSpec]:
    """Resolve a preset name or comma list of task ids.

    Presets: ``s2`` optical only, ``pixel`` the six pixel-level tasks,
    ``image`` optical reconstruction plus the image-level tasks, ``all``.
    """
    if isinstance(names, str):
        wanted = TASK_PRESETS.get(names, tuple(n.strip() for n in names.split(",") if n.strip()))
    else:
        wanted = tuple(names)
    by_id = {t.task_id: t for t in default_tasks(registry)}
    unknown = [n for n in wanted if n not in by_id]
    if unknown or not wanted:
        raise ConfigError(
            f"unknown task(s) {unknown}; valid tasks: {', '.join(TASK_ORDER)}; presets: {', '.join(TASK_PRESETS)}"
        )
    return [by_id[n] for n in TASK_ORDER if n in wanted]


# ---------------------------------------------------------------------------
# cyclic encodings


def encode_cyclic(value: float, period: float) -> tuple[float, float]:
    """Map ``value`` onto the unit circle with the given period."""
    if not (math.isfinite(value) and math.isfinite(period)):
        raise InvalidArgument(f"non-finite cyclic input value={value} period={period}")
    if period <= 0:
        raise InvalidArgument(f"period must be positive, got {period}")
    angle = 2.0 * math.pi * value / period
    return math.sin(angle), math.cos(angle)


def encode_geolocation(lat: float, lon: float) -> np.ndarray:
    # both use period 360 on raw degrees, so latitude covers half the circle
    return np.array(encode_cyclic(lat, 360.0) + encode_cyclic(lon, 360.0), dtype=np.float32)


def encode_month(month: int) -> np.ndarray:
    return np.array(encode_cyclic(month, 12.0), dtype=np.float32)


# ---------------------------------------------------------------------------
# samples


@dataclass
class MultiModalSample:
    """Aligned rasters and vectors for one location.

    Missing continuous values are stored as NaN in raw samples. After
    standardization they are zero and ``valid`` records where data existed.
    """

    pixel: dict[str, np.ndarray]
    image: dict[str, np.ndarray]
    product_level: str = "L2A"
    sample_id: int = 0
    stratum_id: int = 0
    valid: dict[str, np.ndarray] | None = None

    def get(self, name: str) -> np.ndarray:
        if name in self.pixel:
            return self.pixel[name]
        return self.image[name]


@dataclass
class BandStats:
    """Per-band mean/std for every standardized modality.

    The optical modality has one entry per product level, keyed
    ``"sentinel2/L1C"`` and ``"sentinel2/L2A"``.
    """

    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]
    warnings: list[str] = field(default_factory=list)

    @staticmethod
    def key(modality: str, product_level: str | None = None) -> str:
        if modality == OPTICAL:
            if product_level not in PRODUCT_LEVELS:
                raise ConfigError(f"optical stats need a product level, got {product_level!r}")
            return f"{modality}/{product_level}"
        return modality

    def lookup(self, modality: str, product_level: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        k = self.key(modality, product_level)
        if k not in self.mean:
            raise ConfigError(f"no band statistics for {k}")
        return self.mean[k], self.std[k]

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "mean": {k: [float(x) for x in v] for k, v in self.mean.items()},
            "std": {k: [float(x) for x in v] for k, v in self.std.items()},
            "warnings": list(self.warnings),
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "BandStats":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported stats schema_version {doc.get('schema_version')!r}")
        as_arr = lambda d: {k: np.asarray(v, dtype=np.float64) for k, v in d.items()}  # noqa: E731
        return cls(as_arr(doc["mean"]), as_arr(doc["std"]), list(doc.get("warnings", [])))


def _band_axis_view(arr: np.ndarray, is_pixel: bool, n: int) -> np.ndarray:
    return arr.reshape((n, 1, 1)) if is_pixel else arr


def standardize_sample(sample: MultiModalSample, stats: BandStats, registry: Sequence[ModalitySpec]) -> MultiModalSample:
    """Standardize continuous bands to zero mean/unit variance.

    Categorical and cyclic fields pass through. Missing (non-finite) values
    become 0 after the transform, and their locations are recorded in
    ``valid`` for the pixel-level modalities.
    """
    pixel, image, valid = {}, {}, {}
    for m in registry:
        src = sample.pixel if m.is_pixel else sample.image
        if m.name not in src:
            continue
        raw = src[m.name]
        if not m.standardized:
            out = raw.copy()
        else:
            mean, std = stats.lookup(m.name, sample.product_level if m.name == OPTICAL else None)
            if len(mean) != m.band_count:
                raise ConfigError(f"stats for {m.name} have {len(mean)} bands, expected {m.band_count}")
            mean = _band_axis_view(np.asarray(mean), m.is_pixel, m.band_count)
            std = _band_axis_view(np.asarray(std), m.is_pixel, m.band_count)
            ok = np.isfinite(raw)
            out = np.where(ok, (raw - mean) / std, 0.0).astype(np.float32)
            if m.is_pixel:
                valid[m.name] = ok.all(axis=0)
        (pixel if m.is_pixel else image)[m.name] = out
    return replace(sample, pixel=pixel, image=image, valid=valid)


def destandardize_sample(sample: MultiModalSample, stats: BandStats, registry: Sequence[ModalitySpec]) -> MultiModalSample:
    pixel, image = dict(sample.pixel), dict(sample.image)
    for m in registry:
        if not m.standardized:
            continue
        target = pixel if m.is_pixel else image
        if m.name not in target:
            continue
        mean, std = stats.lookup(m.name, sample.product_level if m.name == OPTICAL else None)
        mean = _band_axis_view(np.asarray(mean), m.is_pixel, m.band_count)
        std = _band_axis_view(np.asarray(std), m.is_pixel, m.band_count)
        target[m.name] = (target[m.name] * std + mean).astype(np.float32)
    return replace(sample, pixel=pixel, image=image)


def validate_sample(sample: MultiModalSample, registry: Sequence[ModalitySpec], tol: float = 1e-6) -> list[str]:
    """Return a list of human-readable invariant violations (empty when valid)."""
    problems: list[str] = []
    shapes = set()
    for m in registry:
        src = sample.pixel if m.is_pixel else sample.image
        if m.name not in src:
            problems.append(f"{m.name}: missing")
            continue
        arr = np.asarray(src[m.name])
        if m.is_pixel:
            if arr.ndim != 3 or arr.shape[0] != m.band_count:
                problems.append(f"{m.name}: expected ({m.band_count}, H, W), got {arr.shape}")
                continue
            shapes.add(arr.shape[1:])
            if arr.shape[1] != arr.shape[2]:
                problems.append(f"{m.name}: raster not square {arr.shape[1:]}")
        elif arr.shape != (m.band_count,):
            problems.append(f"{m.name}: expected ({m.band_count},), got {arr.shape}")
            continue
        if m.is_categorical:
            lo, hi = 0, m.num_labels - 1
            bad = np.unique(arr[(arr < lo) | (arr > hi) | (arr != np.round(arr))])
            for label in bad:
                problems.append(f"{m.name}: label {label:g} outside [{lo}, {hi}]")
        if m.cyclic:
            for i in range(0, m.band_count, 2):
                r2 = float(arr[i]) ** 2 + float(arr[i + 1]) ** 2
                if not abs(r2 - 1.0) <= tol:
                    problems.append(f"{m.name}[{i}:{i + 2}]: cyclic pair off unit circle (sin^2+cos^2={r2:.6g})")
    if len(shapes) > 1:
        problems.append(f"pixel-level rasters disagree in spatial shape: {sorted(shapes)}")
    if sample.product_level not in PRODUCT_LEVELS:
        problems.append(f"unknown product level {sample.product_level!r}")
    return problems


def stats_cover(stats: BandStats, registry: Sequence[ModalitySpec]) -> list[str]:
    missing = []
    for m in registry:
        if not m.standardized:
            continue
        levels: Sequence[str | None] = PRODUCT_LEVELS if m.name == OPTICAL else (None,)
        for lvl in levels:
            k = BandStats.key(m.name, lvl)
            if k not in stats.mean:
                missing.append(k)
    return missing

