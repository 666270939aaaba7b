"""On-disk dataset container: JSON manifest plus one raw array file per field.

Array file layout (all integers little-endian)::

    magic   8 bytes  b"MMDS\\0\\0\\0\\1"
    version u32
    dtype   u8       see DTYPE_CODES
    rank    u8
    shape   rank x u64
    payload row-major, little-endian
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import CorruptDataset, InvalidArgument, UnsupportedVersion
from ..schema import (
    PRODUCT_LEVELS,
    BandStats,
    ModalitySpec,
    MultiModalSample,
    registry_from_json,
    registry_hash,
    registry_to_json,
)

MAGIC = b"MMDS\x00\x00\x00\x01"
FORMAT_VERSION = 1
DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("u1"),
    3: np.dtype("<i2"),
    4: np.dtype("<i4"),
    5: np.dtype("<i8"),
    6: np.dtype("<f8"),
}
CODE_FOR = {v: k for k, v in DTYPE_CODES.items()}
META_FIELDS = ("product_level", "sample_id", "stratum_id")
MANIFEST = "manifest.json"
STATS = "stats.json"


def _header(dtype: np.dtype, shape: Sequence[int]) -> bytes:
    dtype = np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).itemsize > 1 else np.dtype(dtype)
    if dtype not in CODE_FOR:
        raise InvalidArgument(f"unsupported dtype {dtype}")
    return MAGIC + struct.pack("<IBB", FORMAT_VERSION, CODE_FOR[dtype], len(shape)) + struct.pack(f"<{len(shape)}Q", *shape)


def write_array(path: str | os.PathLike, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array)
    dtype = array.dtype.newbyteorder("<") if array.dtype.itemsize > 1 else array.dtype
    with open(path, "wb") as fh:
        fh.write(_header(dtype, array.shape))
        fh.write(array.astype(dtype, copy=False).tobytes(order="C"))


def read_header(path: str | os.PathLike) -> tuple[np.dtype, tuple[int, ...], int]:
    """Return (dtype, shape, payload offset); validates magic, version and size."""
    with open(path, "rb") as fh:
        head = fh.read(14)
        if len(head) < 14 or head[:8] != MAGIC:
            raise CorruptDataset(f"{path}: bad magic")
        version, code, rank = struct.unpack("<IBB", head[8:14])
        if version != FORMAT_VERSION:
            raise UnsupportedVersion(f"{path}: array format version {version}, expected {FORMAT_VERSION}")
        if code not in DTYPE_CODES:
            raise CorruptDataset(f"{path}: unknown dtype code {code}")
        raw = fh.read(8 * rank)
        if len(raw) != 8 * rank:
            raise CorruptDataset(f"{path}: truncated header")
        shape = struct.unpack(f"<{rank}Q", raw)
    dtype = DTYPE_CODES[code]
    offset = 14 + 8 * rank
    expected = offset + int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = os.path.getsize(path)
    if actual != expected:
        raise CorruptDataset(f"{path}: file holds {actual} bytes, header implies {expected}")
    return dtype, tuple(int(s) for s in shape), offset


def open_array(path: str | os.PathLike, mode: str = "r") -> np.ndarray:
    dtype, shape, offset = read_header(path)
    if int(np.prod(shape)) == 0:
        return np.zeros(shape, dtype=dtype)
    return np.memmap(path, dtype=dtype, mode=mode, offset=offset, shape=shape)


def _preallocate(path: Path, dtype: np.dtype, shape: tuple[int, ...]) -> np.ndarray:
    header = _header(dtype, shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.truncate(len(header) + int(np.prod(shape)) * np.dtype(dtype).itemsize)
    return np.memmap(path, dtype=dtype, mode="r+", offset=len(header), shape=shape)


def _field_dtype(m: ModalitySpec) -> np.dtype:
    if m.is_categorical:
        return np.dtype("u1") if m.is_pixel and m.num_labels <= 255 else np.dtype("<i4")
    return np.dtype("<f4")


def _field_shape(m: ModalitySpec, raster: int) -> tuple[int, ...]:
    return (m.band_count, raster, raster) if m.is_pixel else (m.band_count,)


class DatasetWriter:
    """Streams samples into preallocated array files; single writer."""

    def __init__(self, directory: str | os.PathLike, registry: Sequence[ModalitySpec], count: int, raster: int):
        if count <= 0:
            raise InvalidArgument("dataset must contain at least one sample")
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.registry = tuple(registry)
        self.count = count
        self.raster = raster
        self.n = 0
        self.records: dict[str, dict] = {}
        self.arrays: dict[str, np.ndarray] = {}
        fields = [(m.name, _field_dtype(m), _field_shape(m, raster), "modality") for m in self.registry]
        fields += [("product_level", np.dtype("u1"), (), "meta"), ("sample_id", np.dtype("<i8"), (), "meta"),
                   ("stratum_id", np.dtype("<i4"), (), "meta")]
        for name, dtype, shape, role in fields:
            full = (count,) + shape
            fname = f"{name}.bin"
            self.arrays[name] = _preallocate(self.dir / fname, dtype, full)
            self.records[name] = {
                "file": fname,
                "dtype": dtype.str,
                "shape": list(full),
                "byte_order": "little",
                "layout": "row-major",
                "role": role,
            }

    def add(self, sample: MultiModalSample) -> None:
        if self.n >= self.count:
            raise InvalidArgument("writer is full")
        i = self.n
        for m in self.registry:
            self.arrays[m.name][i] = sample.get(m.name)
        self.arrays["product_level"][i] = PRODUCT_LEVELS.index(sample.product_level)
        self.arrays["sample_id"][i] = sample.sample_id
        self.arrays["stratum_id"][i] = sample.stratum_id
        self.n += 1

    def close(self, splits: dict[str, list[int]] | None = None, extra: dict | None = None) -> Path:
        if self.n != self.count:
            raise InvalidArgument(f"wrote {self.n} of {self.count} declared samples")
        for arr in self.arrays.values():
            arr.flush()
        self.arrays.clear()
        splits = splits if splits is not None else {"pretrain": list(range(self.count))}
        manifest = {
            "format_version": FORMAT_VERSION,
            "sample_count": self.count,
            "raster_size": self.raster,
            "registry_hash": registry_hash(self.registry),
            "registry": json.loads(registry_to_json(self.registry)),
            "records": self.records,
            "splits": {k: [int(i) for i in v] for k, v in splits.items()},
            "stats": STATS,
            "extra": extra or {},
        }
        tmp = self.dir / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1))
        os.replace(tmp, self.dir / MANIFEST)
        return self.dir / MANIFEST


def write_dataset(
    samples: Iterable[MultiModalSample],
    directory: str | os.PathLike,
    registry: Sequence[ModalitySpec],
    count: int | None = None,
    splits: dict[str, list[int]] | None = None,
    extra: dict | None = None,
) -> Path:
    """Write samples and return the manifest path.

    ``count`` is required when ``samples`` is a one-shot iterator.
    """
    if count is None:
        samples = list(samples)
        count = len(samples)
    it = iter(samples)
    first = next(it, None)
    if first is None:
        raise InvalidArgument("cannot write an empty dataset")
    raster = next(iter(first.pixel.values())).shape[-1]
    writer = DatasetWriter(directory, registry, count, raster)
    writer.add(first)
    for s in it:
        writer.add(s)
    return writer.close(splits, extra)


class MMDataset:
    """Random-access, memory-mapped view of a written dataset."""

    def __init__(self, directory: str | os.PathLike):
        path = Path(directory)
        if path.name == MANIFEST:
            path = path.parent
        self.dir = path
        mpath = path / MANIFEST
        if not mpath.exists():
            raise CorruptDataset(f"no manifest at {mpath}")
        self.manifest = json.loads(mpath.read_text())
        version = self.manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise UnsupportedVersion(f"dataset format version {version!r}, expected {FORMAT_VERSION}")
        self.registry = registry_from_json(json.dumps(self.manifest["registry"]))
        if registry_hash(self.registry) != self.manifest["registry_hash"]:
            raise CorruptDataset("registry hash mismatch")
        names = [m.name for m in self.registry]
        records = self.manifest["records"]
        missing = [n for n in names if n not in records]
        if missing:
            raise CorruptDataset(f"manifest lacks records for {missing}")
        self.arrays: dict[str, np.ndarray] = {}
        for name, rec in records.items():
            dtype, shape, _ = read_header(path / rec["file"])
            if list(shape) != list(rec["shape"]) or dtype.str != np.dtype(rec["dtype"]).str:
                raise CorruptDataset(f"{rec['file']}: header {dtype.str}{shape} disagrees with manifest")
            self.arrays[name] = open_array(path / rec["file"])
        self.count = int(self.manifest["sample_count"])
        self.raster_size = int(self.manifest["raster_size"])
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.manifest["splits"].items()}
        self._stats: BandStats | None = None

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> MultiModalSample:
        if not -self.count <= i < self.count:
            raise IndexError(i)
        pixel, image = {}, {}
        for m in self.registry:
            (pixel if m.is_pixel else image)[m.name] = np.array(self.arrays[m.name][i])
        return MultiModalSample(
            pixel=pixel,
            image=image,
            product_level=PRODUCT_LEVELS[int(self.arrays["product_level"][i])],
            sample_id=int(self.arrays["sample_id"][i]),
            stratum_id=int(self.arrays["stratum_id"][i]),
        )

    def split(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise InvalidArgument(f"unknown split {name!r}; have {sorted(self.splits)}")
        return self.splits[name]

    @property
    def stats(self) -> BandStats:
        if self._stats is None:
            p = self.dir / STATS
            if not p.exists():
                raise CorruptDataset(f"no band statistics at {p}")
            self._stats = BandStats.from_json(p.read_text())
        return self._stats

    def save_stats(self, stats: BandStats) -> None:
        (self.dir / STATS).write_text(stats.to_json())
        self._stats = stats


def read_dataset(path: str | os.PathLike) -> MMDataset:
    return MMDataset(path)


# generic named arrays (downstream sets, reconstruction dumps)


def write_arrays(directory: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    records = {}
    for name, arr in arrays.items():
        write_array(d / f"{name}.bin", arr)
        records[name] = {"file": f"{name}.bin", "dtype": np.asarray(arr).dtype.str, "shape": list(np.shape(arr))}
    doc = {"format_version": FORMAT_VERSION, "records": records, "meta": meta or {}}
    (d / MANIFEST).write_text(json.dumps(doc, sort_keys=True, indent=1))
    return d / MANIFEST


def read_arrays(directory: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    doc = json.loads((d / MANIFEST).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersion(f"format version {doc.get('format_version')!r}")
    out = {}
    for name, rec in doc["records"].items():
        _, shape, _ = read_header(d / rec["file"])
        if list(shape) != rec["shape"]:
            raise CorruptDataset(f"{rec['file']}: shape {shape} disagrees with manifest {rec['shape']}")
        out[name] = open_array(d / rec["file"])
    return out, doc.get("meta", {})
