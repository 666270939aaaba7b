import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpmae.errors import CorruptDataset, InvalidArgument, UnsupportedVersion
from mpmae.schema import OPTICAL, MultiModalSample, build_modality_registry, encode_month, validate_sample
from mpmae.synthgen import WorldConfig, build_dataset
from mpmae.synthgen.container import MAGIC, read_dataset, read_header, write_array, write_dataset
from mpmae.synthgen.sampling import allocate_stratified
from mpmae.synthgen.stats import compute_band_stats
from mpmae.synthgen.world import (
    generate_latent_world,
    landcover_logits,
    plan_samples,
    render_sample,
)

# --- allocation ---------------------------------------------------------------


def test_allocation_whole_biome():
    areas = {b: (1000.0, b) for b in range(14)}
    alloc = allocate_stratified(1_200_000, areas)
    assert set(alloc.counts.values()) == {85_714}


def test_allocation_half_biome():
    areas = {}
    for b in range(14):
        areas[2 * b] = (500.0, b)
        areas[2 * b + 1] = (500.0, b)
    assert set(allocate_stratified(1_200_000, areas).counts.values()) == {42_857}


def test_allocation_degenerate():
    alloc = allocate_stratified(100, {"e": (7.0, "b")})
    assert alloc.counts == {"e": 100}


def test_allocation_errors():
    with pytest.raises(InvalidArgument):
        allocate_stratified(10, {})
    with pytest.raises(InvalidArgument):
        allocate_stratified(10, {0: (0.0, 0)})


area_maps = st.dictionaries(
    st.integers(0, 200), st.tuples(st.floats(0.5, 1e5), st.integers(0, 13)), min_size=1, max_size=60
)


@settings(max_examples=200, deadline=None)
@given(st.integers(14, 2_000_000), area_maps)
def test_allocation_balanced_across_biomes(total, areas):
    alloc = allocate_stratified(total, areas)
    biomes = set(alloc.biome_areas)
    share = total / len(biomes)
    for b, n in alloc.biome_totals().items():
        k = sum(1 for e in alloc.parent if alloc.parent[e] == b)
        assert share - k < n <= share + 1e-9
    assert sum(alloc.counts.values()) <= total
    topped = alloc.with_residual()
    assert sum(topped.values()) == min(total, sum(alloc.counts.values()) + len(alloc.counts))


# --- world --------------------------------------------------------------------


def test_world_determinism():
    a = generate_latent_world(WorldConfig(seed=5, raster_size=32))
    b = generate_latent_world(WorldConfig(seed=5, raster_size=32))
    c = generate_latent_world(WorldConfig(seed=6, raster_size=32))
    assert a.digest() == b.digest()
    assert not np.array_equal(a.latents, c.latents)


def test_biome_histogram():
    world = generate_latent_world(WorldConfig(seed=0, raster_size=32, world_size=256))
    frac = np.bincount(world.biome.ravel(), minlength=14) / world.biome.size
    assert frac.min() >= 0.05 and frac.max() <= 0.10
    assert np.isfinite(world.latents).all()


@pytest.mark.parametrize("bad", [dict(raster_size=8), dict(biome_count=0), dict(noise_scale={"sentinel2": -1.0})])
def test_world_config_rejects(bad):
    with pytest.raises(InvalidArgument):
        WorldConfig(**bad)


@pytest.fixture(scope="module")
def world():
    return generate_latent_world(WorldConfig(seed=3, raster_size=32))


def test_render_determinism_and_validity(world):
    reg = build_modality_registry(raster_size=32)
    a = render_sample(world, (4, 9), 7, np.random.default_rng(1), 0)
    b = render_sample(world, (4, 9), 7, np.random.default_rng(1), 0)
    for k in a.pixel:
        assert np.array_equal(a.pixel[k], b.pixel[k], equal_nan=True)
    for k in a.image:
        assert np.array_equal(a.image[k], b.image[k])
    assert validate_sample(a, reg) == []


def test_render_month_encoding(world):
    s = render_sample(world, (0, 0), 3, np.random.default_rng(0))
    assert s.image["date"] == pytest.approx([1.0, 0.0], abs=1e-6)
    assert np.array_equal(s.image["date"], encode_month(3))


def test_render_out_of_bounds(world):
    with pytest.raises(InvalidArgument):
        render_sample(world, (world.size - 10, 0), 1, np.random.default_rng(0))


def test_landcover_consistency(world):
    """dynamic_world labels equal the argmax of the mixtures that colour the optical bands."""
    loc = (20, 30)
    s = render_sample(world, loc, 5, np.random.default_rng(2))
    dw_logits, esa_logits = landcover_logits(world, loc)
    label = s.pixel["dynamic_world"][0]
    keep = label != 0
    assert np.array_equal(label[keep] - 1, dw_logits.argmax(0)[keep])
    assert np.array_equal(s.pixel["esa_worldcover"][0], esa_logits.argmax(0))


def test_learnability_witness(world):
    """A pixelwise multinomial logistic model maps optical bands to landcover well above chance."""
    from sklearn.linear_model import LogisticRegression

    rng = np.random.default_rng(0)
    xs, ys = [], []
    plans, _ = plan_samples(world, 24)
    for p in plans:
        s = render_sample(world, p.location, p.month, rng, p.sample_id, product_level="L2A")
        x = s.pixel[OPTICAL].reshape(12, -1).T
        y = s.pixel["dynamic_world"][0].ravel()
        ok = np.isfinite(x).all(1) & (y > 0)
        xs.append(x[ok])
        ys.append(y[ok])
    x, y = np.concatenate(xs), np.concatenate(ys)
    idx = rng.permutation(len(x))[:15_000]
    tr, te = idx[:10_000], idx[10_000:]
    clf = LogisticRegression(max_iter=500).fit(x[tr], y[tr])
    assert clf.score(x[te], y[te]) > 0.8


# --- container ----------------------------------------------------------------


@pytest.fixture()
def ten_samples(world):
    rng = np.random.default_rng(0)
    return [render_sample(world, (i, 2 * i), 1 + i, rng, i) for i in range(10)]


def test_container_roundtrip(tmp_path, ten_samples):
    reg = build_modality_registry(raster_size=32)
    write_dataset(ten_samples, tmp_path, reg)
    ds = read_dataset(tmp_path)
    assert len(ds) == 10
    for i, s in enumerate(ten_samples):
        got = ds[i]
        for k in s.pixel:
            assert np.array_equal(got.pixel[k], s.pixel[k], equal_nan=True)
        for k in s.image:
            assert np.array_equal(got.image[k], s.image[k])
        assert got.product_level == s.product_level and got.sample_id == s.sample_id
    # random access on its own agrees with the sequential read
    solo = read_dataset(tmp_path)[7]
    assert np.array_equal(solo.pixel["sentinel1"], ten_samples[7].pixel["sentinel1"])
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert {m.name for m in reg} <= set(manifest["records"])


def test_container_truncation(tmp_path, ten_samples):
    reg = build_modality_registry(raster_size=32)
    write_dataset(ten_samples, tmp_path, reg)
    f = tmp_path / "aster.bin"
    f.write_bytes(f.read_bytes()[:-1])
    with pytest.raises(CorruptDataset):
        read_dataset(tmp_path)


def test_container_header(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_array(tmp_path / "a.bin", arr)
    raw = (tmp_path / "a.bin").read_bytes()
    assert raw[:8] == MAGIC
    dtype, shape, _ = read_header(tmp_path / "a.bin")
    assert shape == (2, 3, 4) and dtype == np.float32
    bumped = raw[:8] + (99).to_bytes(4, "little") + raw[12:]
    (tmp_path / "b.bin").write_bytes(bumped)
    with pytest.raises(UnsupportedVersion):
        read_header(tmp_path / "b.bin")


def test_container_rejects_empty(tmp_path):
    with pytest.raises(InvalidArgument):
        write_dataset([], tmp_path, build_modality_registry(raster_size=32))


# --- stats ----------------------------------------------------------------------


def _dataset_from(tmp_path, samples):
    reg = build_modality_registry(raster_size=samples[0].pixel[OPTICAL].shape[-1])
    write_dataset(samples, tmp_path, reg)
    return read_dataset(tmp_path)


def test_stats_hand_cases(tmp_path, ten_samples):
    samples = []
    for i, s in enumerate(ten_samples[:2]):
        pixel = dict(s.pixel)
        pixel["aster"] = np.stack([np.full((32, 32), 2.0 * i), np.full((32, 32), 7.0)]).astype(np.float32)
        samples.append(MultiModalSample(pixel, s.image, s.product_level, i, s.stratum_id))
    stats = compute_band_stats(_dataset_from(tmp_path, samples), split="pretrain")
    mean, std = stats.lookup("aster")
    assert mean == pytest.approx([1.0, 7.0])
    assert std[0] == pytest.approx(1.0)
    assert std[1] == 1e-6
    assert any("aster" in w for w in stats.warnings)


def test_stats_separate_per_level(tiny_dataset):
    stats = tiny_dataset.stats
    m1, _ = stats.lookup(OPTICAL, "L1C")
    m2, _ = stats.lookup(OPTICAL, "L2A")
    assert not np.allclose(m1, m2)


def test_stats_of_standardized_data(tiny_dataset):
    from mpmae.schema import standardize_sample

    stats, reg = tiny_dataset.stats, tiny_dataset.registry
    idx = tiny_dataset.split("pretrain")
    for name in ("sentinel1", "aster"):
        vals = np.stack([standardize_sample(tiny_dataset[int(i)], stats, reg).pixel[name] for i in idx])
        vals = vals.transpose(1, 0, 2, 3).reshape(vals.shape[1], -1)
        assert np.abs(vals.mean(1)).max() < 1e-3
        assert np.abs(vals.std(1) - 1).max() < 1e-3


def test_build_dataset_determinism(tmp_path):
    cfg = WorldConfig(seed=9, samples_total=20, raster_size=32)
    a, counts = build_dataset(cfg, tmp_path / "a")
    b, _ = build_dataset(cfg, tmp_path / "b")
    assert sum(counts.values()) == 20
    for name in ("sentinel2", "dynamic_world", "biome"):
        assert (tmp_path / "a" / f"{name}.bin").read_bytes() == (tmp_path / "b" / f"{name}.bin").read_bytes()


def test_default_dataset_biome_balance():
    world = generate_latent_world(WorldConfig(seed=0))
    plans, alloc = plan_samples(world)
    assert len(plans) == 4096
    per = np.bincount([p.biome for p in plans], minlength=14)
    assert per.max() - per.min() <= max(math.ceil(4096 / 14 * 0.02), 14)
