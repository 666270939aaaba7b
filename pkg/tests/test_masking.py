import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mpmae.errors import InvalidArgument
from mpmae.masking import (
    PatchGrid,
    mask_to_grid,
    num_masked,
    pack_mask,
    patch_normalize,
    patchify,
    sample_mask,
    sample_masks,
    unpack_mask,
    unpatchify,
    upsample_mask_to_pixels,
)


@pytest.mark.parametrize("image,patch", [(224, 32), (112, 16), (56, 8)])
def test_grid_side_seven(image, patch):
    g = PatchGrid(image, patch)
    assert g.grid_side == 7 and g.num_patches == 49


def test_grid_rejects_non_divisor():
    with pytest.raises(InvalidArgument):
        PatchGrid(50, 8)


def test_mask_counts():
    rng = np.random.default_rng(0)
    m = sample_mask(PatchGrid(56, 8), 0.6, rng)
    assert m.sum() == 29 and (~m).sum() == 20
    assert sample_mask(PatchGrid(16, 8), 0.5, rng).sum() == 2


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1, 1.5])
def test_mask_ratio_bounds(ratio):
    with pytest.raises(InvalidArgument):
        num_masked(PatchGrid(56, 8), ratio)


def test_mask_determinism():
    g = PatchGrid(56, 8)
    a = sample_mask(g, 0.6, np.random.default_rng(4))
    b = sample_mask(g, 0.6, np.random.default_rng(4))
    assert np.array_equal(a, b)
    ta = sample_masks(g, 0.6, 3, torch.Generator().manual_seed(1))
    tb = sample_masks(g, 0.6, 3, torch.Generator().manual_seed(1))
    assert torch.equal(ta, tb)
    assert (ta.sum(1) == 29).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.floats(0.01, 0.99))
def test_mask_at_least_one_each(side, ratio):
    g = PatchGrid(side * 8, 8)
    k = num_masked(g, ratio)
    m = sample_mask(g, ratio, np.random.default_rng(0))
    assert m.sum() == k


def test_patchify_roundtrip_and_order():
    g = PatchGrid(16, 4)
    x = torch.randn(3, 16, 16)
    p = patchify(x, g)
    assert p.shape == (16, 3 * 16)
    assert torch.equal(unpatchify(p, g), x)
    ramp = torch.arange(16.0).view(1, 16, 1).expand(1, 16, 16)
    assert torch.equal(patchify(ramp, g)[0], ramp[0, :4, :4].reshape(-1))
    const = torch.full((2, 16, 16), 3.0)
    assert (patchify(const, g) == 3.0).all()
    with pytest.raises(InvalidArgument):
        patchify(torch.zeros(3, 12, 12), g)


def test_patchify_numpy():
    g = PatchGrid(8, 4)
    x = np.random.default_rng(0).normal(size=(2, 8, 8))
    assert np.array_equal(unpatchify(patchify(x, g), g), x)


def test_upsample_mask():
    g = PatchGrid(112, 16)
    none = torch.zeros(49, dtype=torch.bool)
    assert not upsample_mask_to_pixels(none, g).any()
    one = none.clone()
    one[10] = True
    pix = upsample_mask_to_pixels(one, g)
    assert pix.sum() == 256
    r, c = divmod(10, 7)
    assert pix[r * 16 : (r + 1) * 16, c * 16 : (c + 1) * 16].all()
    m = sample_masks(g, 0.6, 2)
    pix = upsample_mask_to_pixels(m, g)
    assert pix.sum() == 2 * 29 * 256
    back = pix.view(2, 7, 16, 7, 16).any(dim=4).any(dim=2).reshape(2, 49)
    assert torch.equal(back, m)


def test_patch_normalize_cases():
    g = PatchGrid(4, 2)
    const = torch.ones(1, 1, 4, 4) * 7
    assert (patch_normalize(const, g) == 0).all()
    two = PatchGrid(2, 2)
    x = torch.tensor([[[[1.0, 3.0], [1.0, 3.0]]]])
    assert torch.allclose(patch_normalize(x, two), torch.tensor([[[[-1.0, 1.0], [-1.0, 1.0]]]]))
    x = torch.randn(2, 3, 16, 16, dtype=torch.float64) * 5 + 2
    out = patchify(patch_normalize(x, PatchGrid(16, 4)), PatchGrid(16, 4), ).reshape(2, 16, 3, 16)
    assert out.mean(-1).abs().max() < 1e-5
    assert (out.var(-1, unbiased=False) - 1).abs().max() < 1e-3


def test_patch_normalize_valid_mask():
    g = PatchGrid(2, 2)
    x = torch.tensor([[[[1.0, 3.0], [100.0, 5.0]]]])
    valid = torch.tensor([[[True, True], [False, True]]])
    out = patch_normalize(x, g, valid)
    assert out[0, 0, 1, 0] == 0
    vals = out[0, 0][valid[0]]
    assert abs(float(vals.mean())) < 1e-6


def test_pack_mask_roundtrip():
    m = sample_masks(PatchGrid(56, 8), 0.6, 4).numpy()
    assert np.array_equal(unpack_mask(pack_mask(m), m.shape), m)


def test_mask_to_grid_row_major():
    g = PatchGrid(24, 8)
    m = torch.tensor([True] + [False] * 8)
    assert mask_to_grid(m, g)[0, 0] and mask_to_grid(m, g).sum() == 1
