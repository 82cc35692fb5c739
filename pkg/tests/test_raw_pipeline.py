import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage import color as skcolor

from liteisp.dataio import SyntheticDomainSpec, procedural_rgb, synthesize_raw
from liteisp.evaluation import psnr
from liteisp.raw_pipeline import (
    PATTERNS,
    RawPatch,
    demosaic,
    luminance_replicate,
    mosaic_rgb,
    pack,
    unpack,
)


def test_pack_black_level_maps_to_zero():
    raw = RawPatch(np.full((2, 2), 64), "RGGB", black_level=64, white_level=1023)
    assert np.all(pack(raw) == 0)


def test_pack_white_level_maps_to_one():
    raw = RawPatch(np.full((2, 2), 1023), "RGGB", black_level=64, white_level=1023)
    assert np.all(pack(raw) == 1)


def test_pack_plane_offsets_by_hand():
    # values 0..15 row-major; white level 15 so normalized value = count / 15
    mosaic = np.arange(16).reshape(4, 4)
    raw = RawPatch(mosaic, "RGGB", 0, 15)
    planes = pack(raw) * 15
    assert planes.shape == (2, 2, 4)
    np.testing.assert_allclose(planes[..., 0], [[0, 2], [8, 10]], atol=1e-5)  # R at (0, 0)
    np.testing.assert_allclose(planes[..., 1], [[1, 3], [9, 11]], atol=1e-5)  # Gr at (0, 1)
    np.testing.assert_allclose(planes[..., 2], [[4, 6], [12, 14]], atol=1e-5)  # Gb at (1, 0)
    np.testing.assert_allclose(planes[..., 3], [[5, 7], [13, 15]], atol=1e-5)  # B at (1, 1)


def test_pack_canonicalizes_patterns():
    # a colour image mosaicked under any pattern packs to the same planes
    rng = np.random.default_rng(0)
    rgb = rng.uniform(size=(8, 8, 3))
    flat = rgb.copy()
    flat[0::2, 0::2] = flat[0::2, 1::2] = flat[1::2, 0::2] = flat[1::2, 1::2] = rgb[0::2, 0::2]
    planes = {p: pack(RawPatch(mosaic_rgb(flat, p) * 1000, p, 0, 1000)) for p in PATTERNS}
    for p in PATTERNS:
        np.testing.assert_allclose(planes[p][..., 0], rgb[0::2, 0::2, 0], atol=1e-6)
        np.testing.assert_allclose(planes[p][..., 3], rgb[0::2, 0::2, 2], atol=1e-6)
        np.testing.assert_allclose(planes[p], planes["RGGB"], atol=1e-6)


def test_odd_dimensions_rejected():
    with pytest.raises(ValueError):
        RawPatch(np.zeros((3, 4)))


def test_bad_levels_rejected():
    with pytest.raises(ValueError):
        RawPatch(np.zeros((2, 2)), black_level=100, white_level=100)


@settings(max_examples=40, deadline=None)
@given(
    pattern=st.sampled_from(PATTERNS),
    h=st.integers(1, 6),
    w=st.integers(1, 6),
    seed=st.integers(0, 2**16),
)
def test_pack_unpack_roundtrip(pattern, h, w, seed):
    rng = np.random.default_rng(seed)
    mosaic = rng.integers(16, 1000, size=(2 * h, 2 * w))
    raw = RawPatch(mosaic, pattern, 16, 1000)
    np.testing.assert_allclose(unpack(pack(raw), pattern), raw.normalized(), atol=1e-6)


def test_demosaic_preserves_constants():
    raw = RawPatch(np.full((16, 16), 500), "GRBG", 0, 1000)
    out = demosaic(raw)
    assert out.shape == (16, 16, 3)
    np.testing.assert_allclose(out, 0.5, atol=1e-6)


def test_demosaic_smooth_gradient_psnr():
    yy, xx = np.mgrid[0:64, 0:64] / 63.0
    rgb = np.stack([0.2 + 0.6 * xx, 0.3 + 0.4 * yy, 0.8 - 0.5 * xx * yy], axis=-1)
    counts = synthesize_raw(rgb, SyntheticDomainSpec(), np.random.default_rng(0))
    out = demosaic(RawPatch(counts, "RGGB", 0, 65535))
    assert psnr(out, rgb) >= 35.0


def test_demosaic_unknown_algo():
    with pytest.raises(ValueError, match="foo"):
        demosaic(RawPatch(np.zeros((4, 4))), "foo")


def test_demosaic_menon_plugin():
    pytest.importorskip("colour_demosaicing")
    raw = RawPatch(np.full((16, 16), 300), "RGGB", 0, 1000)
    np.testing.assert_allclose(demosaic(raw, "menon"), 0.3, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), pattern=st.sampled_from(PATTERNS))
def test_demosaic_output_in_unit_range(seed, pattern):
    rng = np.random.default_rng(seed)
    raw = RawPatch(rng.integers(0, 1200, size=(12, 10)), pattern, 50, 1100)
    out = demosaic(raw)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_luminance_gray_unchanged():
    for v in (0.0, 0.1, 0.5, 0.8, 1.0):
        gray = np.full((4, 4, 3), v)
        np.testing.assert_allclose(luminance_replicate(gray), gray, atol=1e-3)


def test_luminance_equal_L_colors_match():
    red = np.array([[[1.0, 0.0, 0.0]]])
    target_l = skcolor.rgb2lab(red)[0, 0, 0]
    # find the saturated blue-ish colour (0, g, 1) whose L* equals pure red's
    gs = np.linspace(0, 1, 20001)
    ls = skcolor.rgb2lab(np.stack([np.zeros_like(gs), gs, np.ones_like(gs)], -1)[None])[0, :, 0]
    g = gs[np.argmin(np.abs(ls - target_l))]
    blue = np.array([[[0.0, g, 1.0]]])
    assert not np.allclose(red, blue)
    np.testing.assert_allclose(luminance_replicate(red), luminance_replicate(blue), atol=1e-3)


def test_luminance_matches_lab_oracle():
    # oracle: skimage LAB, zero the chroma, convert back to sRGB
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(8, 8, 3))
    lab = skcolor.rgb2lab(img)
    lab[..., 1:] = 0.0
    ref = skcolor.lab2rgb(lab)
    np.testing.assert_allclose(luminance_replicate(img), ref, atol=1e-4)


def test_luminance_channels_identical_and_idempotent():
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(6, 6, 3))
    out = luminance_replicate(img)
    assert np.array_equal(out[..., 0], out[..., 1]) and np.array_equal(out[..., 1], out[..., 2])
    np.testing.assert_allclose(luminance_replicate(out), out, atol=1e-3)


def test_luminance_monotone_in_lightness():
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(200, 3))[None]
    light = skcolor.rgb2lab(img)[0, :, 0]
    out = luminance_replicate(img)[0, :, 0]
    order = np.argsort(light)
    assert np.all(np.diff(out[order]) >= -1e-9)


def test_luminance_torch_is_differentiable_and_finite():
    x = torch.rand(2, 8, 8, 3, dtype=torch.float64) * 1.4 - 0.2
    x.requires_grad_(True)
    luminance_replicate(x).sum().backward()
    assert torch.isfinite(x.grad).all()


def test_procedural_textures_roundtrip():
    rng = np.random.default_rng(4)
    rgb = procedural_rgb(rng, 64)
    counts = synthesize_raw(rgb, SyntheticDomainSpec(), rng)
    assert psnr(demosaic(RawPatch(counts, "RGGB", 0, 65535)), rgb) >= 30.0
