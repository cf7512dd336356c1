import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from zoomsr.imaging import (
    backward_warp,
    backward_warp_t,
    center_crop,
    center_crop_t,
    center_window,
    cubic_kernel,
    pixel_shuffle,
    pixel_unshuffle,
    psnr,
    read_png,
    resize_bicubic,
    resize_bicubic_t,
    resize_flow,
    resize_to,
    ssim,
    ssim_map,
    write_png,
)


def rand_img(h, w, c=3, seed=0):
    return np.random.default_rng(seed).random((h, w, c))


# ---------------------------------------------------------------- crops

def test_center_window_geometry():
    assert center_window(64, 64, 4) == (24, 24, 16, 16)
    assert center_window(64, 48, 2) == (16, 12, 32, 24)
    # odd leftovers go to the bottom/right
    assert center_window(10, 10, 3) == (3, 3, 3, 3)


@pytest.mark.parametrize("r", [0.5, 0])
def test_center_window_rejects_small_ratio(r):
    with pytest.raises(ValueError):
        center_window(8, 8, r)


def test_center_window_rejects_empty():
    with pytest.raises(ValueError):
        center_window(3, 3, 4)


def test_center_crop_numpy_and_torch_agree():
    img = rand_img(32, 24)
    crop = center_crop(img, 4)
    assert crop.shape == (8, 6, 3)
    np.testing.assert_array_equal(crop, img[12:20, 9:15])
    t = torch.from_numpy(img.transpose(2, 0, 1))
    np.testing.assert_array_equal(center_crop_t(t, 4).numpy().transpose(1, 2, 0), crop)


# ---------------------------------------------------------------- bicubic

def _brute_resize_1d(x, n_out):
    """Direct evaluation of the bicubic sum for every output sample."""
    n_in = len(x)
    scale = n_out / n_in
    s = min(scale, 1.0)
    out = np.zeros(n_out)
    for o in range(n_out):
        c = (o + 0.5) / scale - 0.5
        acc = wsum = 0.0
        for k in range(int(math.floor(c - 2 / s)), int(math.ceil(c + 2 / s)) + 1):
            wt = float(cubic_kernel((k - c) * s))
            acc += wt * x[min(max(k, 0), n_in - 1)]
            wsum += wt
        out[o] = acc / wsum
    return out


@pytest.mark.parametrize("n_in,n_out", [(8, 32), (32, 8), (12, 18), (17, 5)])
def test_resize_matches_brute_force(n_in, n_out):
    img = rand_img(n_in, n_in, 1, seed=n_in)[..., 0]
    expect = np.stack([_brute_resize_1d(row, n_out) for row in img])
    expect = np.stack([_brute_resize_1d(col, n_out) for col in expect.T]).T
    got = resize_to(img[..., None], (n_out, n_out), clip=False)[..., 0]
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_cubic_kernel_values():
    np.testing.assert_allclose(cubic_kernel([0, 1, 2, 0.5]), [1, 0, 0, 0.5625])


def test_resize_preserves_constants():
    img = np.full((9, 13, 3), 0.37)
    np.testing.assert_allclose(resize_bicubic(img, 4), 0.37, atol=1e-12)
    np.testing.assert_allclose(resize_bicubic(img, 0.5), 0.37, atol=1e-12)


def test_resize_torch_matches_numpy():
    img = rand_img(12, 10)
    ref = resize_to(img, (48, 40), clip=False)
    got = resize_bicubic_t(torch.from_numpy(img.transpose(2, 0, 1))[None], scale=4)
    np.testing.assert_allclose(got[0].numpy().transpose(1, 2, 0), ref, atol=1e-12)


def test_resize_rejects_bad_scale():
    with pytest.raises(ValueError):
        resize_bicubic(rand_img(4, 4), 0)
    with pytest.raises(ValueError):
        resize_bicubic(rand_img(4, 4), 0.01)


# ---------------------------------------------------------------- (un)shuffle

def _hand_unshuffle(f, r):
    c, h, w = f.shape
    out = np.zeros((c * r * r, h // r, w // r))
    for ch in range(c):
        for i in range(r):
            for j in range(r):
                out[ch * r * r + i * r + j] = f[ch, i::r, j::r]
    return out


def test_unshuffle_matches_hand_loop():
    f = np.random.default_rng(3).random((3, 8, 12))
    got = pixel_unshuffle(torch.from_numpy(f), 4).numpy()
    np.testing.assert_array_equal(got, _hand_unshuffle(f, 4))


def test_shuffle_matches_torch_builtin():
    f = torch.randn(2, 3 * 4, 5, 6)
    torch.testing.assert_close(pixel_shuffle(f, 2), F.pixel_shuffle(f, 2), rtol=0, atol=0)
    torch.testing.assert_close(pixel_unshuffle(F.pixel_shuffle(f, 2), 2), f, rtol=0, atol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_shuffle_roundtrip(c, r, hb, wb):
    f = torch.randn(c, hb * r, wb * r)
    assert torch.equal(pixel_shuffle(pixel_unshuffle(f, r), r), f)


def test_unshuffle_rejects_indivisible():
    with pytest.raises(ValueError):
        pixel_unshuffle(torch.zeros(1, 5, 8), 2)
    with pytest.raises(ValueError):
        pixel_shuffle(torch.zeros(3, 4, 4), 2)


# ---------------------------------------------------------------- warping

def test_backward_warp_integer_shift():
    img = rand_img(10, 12)
    flow = np.zeros((10, 12, 2))
    flow[..., 0] = 2      # sample two columns to the right
    flow[..., 1] = -1     # and one row up
    out = backward_warp(img, flow)
    np.testing.assert_array_equal(out[1:, :-2], img[:-1, 2:])


def test_backward_warp_zero_flow_identity():
    img = rand_img(7, 9)
    np.testing.assert_array_equal(backward_warp(img, np.zeros((7, 9, 2))), img)


def test_backward_warp_torch_matches_numpy():
    img = rand_img(9, 11)
    flow = np.random.default_rng(1).normal(0, 1.5, (9, 11, 2))
    ref = backward_warp(img, flow)
    x = torch.from_numpy(img.transpose(2, 0, 1))[None]
    f = torch.from_numpy(flow.transpose(2, 0, 1))[None]
    got = backward_warp_t(x, f)[0].numpy().transpose(1, 2, 0)
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_resize_flow_scales_vectors():
    flow = np.zeros((4, 6, 2))
    flow[..., 0], flow[..., 1] = 1.5, -0.5
    out = resize_flow(flow, (16, 12))
    np.testing.assert_allclose(out[..., 0], 3.0)
    np.testing.assert_allclose(out[..., 1], -2.0)


# ---------------------------------------------------------------- metrics

def test_psnr_closed_form():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.1)
    assert psnr(a, b) == pytest.approx(20.0)
    assert psnr(a, a) == math.inf


def test_ssim_matches_skimage():
    a = rand_img(32, 40, seed=4)
    b = np.clip(a + np.random.default_rng(5).normal(0, 0.1, a.shape), 0, 1)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0, channel_axis=2)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_identity_and_shape():
    a = rand_img(20, 30)
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim_map(a, a).shape == (10, 20)
    with pytest.raises(ValueError):
        ssim_map(a[:8], a[:8])


def test_png_roundtrip(tmp_path):
    img = np.round(rand_img(6, 5) * 255) / 255
    write_png(tmp_path / "x.png", img)
    np.testing.assert_allclose(read_png(tmp_path / "x.png"), img, atol=1e-12)


def test_crop_identity_and_composition():
    img = rand_img(48, 48)
    np.testing.assert_array_equal(center_crop(img, 1), img)
    assert center_crop(img, 4).shape == (12, 12, 3)
    np.testing.assert_array_equal(center_crop(center_crop(img, 2), 2), center_crop(img, 4))


def test_resize_scale_one_is_identity():
    img = rand_img(10, 10)
    assert np.abs(resize_bicubic(img, 1) - img).max() < 1e-6


def test_unshuffle_hand_enumeration():
    f = torch.tensor([[[1., 2.], [3., 4.]]])
    assert pixel_unshuffle(f, 2).flatten().tolist() == [1, 2, 3, 4]
    assert torch.equal(pixel_shuffle(torch.tensor([1., 2., 3., 4.]).view(4, 1, 1), 2), f)
    assert pixel_unshuffle(torch.zeros(3, 64, 64), 4).shape == (48, 16, 16)


def test_warp_half_pixel_on_ramp():
    ramp = np.tile(np.arange(6, dtype=float), (3, 1))[..., None]
    flow = np.zeros((3, 6, 2))
    flow[..., 0] = 0.5
    out = backward_warp(ramp, flow)
    np.testing.assert_allclose(out[0, :-1, 0], np.arange(5) + 0.5)
    assert out[0, -1, 0] == 5.0


@pytest.mark.parametrize("dx", range(-3, 4))
@pytest.mark.parametrize("dy", range(-3, 4))
def test_integer_warp_is_clamped_index_shift(dx, dy):
    img = rand_img(8, 8, 1, seed=(dx + 3) * 7 + dy + 3)
    flow = np.zeros((8, 8, 2))
    flow[..., 0], flow[..., 1] = dx, dy
    yy, xx = np.mgrid[0:8, 0:8]
    expect = img[np.clip(yy + dy, 0, 7), np.clip(xx + dx, 0, 7)]
    np.testing.assert_array_equal(backward_warp(img, flow), expect)


def test_psnr_reference_values():
    z = np.zeros((4, 4, 3))
    assert psnr(z, z + 0.5) == pytest.approx(6.0206, abs=1e-4)
    assert psnr(z, z + 1.0) == pytest.approx(0.0)


def test_ssim_inverted_and_constant():
    a = rand_img(24, 24, seed=9)
    assert ssim(a, 1 - a) < 0.5
    x, y = np.full((16, 16, 1), 0.2), np.full((16, 16, 1), 0.6)
    c1 = 0.01 ** 2
    assert ssim(x, y) == pytest.approx((2 * 0.2 * 0.6 + c1) / (0.2 ** 2 + 0.6 ** 2 + c1))


def test_metrics_symmetric_and_flip_invariant():
    a, b = rand_img(20, 24, seed=1), rand_img(20, 24, seed=2)
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a[:, ::-1], b[:, ::-1]) == pytest.approx(ssim(a, b), abs=1e-12)
    assert psnr(a[:, ::-1], b[:, ::-1]) == pytest.approx(psnr(a, b), abs=1e-12)
