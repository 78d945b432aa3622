import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vfisr.frames import (
    PSNR_CAP,
    Frame,
    bicubic_resize,
    psnr,
    rgb_from_yuv,
    ssim,
    yuv_from_rgb,
)


def keys_cubic(x, a=-0.5):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


def mirror(i, n):
    while i < 0 or i >= n:
        i = -1 - i if i < 0 else 2 * n - 1 - i
    return i


def brute_resize_1d(values, n_out):
    """Direct per-output-site evaluation of the antialiased a=-0.5 kernel."""
    n_in = len(values)
    scale = n_out / n_in
    k = min(scale, 1.0)
    out = []
    for i in range(n_out):
        centre = (i + 0.5) / scale - 0.5
        num = den = 0.0
        for j in range(math.floor(centre - 2 / k) - 1, math.ceil(centre + 2 / k) + 2):
            wgt = k * keys_cubic(k * (centre - j))
            num += wgt * values[mirror(j, n_in)]
            den += wgt
        out.append(num / den)
    return np.array(out)


def brute_resize(img, out_h, out_w):
    rows = np.array([brute_resize_1d(img[:, c], out_h) for c in range(img.shape[1])]).T
    return np.array([brute_resize_1d(rows[r], out_w) for r in range(out_h)])


def test_resize_identity():
    rng = np.random.default_rng(0)
    f = Frame(rng.random((7, 9, 3)))
    assert np.array_equal(bicubic_resize(f, 1).data, f.data)


def test_resize_constant_halving():
    f = Frame(np.full((16, 12, 3), 0.5))
    out = bicubic_resize(f, 0.5)
    assert out.shape == (8, 6, 3)
    np.testing.assert_allclose(out.data, 0.5, atol=1e-12)


def test_resize_ramp_matches_kernel_oracle():
    ramp = np.add.outer(np.arange(8.0), 2 * np.arange(8.0)) / 24.0
    out = bicubic_resize(Frame(ramp[..., None]), 0.5).data[..., 0]
    np.testing.assert_allclose(out, brute_resize(ramp, 4, 4), atol=1e-12)


@pytest.mark.parametrize("scale,shape", [(2, (5, 6)), (0.25, (16, 12)), (0.5, (9, 7))])
def test_resize_random_matches_oracle(scale, shape):
    img = np.random.default_rng(3).random(shape)
    out = bicubic_resize(Frame(img[..., None]), scale).data[..., 0]
    oh, ow = round(shape[0] * scale), round(shape[1] * scale)
    np.testing.assert_allclose(out, brute_resize(img, oh, ow), atol=1e-12)


def test_resize_upscale_interpolates_samples_exactly_at_integer_phase():
    # at scale 1 the Catmull-Rom kernel is a delta on integers
    img = np.random.default_rng(1).random((6, 6))
    np.testing.assert_allclose(brute_resize(img, 6, 6), img, atol=1e-15)


def test_resize_rejects_zero_size():
    with pytest.raises(ValueError):
        bicubic_resize(Frame(np.zeros((1, 1, 1))), 0.25)


@settings(max_examples=25, deadline=None)
@given(
    a=arrays(np.float64, (8, 6, 1), elements=st.floats(0, 1)),
    b=arrays(np.float64, (8, 6, 1), elements=st.floats(0, 1)),
    alpha=st.floats(-2, 2),
    beta=st.floats(-2, 2),
)
def test_resize_is_linear(a, b, alpha, beta):
    lhs = bicubic_resize(Frame(alpha * a + beta * b), 0.5).data
    rhs = alpha * bicubic_resize(Frame(a), 0.5).data + beta * bicubic_resize(Frame(b), 0.5).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_psnr_examples():
    a = Frame(np.full((4, 4, 3), 0.25))
    assert psnr(a, a) == PSNR_CAP
    b = Frame(np.full((4, 4, 3), 0.25 + 1 / 16))
    assert psnr(a, b) == pytest.approx(10 * math.log10(256), abs=1e-9)
    assert psnr(a, b) == pytest.approx(24.082, abs=1e-3)
    assert psnr(Frame(np.zeros((3, 3, 3))), Frame(np.ones((3, 3, 3)))) == pytest.approx(0.0, abs=1e-12)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(Frame(np.zeros((3, 3, 3))), Frame(np.zeros((3, 4, 3))))


def test_psnr_symmetric_and_monotone():
    rng = np.random.default_rng(5)
    base = rng.random((16, 16, 3))
    noise = rng.uniform(-1, 1, base.shape)
    vals = [psnr(base, base + amp * noise) for amp in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]
    x = base + 0.05 * noise
    assert psnr(base, x) == psnr(x, base)


def test_ssim_against_skimage():
    from skimage.metrics import structural_similarity

    rng = np.random.default_rng(2)
    a = rng.random((32, 40))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    ref = structural_similarity(
        a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0
    )
    assert ssim(a, b) == pytest.approx(ref, abs=1e-10)


def test_ssim_examples():
    rng = np.random.default_rng(4)
    img = rng.random((24, 24))
    assert ssim(img, img) == pytest.approx(1.0)
    assert ssim(img, 1 - img) < 0.5
    c = np.full((16, 16), 0.3)
    assert ssim(c, c) == pytest.approx(1.0)
    x = np.clip(img + 0.05, 0, 1)
    assert ssim(img, x) == pytest.approx(ssim(x, img), abs=1e-12)


def test_ssim_uses_luma_of_yuv_frames():
    rng = np.random.default_rng(6)
    y = rng.random((16, 16, 3))
    z = y.copy()
    z[..., 1:] = 0.0  # chroma ignored
    assert ssim(Frame(y), Frame(z)) == pytest.approx(1.0)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_yuv_examples():
    black = Frame(np.zeros((1, 1, 3)), "RGB")
    np.testing.assert_allclose(yuv_from_rgb(black).data, 0.0, atol=1e-15)
    white = yuv_from_rgb(Frame(np.ones((1, 1, 3)), "RGB")).data[0, 0]
    np.testing.assert_allclose(white, [1.0, 0.0, 0.0], atol=1e-12)


def test_yuv_round_trip():
    f = Frame(np.random.default_rng(7).random((9, 11, 3)), "RGB")
    back = rgb_from_yuv(yuv_from_rgb(f))
    assert back.colorspace == "RGB"
    np.testing.assert_allclose(back.data, f.data, atol=1e-5)


def test_yuv_wrong_channels():
    with pytest.raises(ValueError):
        yuv_from_rgb(Frame(np.zeros((2, 2, 1)), "RGB"))


def test_frame_rejects_nonfinite():
    with pytest.raises(ValueError):
        Frame(np.array([[[np.nan]]]))
