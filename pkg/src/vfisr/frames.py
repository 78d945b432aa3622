"""Frame container, colour conversion, bicubic resampling and quality metrics.

All pixel math is float in [0, 1]; 8-bit quantization happens only in
:mod:`vfisr.videoio`.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Union

import numpy as np
import torch
from scipy import signal

PSNR_CAP = 100.0

# BT.709 full-range analog RGB -> YUV (U, V signed, centred on 0).
_KR, _KB = 0.2126, 0.0722
_KG = 1.0 - _KR - _KB
RGB_TO_YUV = np.array(
    [
        [_KR, _KG, _KB],
        [-_KR / (2 * (1 - _KB)), -_KG / (2 * (1 - _KB)), 0.5],
        [0.5, -_KG / (2 * (1 - _KR)), -_KB / (2 * (1 - _KR))],
    ]
)
YUV_TO_RGB = np.linalg.inv(RGB_TO_YUV)

Scale = Union[Fraction, float, int]


@dataclass(frozen=True)
class Frame:
    """A single H x W x C image with values nominally in [0, 1]."""

    data: np.ndarray
    colorspace: str = "YUV"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"frame must be HxWxC with C in {{1,3}}, got {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("frame must be at least 1x1")
        if not np.all(np.isfinite(data)):
            raise ValueError("frame contains non-finite values")
        if self.colorspace not in ("YUV", "RGB"):
            raise ValueError(f"unknown colorspace {self.colorspace!r}")
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def luma(self) -> np.ndarray:
        """Y channel as an H x W array."""
        if self.data.shape[2] == 1:
            return self.data[..., 0]
        if self.colorspace == "YUV":
            return self.data[..., 0]
        return self.data @ RGB_TO_YUV[0]


def yuv_from_rgb(frame: Frame) -> Frame:
    if frame.data.shape[2] != 3:
        raise ValueError("colour conversion needs a 3-channel frame")
    if frame.colorspace != "RGB":
        raise ValueError(f"expected an RGB frame, got {frame.colorspace}")
    return Frame(frame.data @ RGB_TO_YUV.T, "YUV")


def rgb_from_yuv(frame: Frame) -> Frame:
    if frame.data.shape[2] != 3:
        raise ValueError("colour conversion needs a 3-channel frame")
    if frame.colorspace != "YUV":
        raise ValueError(f"expected a YUV frame, got {frame.colorspace}")
    return Frame(frame.data @ YUV_TO_RGB.T, "RGB")


# ---------------------------------------------------------------------------
# Bicubic resampling
# ---------------------------------------------------------------------------

def cubic_kernel(x, a: float = -0.5):
    """Keys cubic convolution kernel; a = -0.5 is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def output_size(n: int, scale: Scale) -> int:
    out = int(round(n * Fraction(scale).limit_denominator(1 << 16)))
    if out < 1:
        raise ValueError(f"resize of {n} by {scale} gives non-positive size")
    return out


@lru_cache(maxsize=256)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) matrix of a 1-D bicubic resize.

    Pixel-centre aligned; the kernel is widened by the inverse scale when
    shrinking (antialiasing) and taps beyond the edge are mirrored.
    Rows sum to one.
    """
    scale = n_out / n_in
    stretch = min(scale, 1.0)
    support = 2.0 / stretch
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        centre = (i + 0.5) / scale - 0.5
        first = int(np.floor(centre - support))
        taps = np.arange(first, int(np.ceil(centre + support)) + 1)
        w = stretch * cubic_kernel(stretch * (centre - taps))
        # symmetric boundary: -1 -> 0, n -> n-1
        idx = taps.copy()
        period = 2 * n_in
        idx = np.mod(idx, period)
        idx = np.where(idx >= n_in, period - 1 - idx, idx)
        np.add.at(weights[i], idx, w)
        weights[i] /= weights[i].sum()
    weights.setflags(write=False)
    return weights


def resize_array(arr: np.ndarray, out_hw) -> np.ndarray:
    """Resize an (..., H, W, C) array to ``out_hw`` spatial dims."""
    h, w = arr.shape[-3], arr.shape[-2]
    mh = resize_matrix(h, out_hw[0])
    mw = resize_matrix(w, out_hw[1])
    out = np.einsum("oh,...hwc->...owc", mh, arr)
    return np.einsum("pw,...owc->...opc", mw, out)


def resize_tensor(t: torch.Tensor, out_hw) -> torch.Tensor:
    """Resize an (..., C, H, W) tensor; differentiable and dtype preserving."""
    h, w = t.shape[-2], t.shape[-1]
    mh = torch.tensor(resize_matrix(h, out_hw[0]), dtype=t.dtype, device=t.device)
    mw = torch.tensor(resize_matrix(w, out_hw[1]), dtype=t.dtype, device=t.device)
    return mh @ t @ mw.T


def bicubic_resize(frame: Frame, scale: Scale) -> Frame:
    if Fraction(scale) <= 0:
        raise ValueError("scale must be positive")
    out_hw = (output_size(frame.height, scale), output_size(frame.width, scale))
    if out_hw == (frame.height, frame.width):
        return Frame(frame.data.copy(), frame.colorspace)
    return Frame(resize_array(frame.data, out_hw), frame.colorspace)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Frame) else np.asarray(x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB over all channels jointly, capped at ``PSNR_CAP``."""
    if isinstance(a, Frame) and isinstance(b, Frame) and a.colorspace != b.colorspace:
        raise ValueError("colorspace mismatch")
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


@lru_cache(maxsize=4)
def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    win = np.outer(g, g)
    win /= win.sum()
    win.setflags(write=False)
    return win


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean single-scale SSIM of the luma planes (11x11 Gaussian, sigma 1.5).

    Only fully-contained windows are used, as in the reference
    implementation of Wang et al.
    """
    x = a.luma() if isinstance(a, Frame) else np.asarray(a, dtype=np.float64)
    y = b.luma() if isinstance(b, Frame) else np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    win = gaussian_window()
    if x.shape[0] < win.shape[0] or x.shape[1] < win.shape[1]:
        raise ValueError("frame smaller than the 11x11 SSIM window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def filt(img):
        return signal.correlate2d(img, win, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    psnr_vfisr: float
    psnr_sr: float
    ssim_vfisr: float
    ssim_sr: float
    frame_count: int
    vfisr_count: int = 0
    sr_count: int = 0

    def to_dict(self) -> dict:
        return {
            "psnr_vfisr": self.psnr_vfisr,
            "psnr_sr": self.psnr_sr,
            "ssim_vfisr": self.ssim_vfisr,
            "ssim_sr": self.ssim_sr,
            "frame_count": self.frame_count,
            "vfisr_count": self.vfisr_count,
            "sr_count": self.sr_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)
