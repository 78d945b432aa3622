"""Cascaded VFI + SR baselines built from bicubic upscaling and flow-warp averaging."""

from __future__ import annotations

from typing import Dict, Sequence

import numpy as np

from .flowwarp import BlockMatchingFlow, approximate_half_flows, backward_warp, window_flows
from .frames import MetricsReport, resize_array
from .windowing import TrainingSample, WindowPrediction, stride1_windows

ORDERS = ("sr_then_vfi", "vfi_then_sr")


def upscale(frame: np.ndarray, method: str = "bicubic") -> np.ndarray:
    h, w = frame.shape[:2]
    if method == "bicubic":
        return resize_array(frame, (2 * h, 2 * w))
    if method == "nearest":
        return np.repeat(np.repeat(frame, 2, axis=0), 2, axis=1)
    raise ValueError(f"unknown upscaling method {method!r}")


def interpolate_pair(window, frames, provider):
    """Warp-and-average estimates of the frames half a step either side of the centre."""
    h_m0, h_mm, h_pp, h_p0 = approximate_half_flows(*window_flows(window, frames, provider))
    xa, xc, xb = frames
    before = 0.5 * (backward_warp(xc, h_m0) + backward_warp(xa, h_mm))
    after = 0.5 * (backward_warp(xb, h_pp) + backward_warp(xc, h_p0))
    return before, after


def cascade_window(window, lr_frames, order: str, provider_lr, provider_hr, method="bicubic") -> np.ndarray:
    """(3, H, W, C) prediction of one window by a cascade of VFI and SR."""
    xc = lr_frames[1]
    if order == "sr_then_vfi":
        hr = [upscale(f, method) for f in lr_frames]
        before, after = interpolate_pair(window, hr, provider_hr)
        centre = hr[1]
    elif order == "vfi_then_sr":
        before, after = interpolate_pair(window, lr_frames, provider_lr)
        before, after = upscale(before, method), upscale(after, method)
        centre = upscale(xc, method)
    else:
        raise ValueError(f"unknown cascade order {order!r}")
    return np.stack([before, centre, after])


def cascade_predictions(
    sample: TrainingSample, order: str, block: int = 8, search: int = 6, method: str = "bicubic"
):
    """Stride-1 window predictions for one sample.  HR matching doubles block and search."""
    p_lr = BlockMatchingFlow(block, search)
    p_hr = BlockMatchingFlow(2 * block, 2 * search)
    out = []
    for win in stride1_windows():
        frames = [sample.lr_at(t) for t in win.input_times]
        out.append(WindowPrediction(win, cascade_window(win, frames, order, p_lr, p_hr, method)))
    return out


def evaluate_baselines(
    samples: Sequence[TrainingSample], block: int = 8, search: int = 6, methods=("bicubic",)
) -> Dict[str, MetricsReport]:
    from .trainer import evaluate_samples

    reports = {}
    for method in methods:
        for order in ORDERS:
            key = order if method == "bicubic" else f"{order}_{method}"
            reports[key] = evaluate_samples(
                lambda n: cascade_predictions(samples[n], order, block, search, method), samples
            )
    return reports


def best_cascade(reports: Dict[str, MetricsReport]) -> str:
    return max(ORDERS, key=lambda k: reports[k].psnr_vfisr)
