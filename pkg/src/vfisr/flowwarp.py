"""Optical-flow providers, linear-motion half flows, backward warping and the
stacked network input.

Flow convention: ``f_{a->b}(x)`` is the displacement (dx, dy) in pixels that
takes the content at ``x`` in frame ``a`` to its location in frame ``b``.
Backward warping of frame ``b`` with ``f_{a->b}`` therefore approximates
frame ``a``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .frames import Frame
from .windowing import Window

N_FRAME_CH = 9
N_FLOW_CH = 8
N_WARP_CH = 12


class StackVariant(str, Enum):
    """Which motion cues are stacked with the three input frames."""

    FRAMES = "frames"  # 9 channels
    FLOW = "flow"  # frames + half flows, 17 channels
    FULL = "full"  # frames + half flows + warped frames, 29 channels

    @property
    def channels(self) -> int:
        return {"frames": 9, "flow": 17, "full": 29}[self.value]


@dataclass(frozen=True)
class FlowField:
    data: np.ndarray  # (H, W, 2), x then y
    from_time: Optional[int] = None
    to_time: Optional[int] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 2:
            raise ValueError(f"flow must be HxWx2, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("flow contains non-finite values")
        object.__setattr__(self, "data", data)

    def scaled(self, factor: float, from_time=None, to_time=None) -> "FlowField":
        return FlowField(self.data * factor, from_time, to_time)


class ZeroFlow:
    kind = "zero"

    def __call__(self, src: np.ndarray, dst: np.ndarray, src_time=None, dst_time=None):
        return np.zeros(src.shape[:2] + (2,))


class BlockMatchingFlow:
    """Exhaustive integer block matching by sum of absolute differences.

    Every block gets the displacement minimising SAD within +-``search``;
    ties go to the smaller displacement, then to the lexicographically
    smaller (dx, dy).  Samples beyond the border are edge-clamped.
    """

    kind = "block_matching"

    def __init__(self, block: int = 8, search: int = 6):
        if block < 4 or search < 1:
            raise ValueError("block matching needs block >= 4 and search >= 1")
        self.block = block
        self.search = search
        cands = [(dx, dy) for dx in range(-search, search + 1) for dy in range(-search, search + 1)]
        self._candidates = sorted(cands, key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))

    def __call__(self, src: np.ndarray, dst: np.ndarray, src_time=None, dst_time=None):
        h, w = src.shape
        b, s = self.block, self.search
        nby, nbx = -(-h // b), -(-w // b)
        padded = np.pad(dst, s, mode="edge")
        best = np.full((nby, nbx), np.inf)
        best_d = np.zeros((nby, nbx, 2))
        for dx, dy in self._candidates:
            shifted = padded[s + dy : s + dy + h, s + dx : s + dx + w]
            diff = np.zeros((nby * b, nbx * b))
            diff[:h, :w] = np.abs(src - shifted)
            sad = diff.reshape(nby, b, nbx, b).sum(axis=(1, 3))
            better = sad < best
            best[better] = sad[better]
            best_d[better] = (dx, dy)
        flow = np.repeat(np.repeat(best_d, b, axis=0), b, axis=1)
        return flow[:h, :w]


class OracleFlow:
    """Exact flow from a generator; ``fn(src_time, dst_time)`` -> (H, W, 2)."""

    kind = "oracle"

    def __init__(self, fn: Callable[[int, int], np.ndarray]):
        self.fn = fn

    def __call__(self, src: np.ndarray, dst: np.ndarray, src_time=None, dst_time=None):
        if src_time is None or dst_time is None:
            raise ValueError("oracle flow needs both time stamps")
        return np.asarray(self.fn(src_time, dst_time), dtype=np.float64)


def make_provider(kind: str, block: int = 8, search: int = 6, oracle=None):
    if kind == "zero":
        return ZeroFlow()
    if kind == "block_matching":
        return BlockMatchingFlow(block, search)
    if kind == "oracle":
        if oracle is None:
            raise ValueError("oracle provider needs a flow function")
        return OracleFlow(oracle)
    raise ValueError(f"unknown flow provider {kind!r}")


def _luma(x) -> np.ndarray:
    arr = x.data if isinstance(x, Frame) else np.asarray(x, dtype=np.float64)
    return arr[..., 0] if arr.ndim == 3 else arr


def estimate_flow(provider, src, dst, src_time=None, dst_time=None) -> FlowField:
    ys, yd = _luma(src), _luma(dst)
    if ys.shape != yd.shape:
        raise ValueError(f"frame dims differ: {ys.shape} vs {yd.shape}")
    data = provider(ys, yd, src_time, dst_time)
    if data.shape != ys.shape + (2,):
        raise ValueError("provider returned a flow of the wrong size")
    return FlowField(data, src_time, dst_time)


def approximate_half_flows(f_m0: FlowField, f_0m: FlowField, f_0p: FlowField, f_p0: FlowField):
    """Halve the four full-step flows under the linear-motion assumption.

    Inputs are ``f_{-1->0}, f_{0->-1}, f_{0->+1}, f_{+1->0}`` (window-relative);
    outputs are ``f_{-1/2->0}, f_{-1/2->-1}, f_{+1/2->+1}, f_{+1/2->0}``.
    """
    shapes = {f.data.shape for f in (f_m0, f_0m, f_0p, f_p0)}
    if len(shapes) != 1:
        raise ValueError("flow dims differ")
    a, c = f_m0.from_time, f_m0.to_time
    b = f_0p.to_time
    tagged = None not in (a, b, c)
    if tagged:
        ok = (
            (f_0m.from_time, f_0m.to_time) == (c, a)
            and f_0p.from_time == c
            and (f_p0.from_time, f_p0.to_time) == (b, c)
            and a < c < b
            and c - a == b - c
            and (c - a) % 2 == 0
        )
        if not ok:
            raise ValueError("flows are not tagged f_{-1->0}, f_{0->-1}, f_{0->+1}, f_{+1->0}")
        ma, mb = (a + c) // 2, (c + b) // 2
    else:
        ma = mb = None
    return (
        f_m0.scaled(0.5, ma, c),
        f_0m.scaled(0.5, ma, a if tagged else None),
        f_0p.scaled(0.5, mb, b if tagged else None),
        f_p0.scaled(0.5, mb, c),
    )


def backward_warp(frame, flow) -> np.ndarray:
    """Bilinear backward warp: ``out(x) = frame(x + flow(x))``, edge-clamped."""
    img = frame.data if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)
    fl = flow.data if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    if fl.shape != (h, w, 2):
        raise ValueError(f"flow {fl.shape} does not match frame {img.shape[:2]}")
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = np.clip(gx + fl[..., 0], 0, w - 1)
    sy = np.clip(gy + fl[..., 1], 0, h - 1)
    x0 = np.minimum(np.floor(sx).astype(int), w - 2) if w > 1 else np.zeros_like(sx, dtype=int)
    y0 = np.minimum(np.floor(sy).astype(int), h - 2) if h > 1 else np.zeros_like(sy, dtype=int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (sx - x0)[..., None]
    ay = (sy - y0)[..., None]
    out = (
        img[y0, x0] * (1 - ax) * (1 - ay)
        + img[y0, x1] * ax * (1 - ay)
        + img[y1, x0] * (1 - ax) * ay
        + img[y1, x1] * ax * ay
    )
    return out[..., 0] if squeeze else out


def window_flows(window: Window, lr_frames: Sequence[np.ndarray], provider):
    """The four full-step flows between a window's end frames and its centre."""
    ta, tc, tb = window.input_times
    xa, xc, xb = lr_frames
    return (
        estimate_flow(provider, xa, xc, ta, tc),
        estimate_flow(provider, xc, xa, tc, ta),
        estimate_flow(provider, xc, xb, tc, tb),
        estimate_flow(provider, xb, xc, tb, tc),
    )


def assemble_input_stack(
    window: Window,
    lr_frames: Sequence[np.ndarray],
    provider=None,
    variant: StackVariant = StackVariant.FULL,
) -> np.ndarray:
    """Channel-first (C, h, w) network input for one window.

    Channel order: the three frames (9), the half flows
    ``f_{-1/2->0}, f_{-1/2->-1}, f_{+1/2->+1}, f_{+1/2->0}`` as (dx, dy) pairs (8),
    then the frames warped by those flows (12).
    """
    variant = StackVariant(variant)
    frames = [np.asarray(f.data if isinstance(f, Frame) else f, dtype=np.float64) for f in lr_frames]
    if len(frames) != 3:
        raise ValueError("a window has exactly 3 input frames")
    if len({f.shape for f in frames}) != 1:
        raise ValueError("input frame dims differ")
    parts = list(frames)
    if variant is not StackVariant.FRAMES:
        halves = approximate_half_flows(*window_flows(window, frames, provider or ZeroFlow()))
        parts += [h.data for h in halves]
        if variant is StackVariant.FULL:
            xa, xc, xb = frames
            sources = (xc, xa, xb, xc)
            parts += [backward_warp(src, h) for src, h in zip(sources, halves)]
    stack = np.concatenate(parts, axis=-1)
    return np.ascontiguousarray(stack.transpose(2, 0, 1))
