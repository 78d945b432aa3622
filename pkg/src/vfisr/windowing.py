"""Training-sample construction, temporal windows and sliding-window stitching.

Time is measured in integer half-steps: one unit is half the input frame
interval, so the input frames of a training sample sit at -4, -2, 0, 2, 4 and
the ground truth at -3 .. 3.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .frames import Frame, MetricsReport, psnr, resize_array, ssim

LR_TIMES: Tuple[int, ...] = (-4, -2, 0, 2, 4)
HR_TIMES: Tuple[int, ...] = (-3, -2, -1, 0, 1, 2, 3)


class MissingCoverageError(ValueError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"no prediction covers half-steps {self.missing}")


class StitchPolicy(str, Enum):
    LATER = "later"
    EARLIER = "earlier"
    AVERAGE = "average"


@dataclass(frozen=True)
class Window:
    """Three input times mapped to three output times.

    Inputs sit at ``centre + {-2, 0, 2} * stride`` and outputs at
    ``centre + {-1, 0, 1} * stride`` (all in half-steps).
    """

    stride: int
    centre: int = 0
    index: Optional[int] = None

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def input_times(self) -> Tuple[int, int, int]:
        s = 2 * self.stride
        return (self.centre - s, self.centre, self.centre + s)

    @property
    def output_times(self) -> Tuple[int, int, int]:
        s = self.stride
        return (self.centre - s, self.centre, self.centre + s)


@dataclass
class TrainingSample:
    """Five LR inputs plus seven HR targets, stacked as (T, H, W, C) arrays."""

    lr: np.ndarray
    hr: np.ndarray
    sample_id: str = ""

    def __post_init__(self):
        if self.lr.shape[0] != 5 or self.hr.shape[0] != 7:
            raise ValueError("a training sample needs 5 LR and 7 HR frames")
        lh, lw = self.lr.shape[1:3]
        hh, hw = self.hr.shape[1:3]
        if (hh, hw) != (2 * lh, 2 * lw):
            raise ValueError("HR frames must be exactly twice the LR size")

    def lr_at(self, half_step: int) -> np.ndarray:
        return self.lr[LR_TIMES.index(half_step)]

    def hr_at(self, half_step: int) -> np.ndarray:
        return self.hr[HR_TIMES.index(half_step)]

    def lr_frame(self, half_step: int) -> Frame:
        return Frame(self.lr_at(half_step), "YUV")

    def hr_frame(self, half_step: int) -> Frame:
        return Frame(self.hr_at(half_step), "YUV")


@dataclass
class WindowPrediction:
    window: Window
    frames: np.ndarray  # (3, H, W, C), ordered like window.output_times

    def __post_init__(self):
        if len(self.frames) != 3:
            raise ValueError("a window prediction holds exactly 3 frames")

    def items(self):
        return zip(self.window.output_times, self.frames)


def build_training_sample(
    hr_frames: Sequence,
    crop: Optional[Tuple[int, int, int, int]] = None,
    seed: int = 0,
    sample_id: str = "",
) -> TrainingSample:
    """Cut one training sample from 9 consecutive HR frames.

    ``crop`` is ``(top, left, height, width)``; ``None`` keeps the full frame.
    Frames 2..8 become the HR targets, the odd-positioned frames 1, 3, .., 9
    are bicubic-halved into the LR inputs.  ``seed`` is accepted for
    interface symmetry; the construction itself is deterministic.
    """
    del seed
    if len(hr_frames) != 9:
        raise ValueError(f"need exactly 9 frames, got {len(hr_frames)}")
    arrs = [f.data if isinstance(f, Frame) else np.asarray(f, dtype=np.float64) for f in hr_frames]
    if any(a.ndim == 2 for a in arrs):
        arrs = [a[..., None] if a.ndim == 2 else a for a in arrs]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ValueError("all 9 frames must share one shape")
    stack = np.stack(arrs)
    if crop is not None:
        top, left, ch, cw = crop
        if ch % 2 or cw % 2 or ch < 8 or cw < 8:
            raise ValueError("crop dims must be even and at least 8")
        if top < 0 or left < 0 or top + ch > shape[0] or left + cw > shape[1]:
            raise ValueError(f"crop {crop} outside {shape[:2]} frame")
        stack = stack[:, top : top + ch, left : left + cw]
    h, w = stack.shape[1:3]
    if h % 2 or w % 2:
        raise ValueError("HR frame dims must be even")
    hr = stack[1:8].copy()
    lr = resize_array(stack[0::2], (h // 2, w // 2))
    return TrainingSample(lr=lr, hr=hr, sample_id=sample_id)


def stride1_windows(sample: Optional[TrainingSample] = None) -> Tuple[Window, Window, Window]:
    """Windows w = 1, 2, 3 centred at half-steps -2, 0, +2."""
    return tuple(Window(stride=1, centre=2 * w - 4, index=w) for w in (1, 2, 3))


def stride2_window(sample: Optional[TrainingSample] = None) -> Window:
    return Window(stride=2, centre=0)


def sliding_windows(n_inputs: int) -> list:
    """Per-frame sliding windows over a video of ``n_inputs`` LR frames.

    Input frame k lives at half-step 2k; window j is centred on frame j + 1.
    """
    if n_inputs < 3:
        raise ValueError("need at least 3 input frames")
    return [Window(stride=1, centre=2 * (j + 1), index=j + 1) for j in range(n_inputs - 2)]


def stitch(
    predictions: Sequence[WindowPrediction],
    policy: StitchPolicy = StitchPolicy.LATER,
    return_sources: bool = False,
):
    """Merge window predictions into one timeline at half-step spacing.

    Overlapping instants keep the later window's frame by default.  Returns
    ``(times, frames)`` and, optionally, the index of the source prediction
    for each output time (``-1`` marks an averaged frame).
    """
    policy = StitchPolicy(policy)
    if not predictions:
        raise ValueError("nothing to stitch")
    chosen: Dict[int, list] = {}
    for i, pred in enumerate(predictions):
        for t, frame in pred.items():
            chosen.setdefault(t, []).append((i, frame))
    times = sorted(chosen)
    missing = set(range(times[0], times[-1] + 1)) - set(times)
    if missing:
        raise MissingCoverageError(missing)
    frames, sources = [], []
    for t in times:
        cands = chosen[t]
        if policy is StitchPolicy.LATER:
            src, frame = cands[-1]
        elif policy is StitchPolicy.EARLIER:
            src, frame = cands[0]
        else:
            src = cands[0][0] if len(cands) == 1 else -1
            frame = np.mean([c[1] for c in cands], axis=0)
        frames.append(frame)
        sources.append(src)
    if return_sources:
        return times, frames, sources
    return times, frames


def frame_role(window: Window, position: int) -> str:
    """'sr' for the middle output of a window, 'vfisr' for the two ends."""
    return "sr" if position == 1 else "vfisr"


def evaluate_predictions(
    predictions: Sequence[WindowPrediction],
    truths: Mapping[int, np.ndarray],
    per_frame: Optional[list] = None,
) -> MetricsReport:
    """Average PSNR/SSIM separately over VFI-SR (window ends) and SR frames.

    Every predicted frame is scored on its own, so an instant predicted by
    two windows counts twice.  ``truths`` maps half-steps to HR frames.
    """
    scores = {"vfisr": ([], []), "sr": ([], [])}
    for k, pred in enumerate(predictions):
        for pos, (t, frame) in enumerate(pred.items()):
            if t not in truths:
                raise ValueError(f"no ground truth at half-step {t}")
            gt = np.asarray(truths[t])
            if gt.shape != np.shape(frame):
                raise ValueError(f"shape mismatch at half-step {t}")
            role = frame_role(pred.window, pos)
            p, s = psnr(frame, gt), ssim(_luma(frame), _luma(gt))
            scores[role][0].append(p)
            scores[role][1].append(s)
            if per_frame is not None:
                per_frame.append({"window": k, "time": t, "role": role, "psnr": p, "ssim": s})
    n_vs, n_s = len(scores["vfisr"][0]), len(scores["sr"][0])
    if n_vs + n_s == 0:
        raise ValueError("no predictions to evaluate")

    def avg(xs):
        return float(np.mean(xs)) if xs else float("nan")

    return MetricsReport(
        psnr_vfisr=avg(scores["vfisr"][0]),
        psnr_sr=avg(scores["sr"][0]),
        ssim_vfisr=avg(scores["vfisr"][1]),
        ssim_sr=avg(scores["sr"][1]),
        frame_count=n_vs + n_s,
        vfisr_count=n_vs,
        sr_count=n_s,
    )


def _luma(arr) -> np.ndarray:
    arr = np.asarray(arr)
    return arr[..., 0] if arr.ndim == 3 else arr
