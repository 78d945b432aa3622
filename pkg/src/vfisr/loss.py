"""Temporal loss over one training sample's four window predictions, and its
multi-scale aggregate.

Each ``||.||`` below is the root of the mean squared elementwise difference,
taken per sample over (C, H, W) and then averaged over the batch.  Times are
half-steps (see :mod:`vfisr.windowing`).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, FrozenSet, Iterable, Mapping, Optional, Union

import torch

TERMS = ("R1", "TM1", "TMM", "TD1", "R2", "TM2", "TD2")

# Columns (a)-(f) of the temporal-loss ablation: each adds terms to the previous.
TABLE1_MASKS: Dict[str, FrozenSet[str]] = {
    "a": frozenset({"R1"}),
    "b": frozenset({"R1", "TM1"}),
    "c": frozenset({"R1", "TM1", "TMM"}),
    "d": frozenset({"R1", "TM1", "TMM", "TD1"}),
    "e": frozenset({"R1", "TM1", "TMM", "TD1", "R2", "TD2"}),
    "f": frozenset(TERMS),
}


def parse_mask(mask: Union[None, str, Iterable[str]]) -> FrozenSet[str]:
    """Accepts a column letter a-f, ``"all"``, or term names (list or comma string)."""
    if mask is None:
        return frozenset(TERMS)
    if isinstance(mask, str):
        key = mask.strip()
        if key in TABLE1_MASKS:
            return TABLE1_MASKS[key]
        if key == "all":
            return frozenset(TERMS)
        mask = [m.strip() for m in key.split(",") if m.strip()]
    terms = frozenset(mask)
    unknown = terms - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    return terms


def mask_name(mask: FrozenSet[str]) -> str:
    for name, m in TABLE1_MASKS.items():
        if m == mask:
            return name
    return ",".join(t for t in TERMS if t in mask)


@dataclass(frozen=True)
class LossWeights:
    lambda_R: float = 1.0
    lambda_TM1: float = 1.0
    lambda_TMM: float = 1.0
    lambda_TD: float = 0.1
    lambda_sq: float = 1.0
    lambda_TM2: float = 0.1
    level_weights: tuple = (4.0, 2.0, 1.0)

    def __post_init__(self):
        vals = [v for k, v in asdict(self).items() if k != "level_weights"] + list(self.level_weights)
        if len(self.level_weights) != 3:
            raise ValueError("need one weight per scale level")
        for v in vals:
            if not (v >= 0 and v != float("inf")):
                raise ValueError(f"loss weights must be finite and non-negative, got {v}")
        object.__setattr__(self, "level_weights", tuple(float(v) for v in self.level_weights))

    def term_weights(self) -> Dict[str, float]:
        s = self.lambda_sq
        return {
            "R1": self.lambda_R,
            "TM1": self.lambda_TM1,
            "TMM": self.lambda_TMM,
            "TD1": self.lambda_TD,
            "R2": s * self.lambda_R,
            "TM2": s * self.lambda_TM2,
            "TD2": s * self.lambda_TD,
        }

    def scaled(self, c: float) -> "LossWeights":
        """Every per-term weight times ``c``; lambda_sq and level weights kept."""
        d = asdict(self)
        for k in ("lambda_R", "lambda_TM1", "lambda_TMM", "lambda_TD", "lambda_TM2"):
            d[k] *= c
        return LossWeights(**d)


@dataclass
class PredictionSet:
    """Predictions of the four windows of a batch of training samples.

    ``stride1[w - 1]`` and ``stride2`` are (B, 3, C, H, W) tensors ordered by
    output time; ``truths`` is (B, 7, C, H, W) for half-steps -3 .. 3.
    """

    stride1: list
    stride2: torch.Tensor
    truths: torch.Tensor

    def __post_init__(self):
        if len(self.stride1) != 3:
            raise ValueError("need predictions for the three stride-1 windows")
        shape = self.truths.shape
        if len(shape) != 5 or shape[1] != 7:
            raise ValueError(f"truths must be (B, 7, C, H, W), got {tuple(shape)}")
        for p in list(self.stride1) + [self.stride2]:
            if p.shape[0] != shape[0] or p.shape[1] != 3 or p.shape[2:] != shape[2:]:
                raise ValueError("prediction and ground-truth dims differ")

    def p1(self, w: int, t: int) -> torch.Tensor:
        centre = 2 * w - 4
        k = t - centre + 1
        if not 0 <= k <= 2:
            raise IndexError(f"window {w} does not predict half-step {t}")
        return self.stride1[w - 1][:, k]

    def p2(self, t: int) -> torch.Tensor:
        if t not in (-2, 0, 2):
            raise IndexError(f"stride-2 window does not predict half-step {t}")
        return self.stride2[:, t // 2 + 1]

    def y(self, t: int) -> torch.Tensor:
        return self.truths[:, t + 3]


def rms(x: torch.Tensor) -> torch.Tensor:
    """Per-sample root-mean-square, averaged over the batch.

    The gradient at an exactly-zero residual is defined as 0 instead of NaN.
    """
    ms = x.pow(2).flatten(1).mean(dim=1)
    zero = ms == 0  # NaN compares unequal, so it still propagates
    root = torch.where(zero, torch.zeros_like(ms), torch.sqrt(torch.where(zero, torch.ones_like(ms), ms)))
    return root.mean()


def temporal_matching_s1(p: PredictionSet) -> torch.Tensor:
    return rms(p.p1(1, -1) - p.p1(2, -1)) + rms(p.p1(2, 1) - p.p1(3, 1))


def temporal_matching_s2(p: PredictionSet) -> torch.Tensor:
    return rms(p.p2(-2) - p.p1(1, -2)) + rms(p.p2(0) - p.p1(2, 0)) + rms(p.p2(2) - p.p1(3, 2))


def temporal_matching_mean(p: PredictionSet) -> torch.Tensor:
    return rms(0.5 * (p.p1(1, -1) + p.p1(2, -1)) - p.y(-1)) + rms(
        0.5 * (p.p1(2, 1) + p.p1(3, 1)) - p.y(1)
    )


def temporal_difference_s1(p: PredictionSet) -> torch.Tensor:
    total = 0
    for w in (1, 2, 3):
        for s in (0, 1):
            a, b = 2 * w + s - 5, 2 * w + s - 4
            total = total + rms((p.p1(w, a) - p.p1(w, b)) - (p.y(a) - p.y(b)))
    return total


def temporal_difference_s2(p: PredictionSet) -> torch.Tensor:
    return rms((p.p2(-2) - p.p2(0)) - (p.y(-2) - p.y(0))) + rms(
        (p.p2(0) - p.p2(2)) - (p.y(0) - p.y(2))
    )


def reconstruction_s1(p: PredictionSet) -> torch.Tensor:
    total = 0
    for w in (1, 2, 3):
        for s in (0, 1, 2):
            t = 2 * w + s - 5
            total = total + rms(p.p1(w, t) - p.y(t))
    return total


def reconstruction_s2(p: PredictionSet) -> torch.Tensor:
    total = 0
    for s in (0, 1, 2):
        t = 2 * (s - 1)
        total = total + rms(p.p2(t) - p.y(t))
    return total


TERM_FUNCS = {
    "R1": reconstruction_s1,
    "TM1": temporal_matching_s1,
    "TMM": temporal_matching_mean,
    "TD1": temporal_difference_s1,
    "R2": reconstruction_s2,
    "TM2": temporal_matching_s2,
    "TD2": temporal_difference_s2,
}


@dataclass
class LossBreakdown:
    """Per-level term values (tensors) and the weighted total."""

    levels: Dict[int, Dict[str, torch.Tensor]] = field(default_factory=dict)
    level_totals: Dict[int, torch.Tensor] = field(default_factory=dict)
    total: Optional[torch.Tensor] = None

    def record(self) -> dict:
        rec = {}
        for lvl, terms in self.levels.items():
            for name, v in terms.items():
                rec[f"L{lvl}_{name}"] = float(v.detach())
            rec[f"L{lvl}_total"] = float(self.level_totals[lvl].detach())
        rec["total"] = float(self.total.detach())
        return rec


def total_loss(
    p: PredictionSet,
    weights: LossWeights = LossWeights(),
    mask=None,
    level: int = 3,
) -> LossBreakdown:
    """Weighted sum of the unmasked terms; masked terms are reported as 0."""
    mask = parse_mask(mask)
    tw = weights.term_weights()
    zero = p.truths.new_zeros(())
    terms, total = {}, zero
    for name in TERMS:
        if name in mask:
            v = TERM_FUNCS[name](p)
            total = total + tw[name] * v
        else:
            v = zero
        terms[name] = v
    return LossBreakdown(levels={level: terms}, level_totals={level: total}, total=total)


def multiscale_loss(
    per_level: Mapping[int, PredictionSet],
    weights: LossWeights = LossWeights(),
    mask=None,
) -> LossBreakdown:
    """``sum_l lambda_l * L_T^l`` over the levels present (keys 1..3)."""
    out = LossBreakdown()
    total = None
    for lvl in sorted(per_level):
        b = total_loss(per_level[lvl], weights, mask, level=lvl)
        out.levels[lvl] = b.levels[lvl]
        out.level_totals[lvl] = b.total
        contrib = weights.level_weights[lvl - 1] * b.total
        total = contrib if total is None else total + contrib
    out.total = total
    return out
