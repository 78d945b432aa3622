"""Training loop, evaluation helpers, gradient audit and ablation runner."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .flowwarp import StackVariant, assemble_input_stack, make_provider
from .frames import MetricsReport, resize_tensor
from .loss import LossWeights, PredictionSet, mask_name, multiscale_loss, parse_mask
from .network import (
    MultiScaleNet,
    NetworkConfig,
    build_network,
    build_pyramid,
    load_checkpoint,
    save_checkpoint,
    split_frames,
)
from .windowing import (
    HR_TIMES,
    StitchPolicy,
    TrainingSample,
    WindowPrediction,
    evaluate_predictions,
    stride1_windows,
    stride2_window,
)

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteLossError(RuntimeError):
    def __init__(self, batch_id, dump_path=None):
        self.batch_id = batch_id
        self.dump_path = dump_path
        msg = f"non-finite loss in batch {batch_id}"
        if dump_path:
            msg += f" (batch dumped to {dump_path})"
        super().__init__(msg)


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-4
    lr_drops: tuple = ()
    lr_drop_factor: float = 0.1
    batch_size: int = 4
    seed: int = 0
    mask: str = "f"
    stack: str = "full"
    multi_scale: bool = True
    base_channels: int = 16
    unet_depth: int = 3
    residual: bool = False
    zero_head: bool = False
    activation: str = "relu"
    flow_scale: float = 1.0 / 16
    dtype: str = "float32"
    flow: str = "block_matching"
    flow_block: int = 8
    flow_search: int = 6
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    stitch_policy: str = "later"
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.lr_drops = tuple(int(e) for e in self.lr_drops)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if list(self.lr_drops) != sorted(self.lr_drops) or any(not 1 <= e <= self.epochs for e in self.lr_drops):
            raise ValueError("lr_drops must be sorted epochs within [1, epochs]")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        parse_mask(self.mask)
        StackVariant(self.stack)
        StitchPolicy(self.stitch_policy)

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        """Full-scale schedule: 100 epochs, drops at 80 and 90, batch 8, c = 64."""
        base = dict(epochs=100, lr=1e-4, lr_drops=(80, 90), batch_size=8, base_channels=64)
        base.update(kw)
        return cls(**base)

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            base_channels=self.base_channels,
            input_channels=StackVariant(self.stack).channels,
            levels=3 if self.multi_scale else 1,
            unet_depth=self.unet_depth,
            residual=self.residual,
            zero_head=self.zero_head,
            activation=self.activation,
            flow_scale=self.flow_scale,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drops"] = list(self.lr_drops)
        d["adam_betas"] = list(self.adam_betas)
        d["weights"]["level_weights"] = list(self.weights.level_weights)
        return d

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``; each drop applies from its epoch on."""
    n = sum(1 for e in config.lr_drops if epoch >= e)
    return config.lr * config.lr_drop_factor**n


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    """Network inputs of all four windows and the HR truth pyramid.

    ``stacks`` is (N, 4, C, h, w) with windows w=1, w=2, w=3, stride 2;
    ``truths[l]`` is (N, 7, 3, H_l, W_l) for each level id ``l``.
    """

    stacks: torch.Tensor
    truths: Dict[int, torch.Tensor]
    sample_ids: List[str]

    def __len__(self):
        return self.stacks.shape[0]


def training_windows():
    return list(stride1_windows()) + [stride2_window()]


def prepare(
    samples: Sequence[TrainingSample],
    config: TrainConfig,
    providers: Optional[Sequence] = None,
) -> PreparedData:
    """Build the stacked inputs once per dataset; ``providers`` overrides the
    configured flow provider per sample (used for oracle flow)."""
    variant = StackVariant(config.stack)
    default = make_provider(config.flow, config.flow_block, config.flow_search) if providers is None else None
    stacks, truths = [], []
    for i, s in enumerate(samples):
        provider = providers[i] if providers is not None else default
        per_window = []
        for win in training_windows():
            frames = [s.lr_at(t) for t in win.input_times]
            per_window.append(assemble_input_stack(win, frames, provider, variant))
        stacks.append(np.stack(per_window))
        truths.append(s.hr.transpose(0, 3, 1, 2))
    dtype = config.torch_dtype
    hr = torch.tensor(np.stack(truths), dtype=dtype)
    h, w = hr.shape[-2:]
    levels = {3: hr}
    if config.multi_scale:
        levels[2] = resize_tensor(hr, (h // 2, w // 2))
        levels[1] = resize_tensor(hr, (h // 4, w // 4))
    return PreparedData(torch.tensor(np.stack(stacks), dtype=dtype), levels, [s.sample_id for s in samples])


def run_windows(model: MultiScaleNet, stacks: torch.Tensor) -> List[torch.Tensor]:
    """(B, K, C, h, w) stacks -> one (B, K, 3, 3, H_l, W_l) tensor per level."""
    b, k = stacks.shape[:2]
    flat = stacks.reshape(b * k, *stacks.shape[2:])
    outs = model(build_pyramid(flat, model.config.levels))
    return [split_frames(o).reshape(b, k, 3, 3, *o.shape[-2:]) for o in outs]


def batch_loss(model, data: PreparedData, idx, weights: LossWeights, mask):
    outs = run_windows(model, data.stacks[idx])
    per_level = {}
    for lvl, out in zip(model.level_ids, outs):
        per_level[lvl] = PredictionSet(
            stride1=[out[:, 0], out[:, 1], out[:, 2]], stride2=out[:, 3], truths=data.truths[lvl][idx]
        )
    return multiscale_loss(per_level, weights, mask)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: MultiScaleNet
    records: List[dict]
    steps: int
    batches: int


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches_for(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Per-epoch permutation split into batches; the last one may be short."""
    order = epoch_order(n, seed, epoch)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _make_optimizer(model, config: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.adam_betas, eps=config.adam_eps)


def train(
    config: TrainConfig,
    data: PreparedData,
    out_dir=None,
    resume=None,
    stop_after_epoch: Optional[int] = None,
    model: Optional[MultiScaleNet] = None,
) -> TrainResult:
    """Adam over mini-batches of training samples; one update per batch.

    With ``out_dir`` set, every step appends a JSON record to
    ``metrics.jsonl`` and ``checkpoint.pt`` is rewritten after each epoch.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(config.seed)
    mask = parse_mask(config.mask)
    dtype = config.torch_dtype
    start_epoch, step = 1, 0
    if resume is not None:
        model, payload = load_checkpoint(resume, dtype)
        opt = _make_optimizer(model, config)
        opt.load_state_dict(payload["optimizer"])
        start_epoch, step = payload["epoch"] + 1, payload["step"]
    else:
        model = model or build_network(config.network_config(), config.seed, dtype)
        opt = _make_optimizer(model, config)
    ncfg = model.config
    if ncfg.input_channels != data.stacks.shape[2]:
        raise ValueError(f"network expects {ncfg.input_channels} input channels, data has {data.stacks.shape[2]}")
    h, w = data.stacks.shape[-2:]
    div = ncfg.divisor if ncfg.levels == 3 else 2**ncfg.unet_depth
    if h % div or w % div:
        raise ValueError(f"LR patch {h}x{w} not divisible by {div}")

    out_path = Path(out_dir) if out_dir else None
    log_file = None
    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)
        log_file = open(out_path / "metrics.jsonl", "a" if resume else "w")
    records: List[dict] = []
    batches_seen = 0
    last_epoch = config.epochs if stop_after_epoch is None else min(stop_after_epoch, config.epochs)
    model.train()
    try:
        for epoch in range(start_epoch, last_epoch + 1):
            lr = lr_at(config, epoch)
            for g in opt.param_groups:
                g["lr"] = lr
            for bi, idx in enumerate(batches_for(len(data), config.batch_size, config.seed, epoch)):
                idx_t = torch.as_tensor(idx)
                batches_seen += 1
                breakdown = batch_loss(model, data, idx_t, config.weights, mask)
                if not torch.isfinite(breakdown.total):
                    dump = None
                    if out_path:
                        dump = out_path / f"nan_batch_e{epoch}_b{bi}.pt"
                        torch.save({"sample_ids": [data.sample_ids[i] for i in idx], "stacks": data.stacks[idx_t]}, dump)
                    raise NonFiniteLossError(f"epoch {epoch} batch {bi}", dump)
                opt.zero_grad()
                breakdown.total.backward()
                opt.step()
                step += 1
                rec = {"step": step, "epoch": epoch, "lr": lr}
                rec.update(breakdown.record())
                records.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
            if log_file:
                log_file.flush()
            log.info("epoch %d done, step %d, last total %.6f", epoch, step, records[-1]["total"])
            if out_path:
                save_checkpoint(
                    out_path / "checkpoint.pt",
                    model,
                    step,
                    epoch,
                    opt.state_dict(),
                    {"train_config": config.to_dict()},
                )
    finally:
        if log_file:
            log_file.close()
    if resume is None and batches_seen != step:
        raise AssertionError("optimizer steps and mini-batches diverged")
    return TrainResult(model, records, step, batches_seen)


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------

@torch.no_grad()
def predict_stacks(model: MultiScaleNet, stacks: torch.Tensor, chunk: int = 16) -> np.ndarray:
    """Final-level frames (N, K, 3, H, W, C) for (N, K, C, h, w) stacks."""
    model.eval()
    outs = []
    for i in range(0, stacks.shape[0], chunk):
        out = run_windows(model, stacks[i : i + chunk])[-1]
        outs.append(out.permute(0, 1, 2, 4, 5, 3).double().cpu().numpy())
    return np.concatenate(outs)


def window_predictions(preds: np.ndarray) -> List[List[WindowPrediction]]:
    """Wrap (N, 4, 3, H, W, C) predictions as stride-1 WindowPredictions per sample."""
    wins = stride1_windows()
    return [[WindowPrediction(wins[k], preds[n, k]) for k in range(3)] for n in range(preds.shape[0])]


def evaluate_samples(
    predict: Callable[[int], List[WindowPrediction]],
    samples: Sequence[TrainingSample],
    per_frame: Optional[list] = None,
) -> MetricsReport:
    """Score the three stride-1 windows of every sample (6 VFI-SR + 3 SR frames each)."""
    reports = []
    for n, s in enumerate(samples):
        rows = [] if per_frame is not None else None
        reports.append(evaluate_predictions(predict(n), {t: s.hr_at(t) for t in HR_TIMES}, rows))
        if per_frame is not None:
            per_frame.extend(dict(r, sample=s.sample_id or n) for r in rows)
    return _merge_reports(reports)


def _merge_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    def wavg(attr, count):
        num = sum(getattr(r, attr) * getattr(r, count) for r in reports if getattr(r, count))
        den = sum(getattr(r, count) for r in reports)
        return num / den if den else float("nan")

    return MetricsReport(
        psnr_vfisr=wavg("psnr_vfisr", "vfisr_count"),
        psnr_sr=wavg("psnr_sr", "sr_count"),
        ssim_vfisr=wavg("ssim_vfisr", "vfisr_count"),
        ssim_sr=wavg("ssim_sr", "sr_count"),
        frame_count=sum(r.frame_count for r in reports),
        vfisr_count=sum(r.vfisr_count for r in reports),
        sr_count=sum(r.sr_count for r in reports),
    )


def evaluate_model(model, data: PreparedData, samples, per_frame=None) -> MetricsReport:
    preds = window_predictions(predict_stacks(model, data.stacks[:, :3]))
    return evaluate_samples(lambda n: preds[n], samples, per_frame)


def overlap_disagreement(model, data: PreparedData) -> float:
    """Mean RMS distance between the two predictions of half-steps -1 and +1."""
    p = predict_stacks(model, data.stacks[:, :3])  # (N, 3, 3, H, W, C)
    d_minus = np.sqrt(((p[:, 0, 2] - p[:, 1, 0]) ** 2).reshape(len(p), -1).mean(axis=1))
    d_plus = np.sqrt(((p[:, 1, 2] - p[:, 2, 0]) ** 2).reshape(len(p), -1).mean(axis=1))
    return float(np.mean(np.concatenate([d_minus, d_plus])))


# ---------------------------------------------------------------------------
# Gradient audit
# ---------------------------------------------------------------------------

class _SignRecorder:
    """Records which units sit on the positive side of every piecewise-linear activation."""

    def __init__(self, model):
        self.patterns = []
        self.handles = [
            m.register_forward_hook(lambda mod, inp, out: self.patterns.append(inp[0].detach() > 0))
            for m in model.modules()
            if isinstance(m, (torch.nn.ReLU, torch.nn.LeakyReLU))
        ]

    def take(self):
        out, self.patterns = self.patterns, []
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def grad_audit(
    loss_fn: Callable[[MultiScaleNet], torch.Tensor],
    model: MultiScaleNet,
    epsilon: float = 1e-3,
    n_params: int = 200,
    seed: int = 0,
    details: Optional[dict] = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn(model)`` must return a scalar; run the model in float64.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``: below ``floor`` the
    central difference is dominated by float64 round-off in the loss, so tiny
    gradients are held to an absolute error of ``1e-4 * floor`` instead.  A probe whose
    +-epsilon step flips the side of any ReLU kink has no valid central
    difference; it is replaced by another randomly drawn parameter and
    counted in ``details["kinks"]``.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    rec = _SignRecorder(model)
    try:
        loss_fn(model).backward()
        base = rec.take()
        analytic = [p.grad.detach().clone() for p in params]
        sizes = np.array([p.numel() for p in params])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        order = np.random.default_rng(seed).permutation(int(sizes.sum()))
        worst, checked, kinks = 0.0, 0, 0
        with torch.no_grad():
            for flat in order:
                if checked >= n_params:
                    break
                k = int(np.searchsorted(offsets, flat, side="right") - 1)
                j = int(flat - offsets[k])
                view = params[k].view(-1)
                orig = view[j].item()
                view[j] = orig + epsilon
                up = loss_fn(model).item()
                up_pat = rec.take()
                view[j] = orig - epsilon
                down = loss_fn(model).item()
                down_pat = rec.take()
                view[j] = orig
                if any(not torch.equal(a, b) or not torch.equal(a, c) for a, b, c in zip(base, up_pat, down_pat)):
                    kinks += 1
                    continue
                numeric = (up - down) / (2 * epsilon)
                a = analytic[k].view(-1)[j].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                if err > worst and details is not None:
                    details["worst"] = {"tensor": k, "index": j, "analytic": a, "numeric": numeric}
                worst = max(worst, err)
                checked += 1
    finally:
        rec.close()
    if details is not None:
        details.update(checked=checked, kinks=kinks)
    return worst


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationVariant:
    name: str
    mask: str = "f"
    multi_scale: bool = True
    stack: str = "full"

    def apply(self, config: TrainConfig) -> TrainConfig:
        return replace(config, mask=self.mask, multi_scale=self.multi_scale, stack=self.stack)


def ablation_grid(preset: str) -> List[AblationVariant]:
    """Named grids: ``table1`` (multi-scale, frames only, columns a-f),
    ``table4_1`` (single scale, frames only, columns a-f) and ``table2``
    (architecture components accumulated in order)."""
    if preset in ("table1", "table4_1"):
        ms = preset == "table1"
        return [AblationVariant(f"({c})", c, ms, "frames") for c in "abcdef"]
    if preset == "table2":
        return [
            AblationVariant("Baseline", "a", False, "frames"),
            AblationVariant("+Temporal Loss", "f", False, "frames"),
            AblationVariant("+Multi-scale", "f", True, "frames"),
            AblationVariant("+Optical flow", "f", True, "flow"),
            AblationVariant("+Warped images", "f", True, "full"),
        ]
    raise ValueError(f"unknown ablation preset {preset!r}")


def run_ablation(
    grid: Sequence[AblationVariant],
    base: TrainConfig,
    train_samples: Sequence[TrainingSample],
    eval_samples: Sequence[TrainingSample],
) -> List[dict]:
    """Train every variant with the same seed and budget; one row per variant."""
    rows = []
    cache: Dict[str, tuple] = {}
    for v in grid:
        cfg = v.apply(base)
        key = (cfg.stack, cfg.multi_scale)
        if key not in cache:
            cache[key] = (prepare(train_samples, cfg), prepare(eval_samples, cfg))
        train_data, eval_data = cache[key]
        result = train(cfg, train_data)
        rep = evaluate_model(result.model, eval_data, eval_samples)
        terms = sorted(parse_mask(v.mask), key=["R1", "TM1", "TMM", "TD1", "R2", "TM2", "TD2"].index)
        rows.append(
            {
                "name": v.name,
                "mask": mask_name(parse_mask(v.mask)),
                "terms": terms,
                "multi_scale": v.multi_scale,
                "stack": v.stack,
                "VS-P": rep.psnr_vfisr,
                "S-P": rep.psnr_sr,
                "VS-S": rep.ssim_vfisr,
                "S-S": rep.ssim_sr,
                "final_loss": result.records[-1]["total"],
            }
        )
    return rows


def format_table(rows: Sequence[dict]) -> str:
    head = f"{'variant':<18} {'terms':<28} {'scale':<6} {'stack':<7} {'VS-P':>7} {'S-P':>7} {'VS-S':>7} {'S-S':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['name']:<18} {','.join(r['terms']):<28} {'multi' if r['multi_scale'] else 'single':<6} "
            f"{r['stack']:<7} {r['VS-P']:7.2f} {r['S-P']:7.2f} {r['VS-S']:7.4f} {r['S-S']:7.4f}"
        )
    return "\n".join(lines)
