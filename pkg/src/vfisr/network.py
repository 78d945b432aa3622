"""Multi-scale U-Net predictor.

Level 1 sees the input stack downscaled by 4, level 2 by 2 and level 3 at full
size; levels 2 and 3 also receive the previous level's 9-channel prediction,
which is already at their input resolution.  Every level outputs three frames
(VFI-SR, SR, VFI-SR) at twice its input resolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional

import torch
import torch.nn as nn

from .flowwarp import N_FLOW_CH, N_FRAME_CH, N_WARP_CH
from .frames import resize_tensor

OUT_CHANNELS = 9
CHECKPOINT_MAGIC = "FISR1"


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 16
    input_channels: int = 29
    levels: int = 3  # 3 = multi-scale, 1 = single scale (level 3 only)
    unet_depth: int = 3
    residual: bool = False
    kernel: int = 3
    activation: str = "relu"
    zero_head: bool = False  # start every level at its residual base
    flow_scale: float = 1.0 / 16  # flow channels are multiplied by this on entry

    def __post_init__(self):
        if self.levels not in (1, 3):
            raise ValueError("levels must be 1 or 3")
        if self.input_channels not in (9, 17, 29):
            raise ValueError("input_channels must be 9, 17 or 29")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.zero_head and not self.residual:
            raise ValueError("zero_head only makes sense with residual=True")
        if not self.flow_scale > 0:
            raise ValueError("flow_scale must be positive")
        if self.base_channels < 1 or self.unet_depth < 1:
            raise ValueError("base_channels and unet_depth must be positive")

    @property
    def divisor(self) -> int:
        return 2**self.unet_depth * 4

    def to_dict(self) -> dict:
        return asdict(self)


ACTIVATIONS = {
    "relu": nn.ReLU,
    "leaky_relu": lambda: nn.LeakyReLU(0.2),
}


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class UNet(nn.Module):
    """Encoder/decoder with skip concatenation and a learned x2 output head."""

    def __init__(self, in_ch: int, out_ch: int, c: int, depth: int, k: int = 3, act: str = "leaky_relu"):
        super().__init__()
        Act = ACTIVATIONS[act]
        widths = [c * 2 ** min(i, 2) for i in range(depth + 1)]
        self.inc = nn.Sequential(_conv(in_ch, c, k), Act(), _conv(c, c, k), Act())
        self.down = nn.ModuleList(
            nn.Sequential(
                _conv(widths[i], widths[i + 1], k, stride=2), Act(),
                _conv(widths[i + 1], widths[i + 1], k), Act(),
            )
            for i in range(depth)
        )
        self.up = nn.ModuleList(
            nn.Sequential(_conv(widths[i + 1], widths[i] * 4, k), nn.PixelShuffle(2), Act())
            for i in range(depth)
        )
        self.fuse = nn.ModuleList(
            nn.Sequential(
                _conv(2 * widths[i], widths[i], k), Act(),
                _conv(widths[i], widths[i], k), Act(),
            )
            for i in range(depth)
        )
        self.head = nn.Sequential(_conv(c, out_ch * 4, k), nn.PixelShuffle(2))

    def forward(self, x):
        skips = [self.inc(x)]
        for down in self.down:
            skips.append(down(skips[-1]))
        y = skips.pop()
        for i in reversed(range(len(self.up))):
            y = self.fuse[i](torch.cat([self.up[i](y), skips[i]], dim=1))
        return self.head(y)


class MultiScaleNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        cfg = config
        nets = []
        for lvl in range(cfg.levels):
            cin = cfg.input_channels + (OUT_CHANNELS if lvl > 0 else 0)
            nets.append(UNet(cin, OUT_CHANNELS, cfg.base_channels, cfg.unet_depth, cfg.kernel, cfg.activation))
        self.levels = nn.ModuleList(nets)

    @property
    def level_ids(self) -> List[int]:
        return [3] if self.config.levels == 1 else [1, 2, 3]

    def forward(self, level_inputs: List[torch.Tensor]) -> List[torch.Tensor]:
        """One (B, 9, 2h, 2w) output per level, coarsest first."""
        if len(level_inputs) != len(self.levels):
            raise ValueError(f"expected {len(self.levels)} level inputs, got {len(level_inputs)}")
        outs, prev = [], None
        for lvl, (net, x) in enumerate(zip(self.levels, level_inputs)):
            if x.shape[1] != self.config.input_channels:
                raise ValueError(
                    f"level {self.level_ids[lvl]}: expected {self.config.input_channels} channels, got {x.shape[1]}"
                )
            if prev is not None:
                if prev.shape[-2:] != x.shape[-2:]:
                    raise ValueError(
                        f"level {self.level_ids[lvl]}: previous prediction {tuple(prev.shape[-2:])} "
                        f"does not match input {tuple(x.shape[-2:])}"
                    )
                x = torch.cat([x, prev], dim=1)
            if x.shape[-1] % 2**self.config.unet_depth or x.shape[-2] % 2**self.config.unet_depth:
                raise ValueError(f"level {self.level_ids[lvl]}: input dims not divisible by 2^depth")
            y = net(self._normalise(x))
            if self.config.residual:
                y = y + _residual_base(x[:, : self.config.input_channels])
            outs.append(y)
            prev = y
        return outs

    def _normalise(self, x: torch.Tensor) -> torch.Tensor:
        if self.config.input_channels == N_FRAME_CH or self.config.flow_scale == 1.0:
            return x
        scale = torch.ones(x.shape[1], 1, 1, dtype=x.dtype, device=x.device)
        scale[N_FRAME_CH : N_FRAME_CH + N_FLOW_CH] = self.config.flow_scale
        return x * scale


def _residual_base(stack: torch.Tensor) -> torch.Tensor:
    """Bicubic x2 of a naive estimate: warp averages when warped frames are
    stacked, neighbour averages otherwise, and the centre frame."""
    xa, xc, xb = stack[:, 0:3], stack[:, 3:6], stack[:, 6:9]
    if stack.shape[1] == N_FRAME_CH + N_FLOW_CH + N_WARP_CH:
        g = stack[:, N_FRAME_CH + N_FLOW_CH :]
        before = 0.5 * (g[:, 0:3] + g[:, 3:6])
        after = 0.5 * (g[:, 6:9] + g[:, 9:12])
    else:
        before, after = 0.5 * (xa + xc), 0.5 * (xc + xb)
    base = torch.cat([before, xc, after], dim=1)
    h, w = base.shape[-2:]
    return resize_tensor(base, (2 * h, 2 * w))


def build_pyramid(stack: torch.Tensor, levels: int = 3) -> List[torch.Tensor]:
    """Bicubic 1/4, 1/2 and full-size copies of a (B, C, H, W) input stack.

    Flow channels (9..16, when present) have their displacements multiplied
    by the level's scale.
    """
    h, w = stack.shape[-2:]
    if levels == 1:
        return [stack]
    if h % 4 or w % 4:
        raise ValueError(f"stack dims {h}x{w} not divisible by 4")
    out = []
    for factor in (4, 2, 1):
        if factor == 1:
            out.append(stack)
            continue
        lvl = resize_tensor(stack, (h // factor, w // factor))
        if stack.shape[1] > N_FRAME_CH:
            scale = torch.ones(stack.shape[1], 1, 1, dtype=stack.dtype, device=stack.device)
            scale[N_FRAME_CH : N_FRAME_CH + N_FLOW_CH] = 1.0 / factor
            lvl = lvl * scale
        out.append(lvl)
    return out


def split_frames(out: torch.Tensor) -> torch.Tensor:
    """(B, 9, H, W) -> (B, 3, 3, H, W) ordered by output time."""
    b, _, h, w = out.shape
    return out.reshape(b, 3, 3, h, w)


def init_parameters(model: nn.Module, seed: int) -> nn.Module:
    """Xavier-uniform weights, zero biases, deterministic per seed."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = m.weight.shape[1] * m.weight[0, 0].numel()
                fan_out = m.weight.shape[0] * m.weight[0, 0].numel()
                bound = (6.0 / (fan_in + fan_out)) ** 0.5
                w = torch.rand(m.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1
                m.weight.copy_(w * bound)
                if m.bias is not None:
                    m.bias.zero_()
    return model


def build_network(config: NetworkConfig, seed: int = 0, dtype=torch.float32) -> MultiScaleNet:
    model = MultiScaleNet(config)
    init_parameters(model, seed)
    if config.zero_head:
        with torch.no_grad():
            for net in model.levels:
                net.head[0].weight.zero_()
    return model.to(dtype)


def save_checkpoint(path, model: MultiScaleNet, step: int, epoch: int, optimizer_state=None, extra=None):
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "network_config": model.config.to_dict(),
        "parameters": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "step": step,
        "epoch": epoch,
        "optimizer": optimizer_state,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, dtype: Optional[torch.dtype] = None):
    """Returns ``(model, payload)``; rejects files without the magic string."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a {CHECKPOINT_MAGIC} checkpoint")
    cfg = NetworkConfig(**payload["network_config"])
    param_dtype = next(iter(payload["parameters"].values())).dtype
    # match the stored dtype before loading so no precision is lost on the way in
    model = MultiScaleNet(cfg).to(param_dtype)
    model.load_state_dict(payload["parameters"])
    model.to(dtype or param_dtype)
    return model, payload
