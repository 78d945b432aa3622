"""Synthetic moving-texture video with exact flow, and the patch dataset.

A scene is a stack of layers.  Layer 0 is a periodic background texture that
covers the canvas; further layers are square sprites with their own texture.
Layer position at frame ``t`` is ``v * t + amp * sin(2 pi t / period)`` and
pixels are rendered by bilinear lookup into the layer's periodic texture.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .flowwarp import OracleFlow
from .frames import RGB_TO_YUV, resize_array
from .windowing import TrainingSample, build_training_sample

TEXTURES = ("checker", "noise", "mix")


@dataclass(frozen=True)
class Layer:
    velocity: Tuple[float, float] = (0.0, 0.0)
    amplitude: Tuple[float, float] = (0.0, 0.0)
    period: float = 16.0
    # sprite geometry (ignored for the background layer)
    centre: Tuple[float, float] = (0.0, 0.0)
    half_size: float = 0.0

    def position(self, t: float) -> np.ndarray:
        v = np.asarray(self.velocity, dtype=np.float64)
        a = np.asarray(self.amplitude, dtype=np.float64)
        return v * t + a * np.sin(2 * np.pi * t / self.period)


@dataclass(frozen=True)
class SceneSpec:
    height: int = 128
    width: int = 128
    texture: str = "mix"
    layers: Tuple[Layer, ...] = (Layer(),)
    frame_count: int = 29
    seed: int = 0
    max_disp: float = 6.0

    def __post_init__(self):
        if self.frame_count < 9:
            raise ValueError("a scene needs at least 9 frames")
        if self.texture not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}")
        if not self.layers:
            raise ValueError("a scene needs a background layer")
        layers = tuple(l if isinstance(l, Layer) else Layer(**_tuplify(l)) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        for layer in layers:
            if np.hypot(*layer.velocity) > self.max_disp:
                raise ValueError(f"layer speed exceeds max_disp={self.max_disp}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return _listify(d)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["layers"] = tuple(Layer(**_tuplify(l)) for l in d.get("layers", [{}]))
        return cls(**d)


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _listify(obj):
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_listify(v) for v in obj]
    return obj


def make_texture(kind: str, shape: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Periodic RGB texture in [0, 1] with energy at several frequencies."""
    h, w = shape
    out = np.zeros((h, w, 3))
    if kind in ("checker", "mix"):
        cell = int(rng.integers(4, 13))
        yy, xx = np.mgrid[0:h, 0:w]
        board = ((yy // cell + xx // cell) % 2).astype(np.float64)
        c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
        out += board[..., None] * c1 + (1 - board[..., None]) * c0
    if kind in ("noise", "mix"):
        smooth = np.stack(
            [ndimage.gaussian_filter(rng.standard_normal((h, w)), rng.uniform(2.0, 5.0), mode="wrap") for _ in range(3)],
            axis=-1,
        )
        smooth /= np.abs(smooth).max() + 1e-12
        fine = ndimage.gaussian_filter(rng.standard_normal((h, w)), 0.8, mode="wrap")
        fine /= np.abs(fine).max() + 1e-12
        noise = 0.5 + 0.35 * smooth + 0.1 * fine[..., None]
        out = noise if kind == "noise" else 0.6 * out + 0.4 * noise
    return np.clip(out, 0.0, 1.0)


def _bilinear_periodic(tex: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = tex.shape[:2]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    ax = (x - x0)[..., None]
    ay = (y - y0)[..., None]
    x0m, x1m = x0 % w, (x0 + 1) % w
    y0m, y1m = y0 % h, (y0 + 1) % h
    return (
        tex[y0m, x0m] * (1 - ax) * (1 - ay)
        + tex[y0m, x1m] * ax * (1 - ay)
        + tex[y1m, x0m] * (1 - ax) * ay
        + tex[y1m, x1m] * ax * ay
    )


class Scene:
    """Rendered frames (T, H, W, 3) in YUV plus exact per-pixel flow."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        shape = (spec.height, spec.width)
        self.textures = [make_texture(spec.texture, shape, rng) for _ in spec.layers]
        self._grid = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
        self.frames = np.stack([self.render(t) for t in range(spec.frame_count)])

    def _sprite_mask(self, layer: Layer, t: float) -> np.ndarray:
        h, w = self.spec.height, self.spec.width
        gy, gx = self._grid
        cx, cy = np.asarray(layer.centre) + layer.position(t)
        dx = (gx - cx + w / 2) % w - w / 2
        dy = (gy - cy + h / 2) % h - h / 2
        return (np.abs(dx) <= layer.half_size) & (np.abs(dy) <= layer.half_size)

    def owner(self, t: float) -> np.ndarray:
        """Index of the top-most layer visible at every pixel of frame ``t``."""
        own = np.zeros((self.spec.height, self.spec.width), dtype=np.int64)
        for k, layer in enumerate(self.spec.layers[1:], start=1):
            own[self._sprite_mask(layer, t)] = k
        return own

    def render(self, t: float) -> np.ndarray:
        gy, gx = self._grid
        own = self.owner(t)
        rgb = np.zeros((self.spec.height, self.spec.width, 3))
        for k, (layer, tex) in enumerate(zip(self.spec.layers, self.textures)):
            px, py = layer.position(t)
            vals = _bilinear_periodic(tex, gx - px, gy - py)
            sel = own == k
            rgb[sel] = vals[sel]
        return rgb @ RGB_TO_YUV.T

    def flow(self, a: float, b: float) -> np.ndarray:
        """Exact displacement (H, W, 2) of the content of frame ``a`` to frame ``b``."""
        own = self.owner(a)
        out = np.zeros((self.spec.height, self.spec.width, 2))
        for k, layer in enumerate(self.spec.layers):
            out[own == k] = layer.position(b) - layer.position(a)
        return out


def generate_scene(spec: SceneSpec) -> Scene:
    return Scene(spec)


def random_scene_specs(
    n: int,
    seed: int,
    canvas: Tuple[int, int] = (128, 128),
    frame_count: int = 29,
    max_disp: float = 6.0,
    max_sprites: int = 2,
    wobble: float = 0.5,
) -> List[SceneSpec]:
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n):

        def velocity():
            speed = rng.uniform(0.0, max_disp)
            ang = rng.uniform(0, 2 * np.pi)
            return (float(speed * np.cos(ang)), float(speed * np.sin(ang)))

        def amplitude():
            return tuple(float(v) for v in rng.uniform(-wobble, wobble, 2))

        layers = [Layer(velocity=velocity(), amplitude=amplitude(), period=float(rng.uniform(12, 30)))]
        for _ in range(int(rng.integers(0, max_sprites + 1))):
            layers.append(
                Layer(
                    velocity=velocity(),
                    amplitude=amplitude(),
                    period=float(rng.uniform(12, 30)),
                    centre=(float(rng.uniform(0, canvas[1])), float(rng.uniform(0, canvas[0]))),
                    half_size=float(rng.uniform(8, 24)),
                )
            )
        specs.append(
            SceneSpec(
                height=canvas[0],
                width=canvas[1],
                texture=str(rng.choice(TEXTURES, p=[0.25, 0.25, 0.5])),
                layers=tuple(layers),
                frame_count=frame_count,
                seed=int(rng.integers(0, 2**31 - 1)),
                max_disp=max_disp,
            )
        )
    return specs


# ---------------------------------------------------------------------------
# Patch dataset
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    sample_id: str
    scene_id: str
    start: int  # 0-based index of the first of 9 frames
    crop: Tuple[int, int, int, int]  # top, left, height, width (HR)


@dataclass
class DatasetManifest:
    patch: int
    frame_stride: int
    seed: int
    entries: List[ManifestEntry] = field(default_factory=list)
    scenes: dict = field(default_factory=dict)  # scene id -> SceneSpec dict

    def to_dict(self) -> dict:
        return {
            "patch": self.patch,
            "frame_stride": self.frame_stride,
            "seed": self.seed,
            "scenes": self.scenes,
            "entries": [
                {"sample_id": e.sample_id, "scene_id": e.scene_id, "start": e.start, "crop": list(e.crop)}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        entries = [
            ManifestEntry(e["sample_id"], e["scene_id"], int(e["start"]), tuple(e["crop"])) for e in d["entries"]
        ]
        return cls(int(d["patch"]), int(d["frame_stride"]), int(d["seed"]), entries, dict(d.get("scenes", {})))


def sample_starts(frame_count: int, frame_stride: int) -> List[int]:
    return list(range(0, frame_count - 8, frame_stride))


def plan_dataset(scene_specs: Sequence[SceneSpec], patch: int, frame_stride: int, seed: int, scene_ids=None):
    """Manifest only: 9-frame windows every ``frame_stride`` frames, one seeded crop each."""
    if patch % 2:
        raise ValueError("patch must be even")
    if frame_stride < 1:
        raise ValueError("frame_stride must be positive")
    scene_ids = scene_ids or [f"scene{i:04d}" for i in range(len(scene_specs))]
    manifest = DatasetManifest(patch, frame_stride, seed)
    for idx, (sid, spec) in enumerate(zip(scene_ids, scene_specs)):
        if patch > spec.height or patch > spec.width:
            raise ValueError(f"patch {patch} larger than {spec.height}x{spec.width} canvas")
        manifest.scenes[sid] = spec.to_dict()
        for start in sample_starts(spec.frame_count, frame_stride):
            rng = np.random.default_rng([seed, idx, start])
            top = int(rng.integers(0, spec.height - patch + 1))
            left = int(rng.integers(0, spec.width - patch + 1))
            manifest.entries.append(ManifestEntry(f"{sid}_f{start:04d}", sid, start, (top, left, patch, patch)))
    return manifest


def materialize(manifest: DatasetManifest, frames_by_scene) -> List[TrainingSample]:
    """Cut every manifest entry out of ``frames_by_scene[scene_id]`` (T, H, W, 3)."""
    samples = []
    for e in manifest.entries:
        frames = frames_by_scene[e.scene_id]
        samples.append(build_training_sample(list(frames[e.start : e.start + 9]), e.crop, sample_id=e.sample_id))
    return samples


def build_dataset(scene_specs: Sequence[SceneSpec], patch: int, frame_stride: int = 10, seed: int = 0):
    """Manifest plus materialized samples, rendering every scene in memory."""
    manifest = plan_dataset(scene_specs, patch, frame_stride, seed)
    frames = {sid: generate_scene(SceneSpec.from_dict(d)).frames for sid, d in manifest.scenes.items()}
    return manifest, materialize(manifest, frames)


def sample_oracle(scene: Scene, start: int, crop: Optional[Tuple[int, int, int, int]] = None) -> OracleFlow:
    """Exact LR flow between the half-step times of one training sample.

    Half-step ``h`` is HR frame ``start + 4 + h``; the HR flow is box-averaged
    over 2x2 blocks and halved to LR pixel units.
    """

    def fn(src_time: int, dst_time: int) -> np.ndarray:
        f = scene.flow(start + 4 + src_time, start + 4 + dst_time)
        if crop is not None:
            top, left, h, w = crop
            f = f[top : top + h, left : left + w]
        h, w = f.shape[:2]
        return 0.5 * f.reshape(h // 2, 2, w // 2, 2, 2).mean(axis=(1, 3))

    return OracleFlow(fn)


def lr_video(scene: Scene) -> np.ndarray:
    """Bicubic-halved copies of a scene's even frames (an LR low-frame-rate clip)."""
    frames = scene.frames[0::2]
    h, w = frames.shape[1:3]
    return resize_array(frames, (h // 2, w // 2))
