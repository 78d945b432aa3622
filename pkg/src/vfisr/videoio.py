"""Frame files on disk: 8-bit RGB PNG directories and raw planar YUV.

Frames are float YUV in memory; quantization to 8 bits happens only here.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image

from .frames import RGB_TO_YUV, YUV_TO_RGB

FRAME_PATTERN = "frame_{:04d}.png"
MANIFEST_NAME = "manifest.json"


def to_rgb8(frame_yuv: np.ndarray) -> np.ndarray:
    rgb = np.asarray(frame_yuv, dtype=np.float64) @ YUV_TO_RGB.T
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def from_rgb8(rgb8: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb8, dtype=np.float64) / 255.0) @ RGB_TO_YUV.T


def write_png_dir(frames: Sequence[np.ndarray], out_dir) -> List[Path]:
    """Write (H, W, 3) YUV frames as frame_0000.png, frame_0001.png, ..."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        p = out / FRAME_PATTERN.format(i)
        # no timestamps or other ancillary chunks, so identical frames give identical bytes
        Image.fromarray(to_rgb8(f), mode="RGB").save(p, format="PNG", optimize=False)
        paths.append(p)
    return paths


def read_png_dir(in_dir) -> np.ndarray:
    """(T, H, W, 3) float YUV frames from every *.png in name order."""
    paths = sorted(Path(in_dir).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {in_dir}")
    frames = []
    for p in paths:
        with Image.open(p) as im:
            frames.append(from_rgb8(np.asarray(im.convert("RGB"))))
    if any(f.shape != frames[0].shape for f in frames):
        raise ValueError(f"frames in {in_dir} differ in size")
    return np.stack(frames)


def read_yuv_raw(path, size: Tuple[int, int], chroma: str = "420", bit_depth: int = 8) -> np.ndarray:
    """Raw planar Y, U, V frames (``size`` is width, height) as (T, H, W, 3).

    Samples are treated as full-range; 4:2:0 chroma is upsampled by pixel
    replication.  U and V come back signed around 0.
    """
    w, h = size
    if chroma not in ("420", "444"):
        raise ValueError("chroma must be '420' or '444'")
    if chroma == "420" and (w % 2 or h % 2):
        raise ValueError("4:2:0 frames need even dimensions")
    dtype = np.uint8 if bit_depth == 8 else np.dtype("<u2")
    raw = np.fromfile(path, dtype=dtype)
    cw, ch = (w // 2, h // 2) if chroma == "420" else (w, h)
    per_frame = w * h + 2 * cw * ch
    if raw.size == 0 or raw.size % per_frame:
        raise ValueError(f"{path}: size {raw.size} is not a whole number of {w}x{h} {chroma} frames")
    peak = float(2**bit_depth - 1)
    out = []
    for f in raw.reshape(-1, per_frame):
        y = f[: w * h].reshape(h, w) / peak
        u = f[w * h : w * h + cw * ch].reshape(ch, cw) / peak - 0.5
        v = f[w * h + cw * ch :].reshape(ch, cw) / peak - 0.5
        if chroma == "420":
            u = u.repeat(2, axis=0).repeat(2, axis=1)
            v = v.repeat(2, axis=0).repeat(2, axis=1)
        out.append(np.stack([y, u, v], axis=-1))
    return np.stack(out)


def read_video(path, yuv_size=None, chroma="420") -> np.ndarray:
    p = Path(path)
    if p.is_dir():
        return read_png_dir(p)
    if p.suffix.lower() == ".yuv":
        if yuv_size is None:
            raise ValueError("raw YUV input needs its frame size")
        return read_yuv_raw(p, yuv_size, chroma)
    raise ValueError(f"{path}: expected a PNG directory or a .yuv file")


# ---------------------------------------------------------------------------
# Dataset layout: <root>/manifest.json and <root>/scenes/<scene id>/frame_*.png
# ---------------------------------------------------------------------------

def write_dataset(root, manifest, frames_by_scene) -> None:
    root = Path(root)
    for sid, frames in frames_by_scene.items():
        write_png_dir(frames, root / "scenes" / sid)
    (root / MANIFEST_NAME).write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n")


def read_dataset(root):
    """``(manifest, samples)`` rebuilt from the frames on disk."""
    from .synthdata import DatasetManifest, materialize

    root = Path(root)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise FileNotFoundError(f"{root} has no {MANIFEST_NAME}")
    manifest = DatasetManifest.from_dict(json.loads(mpath.read_text()))
    frames = {sid: read_png_dir(root / "scenes" / sid) for sid in manifest.scenes}
    return manifest, materialize(manifest, frames)
