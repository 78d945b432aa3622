"""Command line: gen, train, eval, infer, ablate, baseline.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch
import yaml

from . import config as cfgmod
from .baselines import best_cascade, evaluate_baselines
from .config import ConfigError
from .flowwarp import StackVariant, assemble_input_stack, make_provider
from .network import load_checkpoint
from .synthdata import (
    DatasetManifest,
    SceneSpec,
    generate_scene,
    plan_dataset,
    random_scene_specs,
    sample_oracle,
)
from .trainer import (
    AblationVariant,
    TrainConfig,
    ablation_grid,
    evaluate_model,
    evaluate_samples,
    format_table,
    prepare,
    run_ablation,
    run_windows,
    train,
)
from .videoio import read_dataset, read_video, write_dataset, write_png_dir
from .windowing import StitchPolicy, WindowPrediction, sliding_windows, stitch

log = logging.getLogger("vfisr")

GEN_KEYS = {
    "seed": 0,
    "scenes": 67,  # a count of random scenes, or a list of scene specs
    "canvas": [128, 128],
    "frame_count": 29,
    "max_disp": 6.0,
    "max_sprites": 2,
    "patch": 64,
    "frame_stride": 10,
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _prepare_out(out, force: bool) -> Path:
    if out is None:
        raise UsageError("--out is required")
    p = Path(out)
    if p.exists() and not p.is_dir():
        raise UsageError(f"{p} exists and is not a directory")
    if p.is_dir() and any(p.iterdir()) and not force:
        raise UsageError(f"{p} is not empty (use --force to overwrite)")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _check_device(device: str) -> None:
    try:
        dev = torch.device(device)
    except RuntimeError as e:
        raise UsageError(f"bad --device: {e}") from None
    if dev.type != "cpu":
        raise RuntimeError(f"device {device!r} is not supported by this build; use cpu")


def _train_overrides(args) -> dict:
    o = {"seed": args.seed, "mask": getattr(args, "mask", None)}
    if getattr(args, "no_flow_stack", False):
        o["stack"] = "frames"
    if getattr(args, "stitch_policy", None):
        o["stitch_policy"] = args.stitch_policy
    return o


def _write_jsonl(path, records) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _dataset(path):
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise UsageError(f"{path} is not a dataset directory (no manifest.json)")
    return read_dataset(p)


def _providers(config: TrainConfig, manifest: DatasetManifest):
    """Per-sample oracle providers when the config asks for exact flow."""
    if config.flow != "oracle":
        return None
    scenes = {sid: generate_scene(SceneSpec.from_dict(d)) for sid, d in manifest.scenes.items()}
    return [sample_oracle(scenes[e.scene_id], e.start, e.crop) for e in manifest.entries]


def _checkpoint_config(payload) -> TrainConfig:
    d = payload.get("extra", {}).get("train_config")
    if d is None:
        raise ValueError("checkpoint carries no training config")
    return cfgmod.train_config_from_dict(d)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    spec = cfgmod.load_yaml(args.spec)
    unknown = sorted(set(spec) - set(GEN_KEYS))
    if unknown:
        raise ConfigError(f"unknown key(s) in {args.spec}: {', '.join(unknown)}")
    opts = dict(GEN_KEYS, **spec)
    if args.seed is not None:
        opts["seed"] = args.seed
    out = _prepare_out(args.out, args.force)
    if isinstance(opts["scenes"], int):
        specs = random_scene_specs(
            opts["scenes"],
            opts["seed"],
            canvas=tuple(opts["canvas"]),
            frame_count=opts["frame_count"],
            max_disp=opts["max_disp"],
            max_sprites=opts["max_sprites"],
        )
    else:
        try:
            specs = [SceneSpec.from_dict(d) for d in opts["scenes"]]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad scene spec: {e}") from None
    manifest = plan_dataset(specs, opts["patch"], opts["frame_stride"], opts["seed"])
    frames = {sid: generate_scene(SceneSpec.from_dict(d)).frames for sid, d in manifest.scenes.items()}
    write_dataset(out, manifest, frames)
    (out / "gen.yaml").write_text(yaml.safe_dump(opts, sort_keys=False))
    cfgmod.write_provenance(out, "gen", {"spec": args.spec})
    print(json.dumps({"scenes": len(manifest.scenes), "samples": len(manifest.entries)}))
    return 0


def cmd_train(args) -> int:
    config = cfgmod.load_train_config(args.config, _train_overrides(args))
    if args.epochs is not None:
        config = cfgmod.train_config_from_dict(dict(config.to_dict(), epochs=args.epochs))
    manifest, samples = _dataset(args.dataset)
    out = Path(args.out) if args.resume else _prepare_out(args.out, args.force)
    cfgmod.write_echo(out, config)
    data = prepare(samples, config, _providers(config, manifest))
    result = train(config, data, out_dir=out, resume=args.resume)
    summary = {"steps": result.steps, "final_loss": result.records[-1]["total"] if result.records else None}
    if args.eval_dataset:
        emanifest, esamples = _dataset(args.eval_dataset)
        rep = evaluate_model(result.model, prepare(esamples, config, _providers(config, emanifest)), esamples)
        summary["eval"] = rep.to_dict()
    cfgmod.write_provenance(
        out, "train", {"config": out / cfgmod.ECHO_NAME, "dataset": args.dataset, "eval_dataset": args.eval_dataset}
    )
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args, predictor: Optional[Callable] = None) -> int:
    """``predictor(sample) -> [WindowPrediction]`` replaces the checkpoint (test hook)."""
    manifest, samples = _dataset(args.dataset)
    out = _prepare_out(args.out, args.force)
    per_frame: List[dict] = []
    if predictor is not None:
        report = evaluate_samples(lambda n: predictor(samples[n]), samples, per_frame)
    else:
        model, payload = load_checkpoint(args.checkpoint)
        config = _checkpoint_config(payload)
        cfgmod.write_echo(out, config)
        data = prepare(samples, config, _providers(config, manifest))
        report = evaluate_model(model, data, samples, per_frame)
    _write_jsonl(out / "per_frame.jsonl", per_frame)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    cfgmod.write_provenance(out, "eval", {"checkpoint": args.checkpoint, "dataset": args.dataset})
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


@torch.no_grad()
def infer_video(model, config: TrainConfig, lr_frames: np.ndarray, policy="later"):
    """Stitched (times, frames, sources) for a (N, h, w, 3) LR clip, N >= 3."""
    n, h, w = lr_frames.shape[:3]
    div = model.config.divisor if model.config.levels == 3 else 2**model.config.unet_depth
    ph, pw = -h % div, -w % div
    padded = np.pad(lr_frames, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge")
    provider = make_provider("block_matching" if config.flow == "oracle" else config.flow, config.flow_block, config.flow_search)
    variant = StackVariant(config.stack)
    model.eval()
    dtype = next(model.parameters()).dtype
    preds = []
    for win in sliding_windows(n):
        frames = [padded[t // 2] for t in win.input_times]
        stack = torch.tensor(assemble_input_stack(win, frames, provider, variant), dtype=dtype)
        out = run_windows(model, stack[None, None])[-1][0, 0]  # (3, 3, H, W)
        arr = out.permute(0, 2, 3, 1).double().numpy()[:, : 2 * h, : 2 * w]
        preds.append(WindowPrediction(win, arr))
    return stitch(preds, StitchPolicy(policy), return_sources=True)


def cmd_infer(args) -> int:
    model, payload = load_checkpoint(args.checkpoint)
    config = _checkpoint_config(payload)
    policy = args.stitch_policy or config.stitch_policy
    size = None
    if args.yuv_size:
        try:
            size = tuple(int(v) for v in args.yuv_size.lower().split("x"))
        except ValueError:
            raise UsageError("--yuv-size must look like WIDTHxHEIGHT") from None
    if not Path(args.input).exists():
        raise UsageError(f"input {args.input} does not exist")
    try:
        lr = read_video(args.input, size, args.chroma)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if len(lr) < 3:
        raise UsageError("inference needs at least 3 input frames")
    out = _prepare_out(args.out, args.force)
    times, frames, sources = infer_video(model, config, lr, policy)
    write_png_dir(frames, out / "frames")
    windows = sliding_windows(len(lr))
    _write_jsonl(
        out / "stitch.jsonl",
        [
            {
                "output": i,
                "time": t,
                "policy": policy,
                "window": None if s < 0 else windows[s].index,
                "source": "average" if s < 0 else f"window {windows[s].index}",
            }
            for i, (t, s) in enumerate(zip(times, sources))
        ],
    )
    cfgmod.write_echo(out, config)
    cfgmod.write_provenance(out, "infer", {"checkpoint": args.checkpoint, "input": args.input}, {"stitch_policy": policy})
    print(json.dumps({"inputs": len(lr), "outputs": len(frames), "size": list(frames[0].shape[:2])}))
    return 0


def load_grid(spec: str) -> List[AblationVariant]:
    """A preset name (table1, table4_1, table2) or a YAML list of variants."""
    p = Path(spec)
    if not p.is_file():
        try:
            return ablation_grid(spec)
        except ValueError:
            raise ConfigError(f"{spec!r} is neither a grid file nor a preset") from None
    data = yaml.safe_load(p.read_text())
    if isinstance(data, dict):
        if set(data) != {"variants"}:
            raise ConfigError("grid file must be a list or a mapping with only 'variants'")
        data = data["variants"]
    if not isinstance(data, list) or not data:
        raise ConfigError("grid file must list at least one variant")
    grid = []
    for i, item in enumerate(data):
        if isinstance(item, str):
            item = {"mask": item}
        unknown = set(item) - {"name", "mask", "multi_scale", "stack"}
        if unknown:
            raise ConfigError(f"unknown key(s) in grid entry {i}: {', '.join(sorted(unknown))}")
        item = dict(item)
        item.setdefault("name", f"({item['mask']})" if "mask" in item else f"variant{i}")
        try:
            v = AblationVariant(**item)
            TrainConfig(mask=v.mask, stack=v.stack)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"grid entry {i}: {e}") from None
        grid.append(v)
    return grid


def cmd_ablate(args) -> int:
    grid = load_grid(args.grid)
    overrides = _train_overrides(args)
    overrides.pop("mask")  # the grid owns the mask
    config = cfgmod.load_train_config(args.config, overrides)
    if args.mask:
        grid = [AblationVariant(v.name, args.mask, v.multi_scale, v.stack) for v in grid]
    if args.no_flow_stack:
        grid = [AblationVariant(v.name, v.mask, v.multi_scale, "frames") for v in grid]
    _, train_samples = _dataset(args.dataset)
    _, eval_samples = _dataset(args.eval_dataset or args.dataset)
    out = _prepare_out(args.out, args.force)
    cfgmod.write_echo(out, config)
    rows = run_ablation(grid, config, train_samples, eval_samples)
    table = format_table(rows)
    (out / "table.txt").write_text(table + "\n")
    _write_jsonl(out / "rows.jsonl", rows)
    cfgmod.write_provenance(
        out,
        "ablate",
        {"config": out / cfgmod.ECHO_NAME, "dataset": args.dataset, "eval_dataset": args.eval_dataset},
        {"grid": [v.__dict__ for v in grid]},
    )
    print(table)
    return 0


def cmd_baseline(args) -> int:
    _, samples = _dataset(args.dataset)
    out = _prepare_out(args.out, args.force)
    reports = evaluate_baselines(samples, args.block, args.search, methods=("bicubic", "nearest"))
    rows = [dict(method=k, **r.to_dict()) for k, r in reports.items()]
    _write_jsonl(out / "baselines.jsonl", rows)
    best = best_cascade(reports)
    cfgmod.write_provenance(out, "baseline", {"dataset": args.dataset}, {"best": best})
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="write into a non-empty --out")
    common.add_argument("--device", default="cpu")
    common.add_argument("-v", "--verbose", action="store_true")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--mask", help="loss term mask: a-f, 'all' or comma-separated terms")
    training.add_argument("--no-flow-stack", action="store_true", help="feed frames only (9 channels)")
    training.add_argument("--stitch-policy", choices=[p.value for p in StitchPolicy])

    parser = argparse.ArgumentParser(prog="vfisr", description="Joint frame interpolation and super-resolution")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="render a synthetic dataset")
    p.add_argument("spec", help="YAML dataset spec")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common, training], help="train a network")
    p.add_argument("dataset")
    p.add_argument("--eval-dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common, training], help="upconvert a low-res video")
    p.add_argument("checkpoint")
    p.add_argument("input", help="directory of PNG frames or a raw .yuv file")
    p.add_argument("--yuv-size", help="WIDTHxHEIGHT of a raw .yuv input")
    p.add_argument("--chroma", choices=["420", "444"], default="420")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", parents=[common, training], help="train and compare loss/architecture variants")
    p.add_argument("grid", help="grid YAML file or preset (table1, table4_1, table2)")
    p.add_argument("dataset")
    p.add_argument("--eval-dataset")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("baseline", parents=[common], help="score the cascade baselines")
    p.add_argument("dataset")
    p.add_argument("--block", type=int, default=8)
    p.add_argument("--search", type=int, default=6)
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None, **hooks) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _check_device(args.device)
        return args.func(args, **hooks)
    except (UsageError, ConfigError) as e:
        print(f"vfisr {args.command}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"vfisr {args.command}: error: {e}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
