"""YAML run configuration: strict loading, verbatim echo and content hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import yaml

from .loss import LossWeights
from .trainer import TrainConfig

ECHO_NAME = "config.yaml"
PROVENANCE_NAME = "provenance.json"


class ConfigError(ValueError):
    """Bad config file or flag; the CLI maps it to a usage error."""


def _check_keys(d: dict, allowed: Iterable[str], where: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def load_yaml(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    _check_keys(d, [f.name for f in dataclasses.fields(TrainConfig)], "config")
    if "weights" in d:
        w = d["weights"] or {}
        if not isinstance(w, dict):
            raise ConfigError("weights must be a mapping")
        _check_keys(w, [f.name for f in dataclasses.fields(LossWeights)], "weights")
        d["weights"] = LossWeights(**{k: tuple(v) if isinstance(v, list) else v for k, v in w.items()})
    for k in ("lr_drops", "adam_betas"):
        if k in d:
            d[k] = tuple(d[k])
    try:
        return TrainConfig(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_train_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
    """Config file (optional) merged with non-None flag overrides."""
    d = load_yaml(path) if path else {}
    for k, v in (overrides or {}).items():
        if v is not None:
            d[k] = v
    return train_config_from_dict(d)


def dump_config(config: TrainConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False, default_flow_style=None)


def write_echo(out_dir, config: TrainConfig) -> Path:
    path = Path(out_dir) / ECHO_NAME
    path.write_text(dump_config(config))
    return path


# ---------------------------------------------------------------------------
# Provenance
# ---------------------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(path) -> str:
    """Hash of a file, or of a directory's sorted (relative path, file hash) list."""
    p = Path(path)
    if p.is_file():
        return file_digest(p)
    h = hashlib.sha256()
    for f in sorted(q for q in p.rglob("*") if q.is_file()):
        h.update(f"{f.relative_to(p).as_posix()}\0{file_digest(f)}\n".encode())
    return h.hexdigest()


def write_provenance(out_dir, command: str, inputs: Dict[str, Any], extra: Optional[dict] = None) -> dict:
    """Record the content hash of every input path plus one combined hash."""
    hashes = {name: tree_digest(p) for name, p in inputs.items() if p is not None}
    combined = hashlib.sha256(json.dumps(hashes, sort_keys=True).encode()).hexdigest()
    record = {"command": command, "inputs": hashes, "content_hash": combined}
    record.update(extra or {})
    (Path(out_dir) / PROVENANCE_NAME).write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    return record
