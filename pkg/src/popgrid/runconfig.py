"""Run configuration: one YAML file, strict keys, flag overrides.

Unknown keys are errors rather than warnings; a typo that silently falls
back to a default is how a wrong map gets published.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import platform
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import yaml

from .encoder import FinetuneConfig
from .geogrid import GridDef
from .regress import RFConfig


@dataclass
class RunPaths:
    imagery: str | None = None
    microcensus: str | None = None
    manifest: str | None = None
    folds: str | None = None
    chip_cache: str | None = None
    features: str | None = None
    encoder: str | None = None
    model: str | None = None
    decisions: str | None = None
    outdir: str = "out"


@dataclass
class RunOptions:
    n_folds: int = 4
    seed: int = 0
    grid_search: bool = False
    pipeline: str = "features"  # null | features | encoder
    microcensus_crs: str | None = None
    uncertainty: str = "rf_trees"
    mc_passes: int = 30
    mc_p: float = 0.1


@dataclass
class RunConfig:
    grid: GridDef | None = None
    paths: RunPaths = field(default_factory=RunPaths)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    rf: RFConfig = field(default_factory=RFConfig)
    run: RunOptions = field(default_factory=RunOptions)


def _build(cls, mapping: dict, section: str):
    if not isinstance(mapping, dict):
        raise ValueError(f"section {section!r} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ValueError(f"unknown key(s) {unknown} in section {section!r}")
    return cls(**mapping)


_SECTIONS = ("grid", "paths", "finetune", "rf", "run")


def load_config(path: str | Path) -> RunConfig:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"config {path} must be a mapping at the top level")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ValueError(f"unknown section(s) {unknown}; expected {list(_SECTIONS)}")
    cfg = RunConfig()
    if "grid" in raw:
        cfg.grid = _build(GridDef, raw["grid"], "grid")
    if "paths" in raw:
        cfg.paths = _build(RunPaths, raw["paths"], "paths")
    if "finetune" in raw:
        cfg.finetune = _build(FinetuneConfig, raw["finetune"], "finetune")
    if "rf" in raw:
        cfg.rf = _build(RFConfig, raw["rf"], "rf")
    if "run" in raw:
        cfg.run = _build(RunOptions, raw["run"], "run")
    return cfg


def config_hash(cfg: RunConfig) -> str:
    def encode(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: encode(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        return obj

    blob = json.dumps(encode(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_run_manifest(
    outdir: str | Path,
    command: str,
    cfg: RunConfig,
    inputs: dict[str, str],
    outputs: list[str],
) -> Path:
    import numpy
    import torch

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "config_hash": config_hash(cfg),
        "seed": cfg.run.seed,
        "inputs": inputs,
        "outputs": outputs,
        "versions": {
            "python": platform.python_version(),
            "numpy": numpy.__version__,
            "torch": torch.__version__,
        },
    }
    path = outdir / f"run_manifest_{command.replace('-', '_')}.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


class OutputGuard:
    """Deletes declared outputs when the wrapped command fails."""

    def __init__(self):
        self.paths: list[Path] = []

    def declare(self, *paths: str | Path) -> None:
        self.paths.extend(Path(p) for p in paths)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            for p in self.paths:
                if p.exists() and p.is_file():
                    p.unlink()
        return False
