"""Run configuration: one JSON file, validated up front, flags applied on top."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .losses import LossConfig
from .netcore import ModelConfig
from .synth import LAYOUT, SynthConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"
    source_manifest: Optional[str] = None
    target_manifest: Optional[str] = None
    valid_manifest: Optional[str] = None
    valid_outfits: Optional[str] = None
    valid_fitb: Optional[str] = None
    test_manifest: Optional[str] = None
    test_outfits: Optional[str] = None
    test_fitb: Optional[str] = None
    labels: Optional[str] = None

    _defaults = {
        "source_manifest": LAYOUT["source"], "target_manifest": LAYOUT["target"],
        "valid_manifest": LAYOUT["target_valid"], "valid_outfits": LAYOUT["valid_outfits"],
        "valid_fitb": LAYOUT["valid_fitb"], "test_manifest": LAYOUT["target_test"],
        "test_outfits": LAYOUT["test_outfits"], "test_fitb": LAYOUT["test_fitb"],
        "labels": LAYOUT["labels"],
    }

    def resolve(self, name: str) -> Path:
        """Explicit paths are taken as given; unset ones fall back to the synth layout under data_dir."""
        value = getattr(self, name)
        if value is not None:
            return Path(value)
        return Path(self.data_dir) / self._defaults[name]


@dataclass
class EvalConfig:
    n_patches: int = 20
    seed: Optional[int] = None  # defaults to the run seed
    split: str = "test"

    def __post_init__(self):
        if self.n_patches < 1:
            raise ValueError("eval.n_patches must be >= 1")
        if self.split not in ("valid", "test"):
            raise ValueError("eval.split must be 'valid' or 'test'")


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def eval_seed(self) -> int:
        return self.seed if self.eval.seed is None else self.eval.seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["conv_channels"] = list(d["model"]["conv_channels"])
        return d


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "loss": LossConfig, "synth": SynthConfig,
            "paths": PathsConfig, "eval": EvalConfig}


def _build(cls, name: str, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name for f in dataclasses.fields(cls) if not f.name.startswith("_")}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {', '.join(sorted(unknown))}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(doc: dict, seed: Optional[int] = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {', '.join(sorted(unknown))}")
    run_seed = doc.get("seed", 0) if seed is None else seed
    if not isinstance(run_seed, int) or run_seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    sections = {}
    for name, cls in SECTIONS.items():
        raw = dict(doc.get(name, {}))
        if name == "train":
            if "seed" in raw:
                raise ConfigError("train.seed is derived from the top-level seed; set 'seed' instead")
            raw["seed"] = run_seed
        sections[name] = _build(cls, name, raw)
    return RunConfig(seed=run_seed, **sections)


def load_config(path=None, seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
    cfg = config_from_dict(doc, seed=seed)
    if out is not None:
        cfg.paths.out_dir = out
    return cfg


def write_snapshot(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    return path
