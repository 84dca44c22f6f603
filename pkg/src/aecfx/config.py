"""Run configuration (YAML) for the command-line pipeline.

Relative paths are resolved against the directory holding the config file.
Every key is optional except ``groups``. Seed, detector ``k`` and the
training schedule default per architecture (see ``ARCH_DEFAULTS``).
See ``configs/skab.yaml`` for an annotated example.
"""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .autoencoder import ARCHITECTURES, TrainConfig
from .exceptions import ConfigurationError
from .explainer import ExplainerSettings
from .synth import SynthConfig

ROLES = ("train_valid", "train", "valid", "test")


@dataclass
class FileGroup:
    name: str
    files: list[str]
    role: str
    normal_only: bool = False
    train_fraction: float | None = None
    schema: str | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigurationError(f"group {self.name!r}: role must be one of {ROLES}")
        if not self.files:
            raise ConfigurationError(f"group {self.name!r} lists no files")
        if self.train_fraction is not None and not 0 < self.train_fraction < 1:
            raise ConfigurationError(f"group {self.name!r}: train_fraction must lie in (0, 1)")


@dataclass
class RunConfig:
    groups: list[FileGroup]
    base_dir: Path = Path(".")
    schema: str = "schema.yaml"
    data_dir: str = "."
    output_dir: str = "run"
    train_fraction: float = 0.8
    window_length: int = 64
    window_stride: int = 1
    label_rule: str = "any"
    architecture: str = "skab"
    arch_options: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    k: float = 8.0
    explainer: ExplainerSettings = field(default_factory=ExplainerSettings)
    epsilon: float = 0.005
    seed: int = 125
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ConfigurationError("train_fraction must lie in (0, 1)")
        if self.window_length < 1 or self.window_stride < 1:
            raise ConfigurationError("window length and stride must be positive")
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"architecture must be one of {ARCHITECTURES}")
        if self.k < 0 or self.epsilon < 0:
            raise ConfigurationError("k and epsilon must be non-negative")
        e = self.explainer
        if e.eta <= 0 or e.max_iters < 0 or e.batch_size < 1:
            raise ConfigurationError("explainer needs eta > 0, max_iters >= 0, batch_size >= 1")

    # paths ---------------------------------------------------------------
    def resolve(self, p: str | Path) -> Path:
        """Expand ``$VARS`` and ``~``, then anchor relative paths at the config."""
        p = Path(os.path.expanduser(os.path.expandvars(str(p))))
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def schema_path(self) -> Path:
        return self.resolve(self.schema)

    def group_schema_path(self, group: FileGroup) -> Path:
        return self.resolve(group.schema) if group.schema else self.schema_path

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)

    def group_files(self, group: FileGroup) -> list[Path]:
        """Expand a group's file patterns (sorted, relative to ``data_dir``)."""
        base = self.resolve(self.data_dir)
        found: list[Path] = []
        for pattern in group.files:
            full = Path(pattern) if Path(pattern).is_absolute() else base / pattern
            matches = sorted(glob.glob(str(full)))
            if not matches:
                raise ConfigurationError(f"group {group.name!r}: no file matches {str(full)!r}")
            found.extend(Path(m) for m in matches)
        return found

    def check_inputs(self) -> None:
        """Verify the schema and every referenced data file exist."""
        data = self.resolve(self.data_dir)
        if not data.is_dir():
            raise ConfigurationError(f"data directory not found: {data}")
        for g in self.groups:
            if not self.group_schema_path(g).exists():
                raise ConfigurationError(f"schema file not found: {self.group_schema_path(g)}")
            self.group_files(g)

    def with_seed(self, seed: int) -> "RunConfig":
        self.seed = int(seed)
        self.train.seed = int(seed)
        return self


def _section(cls, d, name):
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigurationError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return cls(**d)


# defaults filled in per architecture when the config leaves them out
ARCH_DEFAULTS = {
    "skab": {"seed": 125, "k": 8.0, "train": {"epochs": 150, "batch_size": 64, "amsgrad": False}},
    "industrial": {"seed": 42, "k": 10.0, "train": {"epochs": 100, "batch_size": 32, "amsgrad": True}},
}

_TOP_KEYS = {
    "schema", "data_dir", "output_dir", "groups", "train_fraction", "window", "architecture",
    "arch_options", "train", "detector", "explainer", "evaluation", "seed", "synth",
}


def load_config(path, seed: int | None = None, output_dir: str | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    d = yaml.safe_load(path.read_text()) or {}
    if not isinstance(d, dict):
        raise ConfigurationError(f"{path}: config must be a mapping")
    unknown = set(d) - _TOP_KEYS
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
    if "groups" not in d:
        raise ConfigurationError(f"{path}: 'groups' is required")
    groups = [_section(FileGroup, g, "groups") for g in d["groups"]]
    window = dict(d.get("window") or {})
    unknown = set(window) - {"length", "stride", "label_rule"}
    if unknown:
        raise ConfigurationError(f"unknown keys in 'window': {sorted(unknown)}")
    architecture = d.get("architecture", "skab")
    if architecture not in ARCH_DEFAULTS:
        raise ConfigurationError(f"architecture must be one of {ARCHITECTURES}")
    defaults = ARCH_DEFAULTS[architecture]
    run_seed = int(d.get("seed", defaults["seed"]))
    train = {**defaults["train"], **dict(d.get("train") or {})}
    train.setdefault("seed", run_seed)
    detector = dict(d.get("detector") or {})
    evaluation = dict(d.get("evaluation") or {})
    for name, sec, keys in (("detector", detector, {"k"}), ("evaluation", evaluation, {"epsilon"})):
        if set(sec) - keys:
            raise ConfigurationError(f"unknown keys in {name!r}: {sorted(set(sec) - keys)}")
    cfg = RunConfig(
        groups=groups,
        base_dir=path.parent,
        schema=d.get("schema", "schema.yaml"),
        data_dir=d.get("data_dir", "."),
        output_dir=d.get("output_dir", "run"),
        train_fraction=float(d.get("train_fraction", 0.8)),
        window_length=int(window.get("length", 64)),
        window_stride=int(window.get("stride", 1)),
        label_rule=str(window.get("label_rule", "any")),
        architecture=architecture,
        arch_options=dict(d.get("arch_options") or {}),
        train=_section(TrainConfig, train, "train"),
        k=float(detector.get("k", defaults["k"])),
        explainer=_section(ExplainerSettings, d.get("explainer"), "explainer"),
        epsilon=float(evaluation.get("epsilon", 0.005)),
        seed=run_seed,
        synth=SynthConfig.from_dict(d.get("synth")),
    )
    if seed is not None:
        cfg.with_seed(seed)
    if output_dir is not None:
        cfg.output_dir = str(Path(output_dir).absolute())
    return cfg
