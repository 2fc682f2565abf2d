"""Workspace configuration: one file drives every pipeline stage.

The file is JSON or YAML (by extension) with optional sections ``fom``,
``signals``, ``pod``, ``rom``, ``closure`` and ``train`` plus top-level
``workspace`` and ``seed``. Missing keys take their defaults; unknown keys are
rejected. ``--set section.key=value`` overrides apply on top, with values
parsed as YAML scalars or lists (``train.epochs=50``, ``rom.ridge_grid=[1e-6]``).

A relative ``workspace`` is resolved against the config file's directory.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import yaml

from .arrays import read_json, write_json
from .errors import ValidationError
from .fom import Grid1D, PhysicalParams
from .signals import SignalSpec
from .training import TrainConfig


@dataclass
class FomSection:
    diffusivity: float = 1e-3
    eta0: float = 0.5
    beta: float = 0.2
    channel_min: float = 0.25
    n_c: int = 256
    t_end: float = 64.0
    dt: float = 2e-4
    snap_every: float = 0.25

    def params(self) -> PhysicalParams:
        return PhysicalParams(self.diffusivity, self.eta0, self.beta, self.channel_min)

    def grid(self) -> Grid1D:
        return Grid1D(self.n_c)


@dataclass
class SignalsSection:
    mean_loc: float = 1.0
    mean_scale: float = 0.25
    amp_scale: float = 0.25
    n_trajectories: int = 20


@dataclass
class PodSection:
    n_T: int = 6
    n_u: int = 4
    energy_threshold: float = 0.95
    center: bool = False


@dataclass
class RomSection:
    ridge_grid: list = field(default_factory=lambda: [10.0**k for k in range(-8, -1)])
    cv_folds: int = 5
    dt: float = 0.05
    identity_basis: bool = False


@dataclass
class ClosureSection:
    hidden: list = field(default_factory=lambda: [64, 64])
    timescales: list = field(default_factory=lambda: [1.0, 4.0, 16.0, 64.0])


@dataclass
class TrainSection:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 500
    batch_size: int = 4
    rollout_length: int | None = None
    curriculum: bool = False
    curriculum_start: int = 16
    curriculum_every: int = 100
    clip_norm: float = 100.0
    split_fraction: float = 0.8
    segment_length: int = 16

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon, self.epochs,
                           self.batch_size, self.rollout_length, self.curriculum,
                           self.curriculum_start, self.curriculum_every, self.clip_norm, seed)


SECTIONS = {
    "fom": FomSection,
    "signals": SignalsSection,
    "pod": PodSection,
    "rom": RomSection,
    "closure": ClosureSection,
    "train": TrainSection,
}


@dataclass
class WorkspaceConfig:
    workspace: str = "workspace"
    seed: int = 0
    fom: FomSection = field(default_factory=FomSection)
    signals: SignalsSection = field(default_factory=SignalsSection)
    pod: PodSection = field(default_factory=PodSection)
    rom: RomSection = field(default_factory=RomSection)
    closure: ClosureSection = field(default_factory=ClosureSection)
    train: TrainSection = field(default_factory=TrainSection)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    @property
    def root(self) -> Path:
        path = Path(self.workspace)
        return path if path.is_absolute() else self.base_dir / path

    def signal_spec(self) -> SignalSpec:
        s = self.signals
        return SignalSpec(self.seed, s.mean_loc, s.mean_scale, s.amp_scale)

    def to_json(self) -> dict:
        out = {"workspace": self.workspace, "seed": self.seed}
        for name in SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        return out

    def validate(self) -> "WorkspaceConfig":
        """Run the owning modules' checks plus the pipeline-level ones."""
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")
        self.fom.params()
        self.fom.grid()
        self.signal_spec()
        self.train.train_config(self.seed)
        f = self.fom
        for name in ("dt", "snap_every"):
            if not getattr(f, name) > 0:
                raise ValidationError(f"fom.{name} must be positive")
        if f.t_end < 0:
            raise ValidationError("fom.t_end must be non-negative")
        if self.signals.n_trajectories < 1:
            raise ValidationError("signals.n_trajectories must be at least 1")
        if self.pod.n_T < 1 or self.pod.n_u < 1:
            raise ValidationError("pod.n_T and pod.n_u must be at least 1")
        if not 0 < self.pod.energy_threshold <= 1:
            raise ValidationError("pod.energy_threshold must lie in (0, 1]")
        r = self.rom
        if not r.ridge_grid or any(not (isinstance(v, (int, float)) and v >= 0)
                                   for v in r.ridge_grid):
            raise ValidationError("rom.ridge_grid must be a non-empty list of non-negative numbers")
        if r.cv_folds < 2:
            raise ValidationError("rom.cv_folds must be at least 2")
        if not r.dt > 0:
            raise ValidationError("rom.dt must be positive")
        c = self.closure
        if any(int(w) < 1 for w in c.hidden):
            raise ValidationError("closure.hidden widths must be positive")
        if any(not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v))
               for v in c.timescales):
            raise ValidationError("closure.timescales must be positive numbers")
        if not 0 < self.train.split_fraction < 1:
            raise ValidationError("train.split_fraction must lie strictly between 0 and 1")
        if self.train.segment_length < 1:
            raise ValidationError("train.segment_length must be at least 1")
        return self


def _number(value):
    # YAML 1.1 reads exponent literals without a dot ("1e-3") as strings
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def _coerce(value, default, where: str):
    """Check a raw value against the type of its default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"{where} must be true or false, got {value!r}")
        return value
    if default is None and value is None:
        return None
    if isinstance(default, int) or default is None:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ValidationError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        value = _number(value)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ValidationError(f"{where} must be a list, got {value!r}")
        return [_number(v) for v in value]
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValidationError(f"{where} must be a string, got {value!r}")
        return value
    return value


def _build_section(cls, payload, name: str):
    if payload is None:
        payload = {}
    if not isinstance(payload, dict):
        raise ValidationError(f"section '{name}' must be a mapping")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ValidationError(f"unknown key(s) in section '{name}': {', '.join(unknown)}")
    values = {k: _coerce(v, getattr(defaults, k), f"{name}.{k}") for k, v in payload.items()}
    return cls(**values)


def config_from_dict(payload: dict, base_dir: Path = Path(".")) -> WorkspaceConfig:
    if not isinstance(payload, dict):
        raise ValidationError("configuration must be a mapping at the top level")
    known = {"workspace", "seed", *SECTIONS}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ValidationError(f"unknown top-level key(s): {', '.join(unknown)}")
    sections = {name: _build_section(cls, payload.get(name), name) for name, cls in SECTIONS.items()}
    cfg = WorkspaceConfig(
        workspace=_coerce(payload.get("workspace", "workspace"), "", "workspace"),
        seed=_coerce(payload.get("seed", 0), 0, "seed"),
        base_dir=base_dir, **sections)
    return cfg.validate()


def parse_override(text: str) -> tuple[list[str], object]:
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ValidationError(f"override must look like key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except ValueError:
        try:
            value = yaml.safe_load(raw) if raw.strip() else ""
        except yaml.YAMLError as exc:
            raise ValidationError(f"cannot parse value in override {text!r}: {exc}") from None
    return key.strip().split("."), value


def apply_overrides(payload: dict, overrides: Sequence[str]) -> dict:
    payload = {k: (dict(v) if isinstance(v, dict) else v) for k, v in payload.items()}
    for text in overrides:
        path, value = parse_override(text)
        if len(path) == 1:
            payload[path[0]] = value
        elif len(path) == 2:
            section = payload.setdefault(path[0], {})
            if not isinstance(section, dict):
                raise ValidationError(f"'{path[0]}' is not a section")
            section[path[1]] = value
        else:
            raise ValidationError(f"override key {'.'.join(path)!r} nests too deeply")
    return payload


def load_config(path: str | Path | None, overrides: Sequence[str] = (),
                seed: int | None = None) -> WorkspaceConfig:
    """Read a config file (or defaults when ``path`` is None) and apply overrides."""
    if path is None:
        payload, base = {}, Path.cwd()
    else:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        text = path.read_text()
        try:
            payload = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else \
                read_json(path)
        except (yaml.YAMLError, ValueError) as exc:
            raise ValidationError(f"cannot parse config file {path}: {exc}") from None
        payload = payload or {}
        base = path.resolve().parent
    payload = apply_overrides(payload, overrides)
    if seed is not None:
        payload["seed"] = seed
    return config_from_dict(payload, base)


def snapshot_config(directory: Path, cfg: WorkspaceConfig) -> None:
    """Record the effective configuration next to a stage's outputs."""
    write_json(Path(directory) / "config.json", cfg.to_json())
