"""Run configuration: flat ``section.key = value`` text files with presets.

Example::

    preset = fixture
    data.source = runs/fixture/source
    data.target = runs/fixture/target
    tta.n = 10

Lines starting with ``#`` are comments. ``preset`` (optional, first) selects a
set of defaults; every other key overrides one field. The environment variable
``CT_SFDA_SEED`` overrides ``run.seed``.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import get_type_hints

from .adapt import StageSchedule
from .datamodel import ReshapeSpec, make_reshape_spec
from .ingest import ShiftConfig
from .losses import AdaptConfig
from .tta import TTAConfig

SEED_ENV = "CT_SFDA_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    source: str = ""
    target: str = ""
    # multi-scenario mode: domains live in <root>/<id>; scenarios "0-1, 1-0, ..."
    root: str = ""
    scenarios: tuple[str, ...] = ()
    test_fraction: float = 0.3
    # synthetic pair, used when no paths are given
    classes: int = 3
    n_per_class: int = 200
    channels: int = 1
    length: int = 240


@dataclass(frozen=True)
class ShiftSection:
    # default nontrivial shift of the synthetic fixture
    amplitude: float = 0.5
    warp: float = 0.0
    noise: float = 0.2
    offset: float = 0.1


@dataclass(frozen=True)
class ReshapeSection:
    height: int = 16
    width: int = 16


@dataclass(frozen=True)
class ModelSection:
    reconstructor: str = "unet"   # unet | ae
    warp_block: str = "ae"        # ae | unet
    unet_depth: int = 3
    unet_channels: int = 16
    warp_hidden: int = 16
    codebook_size: int = 32
    code_dim: int = 8
    backbone_widths: tuple[int, ...] = (64, 128, 128)
    kernel_size: int = 8
    dropout: float = 0.2


@dataclass(frozen=True)
class ScheduleSection:
    stage1_lr: float = 5e-3
    stage1_epochs: int = 8
    stage2_lr: float = 2e-3
    stage2_epochs: int = 20
    stage3_lr: float = 5e-3
    stage3_epochs: int = 8
    batch_size: int = 32


@dataclass(frozen=True)
class AdaptSection:
    lam: float = 0.1
    q: float = 2.0
    codebook_weight: float = 1.0
    commitment_weight: float = 0.25


@dataclass(frozen=True)
class TTASection:
    delta: float = 0.001
    n: int = 10
    weighting: str = "cosine"


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "runs/default"
    name: str = "scenario"


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    shift: ShiftSection = field(default_factory=ShiftSection)
    reshape: ReshapeSection = field(default_factory=ReshapeSection)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    tta: TTASection = field(default_factory=TTASection)
    run: RunSection = field(default_factory=RunSection)

    # -- derived objects -------------------------------------------------
    def reshape_spec(self, d: int | None = None, length: int | None = None) -> ReshapeSpec:
        return make_reshape_spec(d or self.data.channels, length or self.data.length,
                                 self.reshape.height, self.reshape.width)

    def stage_schedule(self) -> StageSchedule:
        s = self.schedule
        return StageSchedule((s.stage1_lr, s.stage1_epochs), (s.stage2_lr, s.stage2_epochs),
                             (s.stage3_lr, s.stage3_epochs), s.batch_size)

    def adapt_config(self) -> AdaptConfig:
        a, s = self.adapt, self.schedule
        return AdaptConfig(lam=a.lam, q=a.q, learning_rate=s.stage3_lr, epochs=s.stage3_epochs,
                           batch_size=s.batch_size, codebook_weight=a.codebook_weight,
                           commitment_weight=a.commitment_weight)

    def tta_config(self) -> TTAConfig:
        return TTAConfig(self.tta.delta, self.tta.n, self.tta.weighting)

    def shift_config(self) -> ShiftConfig:
        s = self.shift
        return ShiftConfig(s.amplitude, s.warp, s.noise, s.offset, self.run.seed)

    @property
    def synthetic(self) -> bool:
        return not (self.data.source or self.data.target or self.data.root)

    def with_values(self, **flat) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``cfg.with_values(**{"tta.n": 3})``."""
        return apply_overrides(self, {k: v for k, v in flat.items()})

    # -- serialization ---------------------------------------------------
    def to_flat(self) -> dict[str, object]:
        flat = {}
        for sec in fields(self):
            for f in fields(getattr(self, sec.name)):
                flat[f"{sec.name}.{f.name}"] = getattr(getattr(self, sec.name), f.name)
        return flat

    def dumps(self) -> str:
        return "".join(f"{key} = {_format(val)}\n" for key, val in self.to_flat().items())

    def config_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def _format(val) -> str:
    if isinstance(val, tuple):
        return ", ".join(str(v) for v in val)
    if isinstance(val, bool):
        return "true" if val else "false"
    return repr(val) if isinstance(val, float) else str(val)


def _coerce(raw, typ, key):
    if not isinstance(raw, str):
        return tuple(raw) if typ in (tuple[int, ...], tuple[str, ...]) else raw
    raw = raw.strip()
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typ == tuple[int, ...]:
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if typ == tuple[str, ...]:
            return tuple(p.strip() for p in raw.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from exc
    raise ConfigError(f"{key}: unsupported type {typ}")


def apply_overrides(cfg: RunConfig, flat: dict) -> RunConfig:
    sections = {}
    for key, raw in flat.items():
        sec_name, _, name = key.partition(".")
        if not name or sec_name not in {f.name for f in fields(RunConfig)}:
            raise ConfigError(f"unknown config key {key!r}")
        sec = sections.get(sec_name, getattr(cfg, sec_name))
        hints = get_type_hints(type(sec))
        if name not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        sections[sec_name] = replace(sec, **{name: _coerce(raw, hints[name], key)})
    return replace(cfg, **sections)


def preset(name: str) -> RunConfig:
    try:
        overrides = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return apply_overrides(RunConfig(), overrides)


# Desk-scale synthetic world and the three benchmark layouts.
PRESETS: dict[str, dict] = {
    "fixture": {"model.backbone_widths": (32, 64, 64)},
    "mfd": {"data.channels": 1, "data.length": 5120, "reshape.height": 64, "reshape.width": 80,
            "model.kernel_size": 32, "tta.n": 10,
            "schedule.stage1_lr": 5e-3, "schedule.stage1_epochs": 8, "schedule.stage2_lr": 2e-3,
            "schedule.stage2_epochs": 20, "schedule.stage3_lr": 5e-3, "schedule.stage3_epochs": 8},
    "ssc": {"data.channels": 1, "data.length": 3000, "reshape.height": 48, "reshape.width": 64,
            "model.kernel_size": 25, "tta.n": 8,
            "schedule.stage1_lr": 5e-3, "schedule.stage1_epochs": 8, "schedule.stage2_lr": 2e-3,
            "schedule.stage2_epochs": 15, "schedule.stage3_lr": 5e-3, "schedule.stage3_epochs": 15},
    "ucihar": {"data.channels": 9, "data.length": 128, "reshape.height": 64, "reshape.width": 64,
               "model.kernel_size": 5, "tta.n": 3,
               "schedule.stage1_lr": 5e-4, "schedule.stage1_epochs": 15, "schedule.stage2_lr": 5e-3,
               "schedule.stage2_epochs": 15, "schedule.stage3_lr": 5e-3, "schedule.stage3_epochs": 8},
}


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    flat: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        flat[key.strip()] = value.strip()
    cfg = preset(flat.pop("preset")) if "preset" in flat else RunConfig()
    cfg = apply_overrides(cfg, flat)
    if base_dir is not None:
        cfg = _resolve_paths(cfg, base_dir)
    return _env_overrides(cfg)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), base_dir=path.parent)


def _resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    def fix(p: str) -> str:
        return p if not p or os.path.isabs(p) else str((base / p).resolve())
    data = replace(cfg.data, source=fix(cfg.data.source), target=fix(cfg.data.target), root=fix(cfg.data.root))
    return replace(cfg, data=data, run=replace(cfg.run, out=fix(cfg.run.out)))


def _env_overrides(cfg: RunConfig) -> RunConfig:
    seed = os.environ.get(SEED_ENV)
    if seed is None:
        return cfg
    try:
        return replace(cfg, run=replace(cfg.run, seed=int(seed)))
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from None


def validate(cfg: RunConfig) -> RunConfig:
    """Build every derived object once so bad values surface as ConfigError."""
    try:
        cfg.stage_schedule()
        cfg.adapt_config()
        cfg.tta_config()
        cfg.shift_config()
        cfg.reshape_spec()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.model.reconstructor not in ("unet", "ae") or cfg.model.warp_block not in ("unet", "ae"):
        raise ConfigError("model.reconstructor and model.warp_block must be 'unet' or 'ae'")
    if bool(cfg.data.source) != bool(cfg.data.target):
        raise ConfigError("data.source and data.target must be given together")
    if cfg.data.root and not cfg.data.scenarios:
        raise ConfigError("data.root requires data.scenarios")
    return cfg
