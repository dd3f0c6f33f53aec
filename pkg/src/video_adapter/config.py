"""Run configuration: a strict ``[section]`` / ``key = value`` grammar with typed defaults.

Grammar: blank lines and ``#`` comments (whole-line or trailing) are ignored, ``[name]`` opens a
section, every other line must be ``key = value``. Lists are comma-separated. Keys outside a
section, unknown sections or keys, duplicate keys and values of the wrong type are errors that
name the offending line. Path keys are resolved against the config file's directory and must
exist at parse time; an empty path means "not given".

Every default is materialized in the parsed result, so ``serialize(cfg)`` is a complete,
self-describing echo and ``parse_text(serialize(cfg)) == cfg``.
"""

from __future__ import annotations

import dataclasses
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

_SECTION = re.compile(r"^\[([A-Za-z_][A-Za-z0-9_]*)\]$")
_ENTRY = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")


class ConfigError(ValueError):
    pass


def parse_sections(text: str) -> dict:
    """Split text into ``{section: ({key: (raw value, line)}, section line)}``; syntax checks only."""
    sections: dict = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        m = _SECTION.match(s)
        if m:
            name = m.group(1)
            if name in sections:
                raise ConfigError(f"line {lineno}: section [{name}] already opened on line {sections[name][1]}")
            sections[name] = ({}, lineno)
            current = name
            continue
        m = _ENTRY.match(s)
        if not m:
            raise ConfigError(f"line {lineno}: syntax error: expected '[section]' or 'key = value', got {s!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key {m.group(1)!r} outside any section")
        key, raw = m.group(1), m.group(2).strip()
        entries = sections[current][0]
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{current}] (first set on line {entries[key][1]})")
        entries[key] = (raw, lineno)
    return sections


def _path_field(default: str = ""):
    return field(default=default, metadata={"path": True})


# ------------------------------------------------------------------ sections

@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    output_dir: str = "runs"


@dataclass(frozen=True)
class ScheduleSection:
    num_steps: int = 100
    logsnr_min: float = -6.0
    logsnr_max: float = 8.0


@dataclass(frozen=True)
class ModelSection:
    width: int = 32
    blocks: int = 2
    temb_dim: int = 16
    cond_mode: str = "none"
    energy: bool = False
    precondition: str = "v"
    checkpoint: str = _path_field()


@dataclass(frozen=True)
class TrainSection:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    cond_dropout: float = 0.1
    optimizer: str = "adam"
    grad_clip: float = 1.0
    warmup_steps: int = 0


@dataclass(frozen=True)
class DataSection:
    grid: int = 16
    frames: int = 8
    channels: int = 1
    dynamics: tuple = ("bounce", "drift", "static")
    styles: tuple = (0,)
    style_weights: tuple = ()
    shape_size: int = 5
    count: int = 256
    seed: int = 0
    with_first_frame: bool = False
    with_edges: bool = False


@dataclass(frozen=True)
class CompositionSection:
    gamma: float = 0.2
    alpha: float = 2.0
    cutoff_fraction: float = 0.1
    mcmc_steps: int = 0
    mcmc_step_size: float = 0.1
    clip_denoised: bool = False


BENCHMARK_ROWS = ("adapter", "pretrained", "video_adapter", "cfg_mix", "finetune")


@dataclass(frozen=True)
class BenchmarkSection:
    seeds: tuple = (0, 1, 2)
    n_samples: int = 512
    rows: tuple = BENCHMARK_ROWS
    cfg_mix_weight: float = 0.5
    probe_seed: int = 1234
    probe_filters: int = 32
    share_pretrained: bool = True
    test_fraction: float = 0.1


@dataclass(frozen=True)
class ServiceSection:
    host: str = "127.0.0.1"
    port: int = 7878
    timeout: float = 30.0


# element types of tuple-valued keys
_TUPLE_ITEMS = {"dynamics": str, "styles": int, "style_weights": float, "seeds": int, "rows": str}


def _broad_default():
    return DataSection(styles=(0, 1, 2, 3), count=3000, seed=1)


def _adapt_default():
    return DataSection(styles=(3,), count=1500, seed=2)


def _adapter_model_default():
    return ModelSection(width=16, blocks=1)


def _adapter_train_default():
    return TrainSection(steps=800)


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    pretrained_model: ModelSection = field(default_factory=ModelSection)
    adapter_model: ModelSection = field(default_factory=_adapter_model_default)
    pretrained_train: TrainSection = field(default_factory=TrainSection)
    adapter_train: TrainSection = field(default_factory=_adapter_train_default)
    broad_data: DataSection = field(default_factory=_broad_default)
    adapt_data: DataSection = field(default_factory=_adapt_default)
    composition: CompositionSection = field(default_factory=CompositionSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    service: ServiceSection = field(default_factory=ServiceSection)

    def to_dict(self) -> dict:
        return {f.name: dataclasses.asdict(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def replace(self, section: str, **values) -> "RunConfig":
        """Copy with some keys of one section replaced (values are type-checked)."""
        sec = getattr(self, section)
        hints = typing.get_type_hints(type(sec))
        checked = {}
        for k, v in values.items():
            if k not in hints:
                raise ConfigError(f"unknown key {k!r} in [{section}]")
            checked[k] = _check_type(section, k, hints[k], v)
        return dataclasses.replace(self, **{section: dataclasses.replace(sec, **checked)})

    # ---- conversions into library objects

    def schedule_obj(self):
        from .core_math import make_schedule

        s = self.schedule
        return make_schedule(s.num_steps, s.logsnr_min, s.logsnr_max)

    def descriptor(self, which: str, input_shape, vocab_size: int):
        from .denoiser.arch import ArchitectureDescriptor

        m = getattr(self, f"{which}_model")
        return ArchitectureDescriptor(tuple(input_shape), m.width, m.blocks, m.temb_dim, vocab_size,
                                      m.cond_mode, m.energy, m.precondition)

    def train_config(self, which: str, seed: int):
        from .denoiser.train import TrainConfig

        t = getattr(self, f"{which}_train")
        return TrainConfig(t.steps, t.batch_size, t.lr, t.cond_dropout, seed, t.optimizer, t.grad_clip,
                           t.warmup_steps)

    def video_spec(self, which: str):
        from .worlds import ToyVideoSpec

        d = getattr(self, f"{which}_data")
        return ToyVideoSpec(d.grid, d.frames, d.channels, d.dynamics, d.styles, d.style_weights or None,
                            d.shape_size, d.count, d.seed, d.with_first_frame, d.with_edges)

    def composition_config(self):
        from .adapter import CompositionConfig

        c = self.composition
        return CompositionConfig(c.gamma, c.alpha, c.cutoff_fraction, c.mcmc_steps, c.mcmc_step_size)


_SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _is_path(cls, key: str) -> bool:
    return bool(cls.__dataclass_fields__[key].metadata.get("path"))


def _check_type(section: str, key: str, hint, value):
    where = f"[{section}] {key}"
    if hint is tuple:
        item = _TUPLE_ITEMS[key]
        if not isinstance(value, (tuple, list)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(_check_type(section, key, item, v) for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string")
    return value


def _coerce(hint, key: str, raw: str, lineno: int, section: str):
    def bad(what):
        return ConfigError(f"line {lineno}: [{section}] {key}: expected {what}, got {raw!r}")

    if hint is tuple:
        item = _TUPLE_ITEMS[key]
        parts = [p.strip() for p in raw.split(",")] if raw else []
        if any(not p for p in parts):
            raise bad("a comma-separated list")
        return tuple(_coerce(item, key, p, lineno, section) for p in parts)
    if hint is bool:
        if raw.lower() not in ("true", "false"):
            raise bad("true or false")
        return raw.lower() == "true"
    if hint is int:
        try:
            return int(raw)
        except ValueError:
            raise bad("an integer") from None
    if hint is float:
        try:
            return float(raw)
        except ValueError:
            raise bad("a number") from None
    return raw


def parse_text(text: str, base_dir: Optional[Path] = None) -> RunConfig:
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    built = {}
    for name, (entries, sec_line) in parse_sections(text).items():
        if name not in _SECTIONS:
            raise ConfigError(f"line {sec_line}: unknown section [{name}]")
        default = _SECTIONS[name].default_factory()
        cls = type(default)
        hints = typing.get_type_hints(cls)
        values = {}
        for key, (raw, lineno) in entries.items():
            if key not in hints:
                raise ConfigError(f"line {lineno}: unknown key {key!r} in [{name}]")
            val = _coerce(hints[key], key, raw, lineno, name)
            if _is_path(cls, key) and val:
                p = Path(val)
                p = (p if p.is_absolute() else base / p).resolve()
                if not p.exists():
                    raise ConfigError(f"line {lineno}: [{name}] {key}: path {str(p)!r} does not exist")
                val = str(p)
            values[key] = val
        built[name] = dataclasses.replace(default, **values)
    return RunConfig(**built)


def parse_config(path) -> RunConfig:
    path = Path(path)
    return parse_text(path.read_text(encoding="utf-8"), base_dir=path.parent)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def serialize(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        sec = getattr(cfg, f.name)
        lines.append(f"[{f.name}]")
        for sf in dataclasses.fields(sec):
            lines.append(f"{sf.name} = {_format(getattr(sec, sf.name))}")
        lines.append("")
    return "\n".join(lines)
