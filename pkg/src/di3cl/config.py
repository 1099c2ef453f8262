"""Line-oriented run configuration.

Files hold ``section.key = value`` lines; ``#`` starts a comment and
blank lines are skipped. Every key has a typed default; unknown sections
or keys, malformed lines, and out-of-range values raise ``ConfigError``
naming the offender. Command-line overrides are applied after the file,
so they win.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, fields, replace
from typing import get_type_hints

from .datapipe import SynthConfig
from .downstream import FinetuneConfig
from .encoder import PRESETS
from .errors import ConfigError
from .geometry import AugmentConfig
from .losses import LossConfig
from .pretrain import PretrainConfig

_LINE = re.compile(
    r"^\s*([a-z_][a-z0-9_]*)\.([a-z_][a-z0-9_]*)\s*=\s*(.*?)\s*$"
)
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclass(frozen=True)
class RunSection:
    """Workflow wiring: where to write, which preset, which artifacts."""

    dir: str = ""  # run directory; falls back to $DI3CL_RUN_DIR, then ./runs/<mode>
    preset: str = "tiny"
    log_every: int = 50
    resume: bool = True
    init: str = "pretrained"  # trunk init for finetune: "pretrained" or "random"
    checkpoint: str = ""  # pre-training checkpoint consumed by finetune
    model: str = ""  # segmentation model consumed by evaluate / infer-scene
    scene: str = ""  # scene raster consumed by infer-scene

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(
                f"run.preset: unknown preset {self.preset!r}, "
                f"expected one of {sorted(PRESETS)}"
            )
        if self.init not in ("pretrained", "random"):
            raise ConfigError(
                f"run.init: must be 'pretrained' or 'random', got {self.init!r}"
            )
        if self.log_every < 0:
            raise ConfigError(f"run.log_every: must be >= 0, got {self.log_every}")


@dataclass(frozen=True)
class DataSection:
    """Dataset sources. Empty paths fall back to synthetic data."""

    root: str = ""  # unlabeled patch dir (pretrain) or images/+masks/ dir (finetune)
    val_root: str = ""  # labeled validation dir for finetune/evaluate
    synth_count: int = 512  # synthetic patches for pretraining
    patch_size: int = 64
    train_count: int = 48  # synthetic labeled patches for finetune
    val_count: int = 24
    val_fraction: float = 0.2  # split used when root is labeled but val_root is empty
    seed: int = 7

    def validate(self) -> None:
        if self.synth_count < 1:
            raise ConfigError(f"data.synth_count: must be >= 1, got {self.synth_count}")
        if self.patch_size < 8:
            raise ConfigError(f"data.patch_size: must be >= 8, got {self.patch_size}")
        if self.train_count < 1 or self.val_count < 1:
            raise ConfigError("data.train_count and data.val_count must be >= 1")
        if not (0.0 < self.val_fraction < 1.0):
            raise ConfigError(
                f"data.val_fraction: must be in (0, 1), got {self.val_fraction}"
            )


@dataclass(frozen=True)
class SynthSection:
    """Synthetic scene generation; mirrors the generator knobs plus a
    scene count for the synth command."""

    scene_size: int = 512
    n_classes: int = 4
    region_count: int = 24
    speckle_looks: float = 4.0
    seed: int = 0
    scenes: int = 4

    def validate(self) -> None:
        self.to_synth_config().validate()
        if self.scenes < 1:
            raise ConfigError(f"synth.scenes: must be >= 1, got {self.scenes}")

    def to_synth_config(self, seed: int | None = None) -> SynthConfig:
        return SynthConfig(
            scene_size=self.scene_size,
            n_classes=self.n_classes,
            region_count=self.region_count,
            speckle_looks=self.speckle_looks,
            seed=self.seed if seed is None else seed,
        )


@dataclass(frozen=True)
class InferSection:
    window: int = 512
    stride: int = 100
    stem: str = "scene"

    def validate(self) -> None:
        if self.window < 1:
            raise ConfigError(f"infer.window: must be >= 1, got {self.window}")
        if not (1 <= self.stride <= self.window):
            raise ConfigError(
                f"infer.stride: must be in [1, window], got {self.stride}"
            )


SECTION_TYPES: dict[str, type] = {
    "run": RunSection,
    "data": DataSection,
    "synth": SynthSection,
    "augment": AugmentConfig,
    "loss": LossConfig,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "infer": InferSection,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection
    data: DataSection
    synth: SynthSection
    augment: AugmentConfig
    loss: LossConfig
    pretrain: PretrainConfig
    finetune: FinetuneConfig
    infer: InferSection

    def validate(self) -> None:
        for name in SECTION_TYPES:
            getattr(self, name).validate()


def _coerce(section: str, key: str, text: str, typ: type):
    try:
        if typ is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from None
    raise ConfigError(f"{section}.{key}: unsupported option type {typ!r}")


def parse_line(raw: str, lineno: int) -> tuple[str, str, str] | None:
    """Split one config line into (section, key, value); None for blank
    or comment-only lines."""
    text = raw.split("#", 1)[0]
    if not text.strip():
        return None
    match = _LINE.match(text)
    if match is None:
        raise ConfigError(
            f"line {lineno}: expected 'section.key = value', got {raw.strip()!r}"
        )
    return match.group(1), match.group(2), match.group(3)


def parse_config(
    path: str | None = None,
    overrides: list[tuple[str, str]] | None = None,
) -> RunConfig:
    """Build a validated :class:`RunConfig` from defaults, an optional
    file, and ``(dotted_key, value)`` override pairs, in that precedence."""
    settings: list[tuple[str, str, str]] = []
    if path is not None:
        try:
            lines = open(path).read().splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        for lineno, raw in enumerate(lines, 1):
            parsed = parse_line(raw, lineno)
            if parsed is not None:
                settings.append(parsed)
    for dotted, value in overrides or []:
        if dotted.count(".") != 1:
            raise ConfigError(f"override {dotted!r} is not of the form section.key")
        section, key = dotted.split(".")
        settings.append((section, key, value))

    field_types: dict[str, dict[str, type]] = {
        name: get_type_hints(typ) for name, typ in SECTION_TYPES.items()
    }
    sections = {name: typ() for name, typ in SECTION_TYPES.items()}
    for section, key, value in settings:
        if section not in SECTION_TYPES:
            raise ConfigError(
                f"unknown section {section!r}, expected one of {sorted(SECTION_TYPES)}"
            )
        if key not in field_types[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        coerced = _coerce(section, key, value, field_types[section][key])
        sections[section] = replace(sections[section], **{key: coerced})

    cfg = RunConfig(**sections)
    cfg.validate()
    return cfg


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def effective_config_text(cfg: RunConfig) -> str:
    """Render every key of every section in the file format, so the
    echoed file parses back to the same configuration."""
    lines = []
    for name in SECTION_TYPES:
        section = getattr(cfg, name)
        for f in fields(section):
            lines.append(f"{name}.{f.name} = {_format_value(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"
