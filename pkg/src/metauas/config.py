"""Run configuration: frozen dataclasses, YAML loading, flag overrides.

Unknown keys are rejected (typos should fail loudly, not silently fall back to
defaults). Flags win over file values; both win over defaults.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

ALIGN_MODES = ("soft", "hard", "none")
FUSION_MODES = ("concat", "add", "absdiff")
PROMPT_POLICIES = ("fixed-random", "pool-match", "best-match")
WEIGHT_SOURCES = ("torchvision", "random")  # or a filesystem path to a state dict


@dataclass(frozen=True)
class AugmentConfig:
    """Paired augmentation knobs.

    Geometric transforms are drawn independently for prompt and query; the
    change mask is warped with the query transform (nearest-neighbor, so it
    stays binary). Color jitter is drawn independently per image.
    """

    enabled: bool = True
    scale_range: tuple[float, float] = (0.9, 1.1)   # multiplicative, about center
    translate_px: int = 8                           # max |shift| per axis, pixels
    rotate_deg: float = 10.0                        # max |rotation|
    brightness: float = 0.2                         # factor drawn from 1 +- strength
    contrast: float = 0.2
    saturation: float = 0.2

    @staticmethod
    def identity() -> "AugmentConfig":
        """A config whose draws are always the identity transform."""
        return AugmentConfig(enabled=True, scale_range=(1.0, 1.0), translate_px=0,
                             rotate_deg=0.0, brightness=0.0, contrast=0.0, saturation=0.0)

    def validate(self) -> None:
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ConfigError(f"augment.scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.translate_px < 0 or self.rotate_deg < 0:
            raise ConfigError("augment translation/rotation bounds must be >= 0")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ConfigError(f"augment.{name} must be >= 0")


@dataclass(frozen=True)
class SynthConfig:
    """Change-pair synthesis parameters."""

    pair_size: int = 256                 # output H = W of every pair
    train_pairs: int = 2000
    val_pairs: int = 200
    p_local: float = 0.5                 # local texture change vs object-level change
    p_paste_within_object: float = 0.5   # paste vs disappear inside the object branch
    perlin_periods: tuple[int, ...] = (2, 4, 8, 16, 32)
    perlin_octaves: int = 2
    perlin_threshold: float = 0.5
    blend_range: tuple[float, float] = (0.2, 1.0)   # opacity; 0 is excluded by contract
    paste_count_range: tuple[int, int] = (1, 3)
    paste_scale_jitter: float = 0.3      # +-30% donor patch rescale
    split_ratio: float = 0.95            # fraction of source images assigned to train
    max_fg_fraction: float = 0.9         # masks with fg >= this * H * W are degenerate
    max_retries: int = 5                 # per-pair resamples before the pair is skipped
    inpainter: str = "naive"             # "naive" | "external:<cmd>" | "precomputed:<dir>"
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        if self.pair_size < 8:
            raise ConfigError(f"synth.pair_size must be >= 8, got {self.pair_size}")
        if not self.perlin_periods:
            raise ConfigError("synth.perlin_periods must be non-empty")
        for p in self.perlin_periods:
            if p < 1 or (p & (p - 1)) != 0:
                raise ConfigError(f"synth.perlin_periods must be powers of two, got {p}")
        if max(self.perlin_periods) > self.pair_size:
            raise ConfigError("synth.pair_size is smaller than the largest perlin period")
        if self.perlin_octaves < 1:
            raise ConfigError("synth.perlin_octaves must be >= 1")
        if not (0.0 <= self.p_local <= 1.0):
            raise ConfigError(f"synth.p_local must lie in [0, 1], got {self.p_local}")
        if not (0.0 <= self.p_paste_within_object <= 1.0):
            raise ConfigError("synth.p_paste_within_object must lie in [0, 1]")
        lo, hi = self.blend_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"synth.blend_range must satisfy 0 < lo <= hi <= 1, got {self.blend_range}")
        clo, chi = self.paste_count_range
        if clo < 1 or chi < clo:
            raise ConfigError(f"synth.paste_count_range must satisfy 1 <= lo <= hi, got {self.paste_count_range}")
        if not (0.0 <= self.paste_scale_jitter < 1.0):
            raise ConfigError("synth.paste_scale_jitter must lie in [0, 1)")
        if not (0.0 < self.split_ratio < 1.0):
            raise ConfigError(f"synth.split_ratio must lie in (0, 1), got {self.split_ratio}")
        if not (0.0 < self.max_fg_fraction <= 1.0):
            raise ConfigError("synth.max_fg_fraction must lie in (0, 1]")
        if self.train_pairs < 0 or self.val_pairs < 0:
            raise ConfigError("pair counts must be >= 0")
        if self.max_retries < 1:
            raise ConfigError("synth.max_retries must be >= 1")
        self.augment.validate()


@dataclass(frozen=True)
class ModelConfig:
    """Network architecture and prompt-alignment settings."""

    arch: str = "efficientnet_b4"        # encoder id: efficientnet_b4 | efficientnet_b6 | mobilenet_v2
    weights: str = "torchvision"         # "torchvision" | "random" | path to a state dict
    encoder_seed: int = 0                # used only when weights == "random"
    input_size: int = 256                # model input H = W; must be divisible by 32
    align: str = "soft"
    fusion: str = "concat"
    temperature: float = 1.0             # soft-alignment logit divisor; 1.0 = raw dot products
    decoder_width: int = 256             # widest decoder level; halves at each shallower level

    def validate(self) -> None:
        if self.align not in ALIGN_MODES:
            raise ConfigError(f"model.align must be one of {ALIGN_MODES}, got {self.align!r}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"model.fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.input_size % 32 != 0 or self.input_size <= 0:
            raise ConfigError(f"model.input_size must be a positive multiple of 32, got {self.input_size}")
        if self.temperature <= 0:
            raise ConfigError("model.temperature must be > 0")
        if self.decoder_width < 16 or self.decoder_width % 16 != 0:
            raise ConfigError("model.decoder_width must be a multiple of 16 (>= 16)")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. Defaults mirror the published recipe."""

    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 5e-4
    grad_clip: float = 10.0              # global grad-norm ceiling
    seed: int = 0
    device: str = "auto"                 # "auto" | "cpu" | "cuda"
    augment: AugmentConfig = field(default_factory=AugmentConfig)   # on-the-fly pair jitter
    cache_features: bool = False         # precompute frozen-encoder features (needs augment off)
    checkpoint_every: int = 1            # epochs between checkpoints
    log_every: int = 10                  # steps between loss-CSV rows
    num_workers: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("train.lr must be > 0 and train.weight_decay >= 0")
        if self.grad_clip <= 0:
            raise ConfigError("train.grad_clip must be > 0")
        if self.device not in ("auto", "cpu", "cuda"):
            raise ConfigError(f"train.device must be auto|cpu|cuda, got {self.device!r}")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("train.checkpoint_every and train.log_every must be >= 1")
        if self.num_workers < 0:
            raise ConfigError("train.num_workers must be >= 0")
        if self.cache_features and self.augment.enabled:
            raise ConfigError("train.cache_features requires train.augment.enabled: false "
                              "(cached frozen-encoder features cannot reflect per-step jitter)")
        self.augment.validate()


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation protocol settings."""

    policy: str = "fixed-random"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    fpr_cap: float = 0.3                 # PRO false-positive-rate integration cap
    pro_grid: int = 200                  # quantile threshold count for PRO
    batch_size: int = 8
    save_maps: bool = False              # also write per-image 16-bit PNG maps

    def validate(self) -> None:
        if self.policy not in PROMPT_POLICIES:
            raise ConfigError(f"eval.policy must be one of {PROMPT_POLICIES}, got {self.policy!r}")
        if not self.seeds:
            raise ConfigError("eval.seeds must be non-empty")
        if not (0.0 < self.fpr_cap <= 1.0):
            raise ConfigError(f"eval.fpr_cap must lie in (0, 1], got {self.fpr_cap}")
        if self.pro_grid < 2:
            raise ConfigError("eval.pro_grid must be >= 2")
        if self.batch_size < 1:
            raise ConfigError("eval.batch_size must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    """Top-level config with one section per pipeline stage."""

    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.synth.validate()
        self.model.validate()
        self.train.validate()
        self.eval.validate()


# ---------------------------------------------------------------------------
# dict <-> dataclass plumbing
# ---------------------------------------------------------------------------


def _build(cls, data: dict, path: str = ""):
    """Construct dataclass `cls` from a nested dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path or cls.__name__!r} must be a mapping, got {type(data).__name__}")
    spec = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(spec))
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigError(f"unknown config key(s){where}: {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        f = spec[name]
        sub = f"{path}.{name}" if path else name
        if is_dataclass(f.type) or (isinstance(f.type, str) and f.type in _NESTED):
            kwargs[name] = _build(_NESTED[f.type] if isinstance(f.type, str) else f.type, value, sub)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config section {path or cls.__name__}: {exc}") from exc


# `from __future__ import annotations` stringifies field types; map them back.
_NESTED = {
    "AugmentConfig": AugmentConfig,
    "SynthConfig": SynthConfig,
    "ModelConfig": ModelConfig,
    "TrainConfig": TrainConfig,
    "EvalConfig": EvalConfig,
}


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain-dict snapshot (tuples become lists, so it round-trips through YAML)."""
    def clean(obj):
        if isinstance(obj, tuple):
            return [clean(v) for v in obj]
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        return obj
    return clean(dataclasses.asdict(cfg))


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data or {})
    cfg.validate()
    return cfg


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply `section.key=value` overrides (values parsed as YAML scalars)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = [k for k in dotted.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"override has an empty key path: {item!r}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
        # pyyaml speaks YAML 1.1, where dotless exponents like 3e-4 stay strings
        if isinstance(value, str) and re.fullmatch(r"[+-]?\d+(\.\d*)?[eE][+-]?\d+", value):
            value = float(value)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {dotted!r} collides with a scalar value")
        node[keys[-1]] = value
    return data


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Load a YAML config file (optional) and apply flag overrides (flags win)."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {p}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config root must be a mapping: {p}")
        data = loaded
    if overrides:
        data = apply_overrides(data, list(overrides))
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))
