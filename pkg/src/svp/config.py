"""Run configuration: typed sections, strict JSON round-trip, dotted overrides.

A config file is a single JSON object with a ``schema_version`` field.
Unknown keys are rejected rather than ignored so that stale or misspelled
configs fail fast instead of silently drifting.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SCHEMA_VERSION = 1


class _Section:
    """Dict round-trip shared by the config sections (used standalone when a
    section is embedded in a checkpoint header)."""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict):
        cfg = _build(cls, data, path=cls.__name__ + ".")
        if hasattr(cfg, "validate"):
            cfg.validate()
        return cfg


@dataclass
class CorpusConfig(_Section):
    n_identities: int = 8
    emotions: tuple[str, ...] = ("neutral", "happy", "sad", "angry")
    intensities: tuple[int, ...] = (1, 2, 3)
    clips_per_cell: int = 4
    holdout_clips_per_cell: int = 1
    frames_per_clip: int = 32
    frame_rate: float = 25.0
    image_size: int = 32
    d_expr: int = 16
    d_audio: int = 64
    expr_noise: float = 0.02
    audio_noise: float = 0.05


@dataclass
class StyleEncoderConfig(_Section):
    d_style: int = 128
    layers: int = 2
    heads: int = 4
    d_expr: int = 16
    d_audio: int = 64
    dropout_prob_audio: float = 0.2
    dropout_prob_expr: float = 0.2
    positional_encoding: bool = True
    max_frames: int = 512

    def validate(self):
        if self.d_style % self.heads != 0:
            raise ConfigError(f"d_style={self.d_style} not divisible by heads={self.heads}")
        for name in ("dropout_prob_audio", "dropout_prob_expr"):
            p = getattr(self, name)
            if not (0.0 <= p < 1.0):
                raise ConfigError(f"{name}={p} outside [0, 1)")
        if self.dropout_prob_audio + self.dropout_prob_expr >= 1.0:
            raise ConfigError("modality dropout probabilities must sum to < 1 "
                              "(both modalities are never dropped together)")


@dataclass
class ContrastiveConfig(_Section):
    tau: float = 0.1
    batch_size: int = 8
    negatives_per_anchor: int = 8
    lr: float = 1e-4
    steps: int = 800
    sample_prior: bool = True  # False trains on the mean only (ablation)
    log_every: int = 10

    def validate(self):
        if self.tau <= 0:
            raise ConfigError(f"temperature tau must be > 0, got {self.tau}")
        if self.negatives_per_anchor < 1:
            raise ConfigError("need at least one negative per anchor")


@dataclass
class DiffusionConfig(_Section):
    image_size: int = 32
    base_width: int = 64
    channel_mult: tuple[int, ...] = (1, 2)
    heads: int = 4
    d_cond: int = 128
    codec: str = "identity"  # "identity" (pixel space) or "tiny_ae"
    ae_width: int = 32
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    sample_steps: int = 25
    frames: int = 8
    audio_window: int = 2
    kps_radius_px: int = 2
    style_tokens: int = 1
    attn_levels: str = "coarsest"  # spatial attention at "all" levels or "coarsest" only
    style_attn_levels: str = "all"  # style attention at "all" attention sites or "coarsest"
    temporal_positional_encoding: bool = True

    def validate(self):
        if self.codec not in ("identity", "tiny_ae"):
            raise ConfigError(f"unknown codec {self.codec!r}")
        if self.attn_levels not in ("all", "coarsest"):
            raise ConfigError(f"unknown attn_levels {self.attn_levels!r}")
        if self.style_attn_levels not in ("all", "coarsest"):
            raise ConfigError(f"unknown style_attn_levels {self.style_attn_levels!r}")
        if self.style_tokens < 1:
            raise ConfigError("style_tokens must be >= 1")
        if self.timesteps < 2:
            raise ConfigError("timesteps must be >= 2")
        if not (0 < self.beta_start < self.beta_end < 1):
            raise ConfigError("need 0 < beta_start < beta_end < 1")
        if self.sample_steps < 1:
            raise ConfigError("sample_steps must be >= 1")


@dataclass
class StageConfig(_Section):
    steps: int = 2000
    lr: float = 1e-4
    batch: int = 8  # frames (stage 1) or clips (stages 2 and 3)
    log_every: int = 50
    checkpoint_every: int = 0  # 0 = only at end


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    threads: int = 1
    out_root: str = "runs"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    style_encoder: StyleEncoderConfig = field(default_factory=StyleEncoderConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    stage1: StageConfig = field(default_factory=lambda: StageConfig(steps=2000, batch=8))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(steps=2000, batch=2))
    stage3: StageConfig = field(default_factory=lambda: StageConfig(steps=1000, batch=2))
    stage3_deterministic_style: bool = False

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {self.schema_version} "
                              f"!= supported {SCHEMA_VERSION}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        self.style_encoder.validate()
        self.contrastive.validate()
        self.diffusion.validate()
        if self.style_encoder.d_expr != self.corpus.d_expr:
            raise ConfigError("style_encoder.d_expr must match corpus.d_expr")
        if self.style_encoder.d_audio != self.corpus.d_audio:
            raise ConfigError("style_encoder.d_audio must match corpus.d_audio")
        if self.diffusion.image_size != self.corpus.image_size:
            raise ConfigError("diffusion.image_size must match corpus.image_size")
        if self.diffusion.d_cond != self.style_encoder.d_style:
            raise ConfigError("diffusion.d_cond must match style_encoder.d_style")
        if self.diffusion.frames > self.corpus.frames_per_clip:
            raise ConfigError("diffusion.frames cannot exceed corpus.frames_per_clip")
        if self.corpus.holdout_clips_per_cell >= self.corpus.clips_per_cell:
            raise ConfigError("holdout_clips_per_cell must leave at least one training clip")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = _build(cls, data, path="")
        cfg.validate()
        return cfg

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(data)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_json(p.read_text())


def _build(cls, data: dict, path: str):
    """Construct a dataclass from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object at {path or '<root>'}, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {path + key!r}")
        ftype = fields[key].type
        if dataclasses.is_dataclass(_resolve(ftype)):
            kwargs[key] = _build(_resolve(ftype), value, path=f"{path}{key}.")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "CorpusConfig": CorpusConfig,
    "StyleEncoderConfig": StyleEncoderConfig,
    "ContrastiveConfig": ContrastiveConfig,
    "DiffusionConfig": DiffusionConfig,
    "StageConfig": StageConfig,
}


def _resolve(ftype):
    # dataclass field types are strings under `from __future__ import annotations`
    if isinstance(ftype, str):
        return _SECTION_TYPES.get(ftype, ftype)
    return ftype


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides to a raw config dict in place.

    Values are parsed as JSON literals where possible (so ``=8`` is an int
    and ``=true`` a bool) and fall back to plain strings.
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = data
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[keys[-1]] = value
    return data
