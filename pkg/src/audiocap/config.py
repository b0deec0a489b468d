"""Pipeline configuration: TOML file, presets, strict validation.

Config files use TOML sections mirroring the dataclasses below.  Unknown keys
are rejected rather than ignored, so typos fail fast.  ``preset`` selects a
hyperparameter family ("desk" for laptop-scale runs, "paper" for the
full-scale reference values); explicit ``[train]`` / ``[clap_train]`` keys
override the preset.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .training import TrainConfig

AUTH_TOKEN_ENV = "AUDIOCAP_TRANSLATE_TOKEN"


class ConfigError(Exception):
    """Invalid or unknown configuration."""


@dataclass
class PathsConfig:
    manifest: str = ""
    work_dir: str = "runs"


@dataclass
class ModelConfig:
    enc_dim: int = 24
    enc_layers: int = 1
    enc_heads: int = 2
    enc_ff: int = 48
    dec_dim: int = 64
    dec_layers: int = 2
    dec_heads: int = 4
    dec_ff: int = 128
    proj_hidden: int = 128
    downsample: int = 5
    lora_rank: int = 8
    lora_alpha: float = 16.0
    train_head: bool = True
    prompt: str = "Describe the audio you hear"


@dataclass
class ClapModelConfig:
    d_model: int = 32
    d_clap: int = 24
    audio_layers: int = 1
    text_layers: int = 1
    n_heads: int = 2
    d_ff: int = 64


@dataclass
class DecodingConfig:
    beam_sizes: list[int] = field(default_factory=lambda: [2, 3, 4, 5, 6, 7, 8])
    beam_size: int = 4  # single-beam baseline
    temperature: float = 0.5
    top_p: float = 0.95
    max_len: int = 20


@dataclass
class AugmentationConfig:
    client: str = "stub"
    endpoint: str = ""
    pivot_lang: str = "zh"
    timeout_s: float = 10.0
    max_retries: int = 3
    concurrency: int = 1


@dataclass
class MetricsConfig:
    fluency_threshold: float = 0.9
    fluency_penalty: float = 0.1
    oracle_metric: str = "fense"  # "fense" or "meteor"


# Training presets.  "paper" mirrors the reference hyperparameters
# (pre-training 100k updates at peak 1e-4, CLAP at 5e-5 for 15 epochs);
# "paper_finetune" is the 10-epoch 8e-6 fine-tuning stage; "desk" shrinks
# everything to minutes on one CPU.
TRAIN_PRESETS: dict[str, dict] = {
    "paper": dict(
        batch_size=16, peak_lr=1e-4, total_updates=100_000, warmup=1000,
        schedule="linear", validate_every=500,
    ),
    "paper_finetune": dict(
        batch_size=4, peak_lr=8e-6, total_updates=10_000, warmup=1000,
        schedule="linear", validate_every=500,
    ),
    "desk": dict(
        batch_size=16, peak_lr=3e-3, total_updates=1500, warmup=75,
        schedule="linear", validate_every=250,
    ),
}

CLAP_PRESETS: dict[str, dict] = {
    "paper": dict(
        batch_size=128, peak_lr=5e-5, schedule="cosine",
        warmup_epochs=2, total_epochs=15, validate_every=1,
    ),
    "desk": dict(
        batch_size=16, peak_lr=3e-3, schedule="cosine",
        warmup_epochs=10, total_epochs=120, validate_every=1,
    ),
}


@dataclass
class PipelineConfig:
    seed: int = 0
    preset: str = "desk"
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    clap_model: ClapModelConfig = field(default_factory=ClapModelConfig)
    train_overrides: dict = field(default_factory=dict)
    clap_train_overrides: dict = field(default_factory=dict)
    decoding: DecodingConfig = field(default_factory=DecodingConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def train_config(self) -> TrainConfig:
        if self.preset not in TRAIN_PRESETS:
            raise ConfigError(
                f"unknown preset {self.preset!r}; expected one of {sorted(TRAIN_PRESETS)}"
            )
        base = dict(TRAIN_PRESETS[self.preset])
        base.update(self.train_overrides)
        base.setdefault("seed", self.seed)
        try:
            return TrainConfig(**base)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [train] settings: {exc}") from exc

    def clap_train_config(self) -> TrainConfig:
        preset = self.preset if self.preset in CLAP_PRESETS else "desk"
        base = dict(CLAP_PRESETS[preset])
        base.update(self.clap_train_overrides)
        base.setdefault("seed", self.seed)
        try:
            return TrainConfig(**base)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [clap_train] settings: {exc}") from exc

    def translation_auth_token(self) -> str:
        return os.environ.get(AUTH_TOKEN_ENV, "")


def _build_section(cls, data: dict, section: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] settings: {exc}") from exc


_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def _check_train_overrides(data: dict, section: str) -> dict:
    unknown = set(data) - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    return dict(data)


def load_pipeline_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Parse a TOML config file and apply CLI-level overrides on top."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc

    known_sections = {
        "paths", "model", "clap_model", "train", "clap_train",
        "decoding", "augmentation", "metrics",
    }
    known_scalars = {"seed", "preset"}
    unknown = set(raw) - known_sections - known_scalars
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")

    cfg = PipelineConfig(
        seed=int(raw.get("seed", 0)),
        preset=str(raw.get("preset", "desk")),
        paths=_build_section(PathsConfig, raw.get("paths", {}), "paths"),
        model=_build_section(ModelConfig, raw.get("model", {}), "model"),
        clap_model=_build_section(ClapModelConfig, raw.get("clap_model", {}), "clap_model"),
        train_overrides=_check_train_overrides(raw.get("train", {}), "train"),
        clap_train_overrides=_check_train_overrides(raw.get("clap_train", {}), "clap_train"),
        decoding=_build_section(DecodingConfig, raw.get("decoding", {}), "decoding"),
        augmentation=_build_section(AugmentationConfig, raw.get("augmentation", {}), "augmentation"),
        metrics=_build_section(MetricsConfig, raw.get("metrics", {}), "metrics"),
    )
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "seed":
            cfg.seed = int(value)
        elif key == "preset":
            cfg.preset = str(value)
        elif key == "manifest":
            cfg.paths.manifest = str(value)
        elif key == "work_dir":
            cfg.paths.work_dir = str(value)
        else:
            raise ConfigError(f"unknown override {key!r}")
    if cfg.preset not in TRAIN_PRESETS:
        raise ConfigError(
            f"unknown preset {cfg.preset!r}; expected one of {sorted(TRAIN_PRESETS)}"
        )
    if cfg.decoding.beam_sizes != sorted(set(cfg.decoding.beam_sizes)):
        raise ConfigError("decoding.beam_sizes must be strictly increasing and unique")
    return cfg
