"""Run configuration: one flat JSON-serializable record drives every command.

Precedence: built-in defaults < config file (--config) < explicit CLI flags.
The fully resolved config is embedded in every checkpoint and metrics header
so a run is reproducible from its own artifacts.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .masking import STRATEGIES
from .msm import SCALE_MODES, VARIANTS
from .synth import SynthConfig


@dataclass
class RunConfig:
    seed: int = 0
    # pretraining objective
    variant: str = "w2v-bert"
    strategy: str = "high"
    mask_fraction: float = 0.40
    context: int = 10
    scale_mode: str = "none"
    frame_participation: float = 0.1
    steps: int = 1000
    batch_size: int = 8
    # model dims
    dim: int = 128
    codebook_size: int = 64
    codebook_dim: int = 64
    heads: int = 4
    context_blocks: int = 2
    second_context_blocks: int = 2
    conv_channels: int = 32
    ffn_mult: int = 4
    max_frames: int = 512
    conv_subblock: bool = True
    # losses / quantizer
    n_distractors: int = 10
    kappa: float = 0.1
    div_weight: float = 0.1
    tau_start: float = 2.0
    tau_end: float = 0.5
    gumbel_noise: bool = True
    diversity_masked_only: bool = True
    max_crop_frames: int = 0
    # optimizer
    peak_lr: float = 1e-3
    warmup_steps: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    # features / confidence
    normalize_features: bool = True
    confidence_excludes_blank: bool = False
    # scorer model
    scorer_dim: int = 128
    scorer_heads: int = 4
    scorer_blocks: int = 2
    # inputs
    corpus: str = ""
    scorer_ckpt: str = ""
    confidence_cache: str = ""
    msm_ckpt: str = ""
    probe_corpus: str = ""
    probe_steps: int = 500
    # synthesis
    label_count: int = 8
    synth_count: int = 200
    synth_duration_s: tuple[float, float] = (1.0, 4.0)
    synth_segment_ms: tuple[int, int] = (50, 300)
    synth_domains: dict = field(default_factory=lambda: {"clean": 1.0})
    synth_snr_db: dict = field(default_factory=lambda: {"clean": 20.0, "shifted": 5.0})
    synth_freq_shift_hz: dict = field(default_factory=lambda: {"clean": 0.0, "shifted": 120.0})
    synth_inline: bool = False
    # analysis / sweeps
    plans_per_utt: int = 50
    sweep_fractions: tuple[float, ...] = (0.30, 0.40, 0.50)
    sweep_strategies: tuple[str, ...] = ("random", "high")
    # logging
    log_every: int = 1
    ckpt_every: int = 0
    log_timing: bool = False

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.scale_mode not in SCALE_MODES:
            raise ConfigError(f"scale_mode must be one of {SCALE_MODES}, got {self.scale_mode!r}")
        if not (0.0 < self.mask_fraction <= 1.0):
            raise ConfigError(f"mask_fraction must be in (0, 1], got {self.mask_fraction}")
        if not (0.0 <= self.frame_participation <= 1.0):
            raise ConfigError(f"frame_participation must be in [0, 1], got {self.frame_participation}")
        if self.context < 1:
            raise ConfigError(f"context must be >= 1, got {self.context}")
        if self.label_count < 2:
            raise ConfigError(f"label_count must be >= 2, got {self.label_count}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        for frac in self.sweep_fractions:
            if not (0.0 < frac <= 1.0):
                raise ConfigError(f"sweep fraction {frac} outside (0, 1]")
        for strat in self.sweep_strategies:
            if strat not in STRATEGIES:
                raise ConfigError(f"sweep strategy {strat!r} unknown")

    def require_paths(self, *names: str):
        for name in names:
            value = getattr(self, name)
            if not value:
                raise ConfigError(f"config field {name!r} is required for this command")
            if not Path(value).exists():
                raise ConfigError(f"{name} path does not exist: {value}")

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            label_count=self.label_count,
            count=self.synth_count,
            duration_range_s=tuple(self.synth_duration_s),
            segment_ms=tuple(self.synth_segment_ms),
            domain_weights=dict(self.synth_domains),
            snr_db=dict(self.synth_snr_db),
            freq_shift_hz=dict(self.synth_freq_shift_hz),
        )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_TUPLE_FIELDS = {"synth_duration_s", "synth_segment_ms", "sweep_fractions", "sweep_strategies"}


def config_from_dict(values: dict) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    coerced = {k: tuple(v) if k in _TUPLE_FIELDS else v for k, v in values.items()}
    return RunConfig(**coerced)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        values = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return config_from_dict(values)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Return a copy with non-None override values applied."""
    values = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in values:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return config_from_dict(values)
