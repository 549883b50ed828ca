"""Run configuration: a flat, JSON-serialisable set of hyperparameters and paths."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "load_config", "ENV_OVERRIDES", "PRESETS"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    mode: str = "paired"  # paired | zero_shot

    # paths (relative paths resolve against the working directory)
    manifest: str | None = None
    out_dir: str = "runs/default"

    # sizes
    hidden: int = 64
    content_dim: int = 32
    timbre_dim: int = 256
    n_mels: int = 80
    sample_rate: int = 24000

    # encoders (kernel, layers)
    pitch_kernel: int = 5
    pitch_layers: int = 3
    content_kernel: int = 3
    content_layers: int = 2
    rhythm_kernel: int = 7
    rhythm_layers: int = 2

    # rhythm adaptor
    codebook_size: int = 6
    vq_decay: float = 0.99
    vq_freeze_step: int = 2000
    predictor_heads: int = 1
    predictor_window: float = 0.5
    predictor_dropout: float = 0.8
    rhythm_beta: float = 400.0
    rhythm_epsilon: float = 1e-8
    rhythm_sigma: float = 1.0

    # aligner
    aligner_layers: int = 2
    aligner_heads: int = 2
    aligner_window: float = 0.4
    aligner_dropout: float = 0.1
    ffn_kernel: int = 9
    guided_g: float = 0.1

    # diffusion decoder
    diffusion_steps: int = 4
    schedule: str = "vpsde"  # vpsde | linear
    beta_min: float = 0.1
    beta_max: float = 40.0
    linear_beta_start: float = 1e-4
    linear_beta_end: float = 0.06
    denoiser_layers: int = 20
    denoiser_hidden: int = 64

    # loss weights
    w_commit: float = 0.25
    w_rhythm: float = 1.0
    w_attn: float = 1.0
    w_mae: float = 1.0
    w_ssim: float = 1.0

    # optimisation
    steps: int = 2000
    batch_size: int = 4
    lr: float = 2e-4
    clip_norm: float = 1.0
    checkpoint_every: int = 500
    log_every: int = 1

    # ablations
    no_ra: bool = False
    no_cm: bool = False
    no_f0_skip: bool = False

    # evaluation
    griffin_lim_iters: int = 64

    def __post_init__(self):
        if self.mode not in ("paired", "zero_shot"):
            raise ConfigError(f"mode must be 'paired' or 'zero_shot', got {self.mode!r}")
        if self.schedule not in ("vpsde", "linear"):
            raise ConfigError(f"schedule must be 'vpsde' or 'linear', got {self.schedule!r}")
        for name in ("hidden", "content_dim", "n_mels", "steps", "batch_size", "diffusion_steps",
                     "denoiser_layers", "denoiser_hidden", "codebook_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.hidden % 2 or self.denoiser_hidden % 2:
            raise ConfigError("hidden sizes must be even (sinusoidal encodings)")
        for name, heads in (("predictor", self.predictor_heads), ("aligner", self.aligner_heads)):
            if self.hidden % heads:
                raise ConfigError(f"hidden {self.hidden} not divisible by {name} heads {heads}")
        for name in ("pitch_kernel", "content_kernel", "rhythm_kernel", "ffn_kernel"):
            if getattr(self, name) % 2 == 0:
                raise ConfigError(f"{name} must be odd")
        for name in ("predictor_dropout", "aligner_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def with_overrides(self, **kw) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **kw})


# Environment variables that override path-like fields.
ENV_OVERRIDES = {
    "STSCONV_MANIFEST": "manifest",
    "STSCONV_OUT_DIR": "out_dir",
    "STSCONV_SEED": "seed",
}

PRESETS = {
    "desk": {},
    "paper": {"hidden": 256, "denoiser_hidden": 256, "batch_size": 20, "steps": 200_000},
}


def load_config(path=None, preset: str = "desk", env=None, **overrides) -> RunConfig:
    """Build a config from a preset, an optional JSON file, env vars and keyword overrides.

    Later sources win: preset < file < environment < keywords.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
    data = dict(PRESETS[preset])
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        data.update(loaded)
    env = os.environ if env is None else env
    for var, key in ENV_OVERRIDES.items():
        if var in env:
            data[key] = int(env[var]) if key == "seed" else env[var]
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)
