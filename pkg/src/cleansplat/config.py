"""Training configuration and its human-readable on-disk format.

The file format is flat ``key = value`` lines (``#`` comments allowed);
every field of :class:`TrainConfig` is a key.  Learning-rate defaults
follow the common splatting stack: per-view transient sets use 10x rates
for quaternions, scales, and RGB, while their means and opacities match
the static set.  Position learning rates are additionally multiplied by
the scene extent at train time.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import UsageError


@dataclass
class TrainConfig:
    # Schedule
    iterations: int = 30000
    warmup_steps: int = 500           # rendered at 1/downscale resolution
    warmup_downscale: int = 2
    seed: int = 0

    # Scene representation
    sh_degree: int = 3
    static_init_count: int = 2000     # random-init fallback when no seed points

    # Per-view transient sets
    distractors_enabled: bool = True
    k_distractors: int = 1000
    distractor_depth: float = 0.02    # camera-space plane depth at init
    distractor_opacity: float = 0.1
    distractor_delay: int = 0         # steps before transient sets update

    # Density control
    adc_view_period: int = 10         # per-view visits between transient ADC
    static_adc_period: int = 100      # global iterations between static ADC
    densify_start: int = 500
    densify_until: int = 15000        # clone/split stop; culling continues (transients)
    opacity_reset_period: int = 3000  # static set only
    opacity_reset_value: float = 0.01
    adc_grad_threshold: float = 2e-4  # screen-space, half image extent = 1
    adc_size_frac: float = 0.01       # clone/split size boundary, of scene extent
    adc_cull_opacity: float = 0.005
    adc_radius_cap: float = 20.0      # px; armed only after the first opacity reset
    adc_split_factor: float = 1.6

    # Static learning rates (means decay exponentially, x scene extent)
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_scales: float = 5e-3
    lr_quats: float = 1e-3
    lr_opacities: float = 5e-2
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 1.25e-4

    # Transient-set learning rates (quats/scales/rgb are 10x the defaults)
    lr_distractor_quats: float = 1e-2
    lr_distractor_scales: float = 5e-2
    lr_distractor_rgb: float = 2.5e-2

    # Loss weights
    lambda_ssim: float = 0.2
    lambda_static_alpha: float = 0.01
    lambda_distractor_alpha: float = 0.01
    lambda_background: float = 0.15   # active only with the background model
    t_eps: float = 0.003
    mask_cut: float = 0.6

    # Appearance / background models
    appearance_enabled: bool = False
    background_enabled: bool = False
    embed_dim: int = 32
    gauss_embed_dim: int = 24
    lr_appearance_mlp: float = 5e-4
    lr_image_embed: float = 1e-3
    lr_gauss_embed: float = 5e-3
    lr_bg_encoder: float = 2e-3
    lr_bg_dc: float = 2e-3
    lr_bg_rest: float = 1e-4
    lr_bg_encoder_final: float = 1e-4
    lr_bg_dc_final: float = 2e-4
    lr_bg_rest_final: float = 1e-5

    # Bookkeeping
    checkpoint_interval: int = 0      # steps between snapshots; 0 = final only
    psnr_cap: float = 99.0

    def validate(self):
        positive = (
            "iterations", "warmup_downscale", "k_distractors", "adc_view_period",
            "static_adc_period", "opacity_reset_period", "embed_dim", "gauss_embed_dim",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise UsageError(f"config field {name} must be positive")
        if self.distractor_depth <= 0:
            raise UsageError("distractor_depth must be positive")
        if not 0.0 < self.distractor_opacity < 1.0:
            raise UsageError("distractor_opacity must be in (0, 1)")
        if not 0 <= self.sh_degree <= 3:
            raise UsageError("sh_degree must be in 0..3")
        for f in dataclasses.fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) <= 0:
                raise UsageError(f"config field {f.name} must be positive")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if isinstance(val, bool):
                val = "true" if val else "false"
            else:
                val = repr(val)
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"config line {lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in fields:
                raise UsageError(f"config line {lineno}: unknown key '{key}'")
            ftype = fields[key].type
            try:
                if ftype in ("bool", bool):
                    if val.lower() not in ("true", "false"):
                        raise ValueError(val)
                    values[key] = val.lower() == "true"
                elif ftype in ("int", int):
                    values[key] = int(val)
                else:
                    values[key] = float(val)
            except ValueError as exc:
                raise UsageError(f"config line {lineno}: bad value for '{key}'") from exc
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        path = Path(path)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        return cls.from_text(path.read_text())
