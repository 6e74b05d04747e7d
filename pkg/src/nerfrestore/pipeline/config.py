"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"

    # scene and views
    checker_freq: float = 14.0
    stripe_freq: float = 13.0
    background: tuple = (0.85, 0.9, 1.0)
    n_train: int = 12
    n_test: int = 4
    resolution: int = 128
    spp: int = 8
    reference_samples: int = 128

    # radiance field / stage one
    grid_resolution: int = 24
    grid_lr: float = 0.02
    train_samples: int = 64
    eval_samples: int = 128
    ray_batch: int = 1024
    tv_weight: float = 1e-3
    l1_weight: float = 1e-4
    stage1_iters: int = 6000
    pixel_fraction: float = 0.5
    patch_size: int = 32
    sub_patch_h: int = 16
    sub_patch_w: int = 32
    lam: float = 1.0
    separate_stage1: bool = False
    diff_lr: float = 5e-5
    eval_interval: int = 500

    # codec and denoiser prior
    codec_steps: int = 3000
    codec_batch: int = 8
    codec_lr: float = 1e-3
    codec_factor: int = 4
    latent_channels: int = 4
    codec_base: int = 32
    tap_levels: tuple = (1, 2)
    prior_steps: int = 3000
    prior_batch: int = 16
    prior_lr: float = 1e-3

    # diffusion
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    unet_channels: tuple = (32, 64, 128)
    temb_dim: int = 128
    sft_encoder_side: bool = False
    sampler: str = "ddim"
    steps: int = 20

    # tiling
    tile: int = 8
    stride: int = 4
    tile_sigma: float = 2.0

    # stage two
    stage2_iters: int = 2000
    stage2_batch: int = 4
    stage2_lr: float = 2e-4
    stage2_sample_steps: int = 10
    lambda_p: float = 0.1
    lambda_g: float = 0.01
    w: float = 1.0
    cfw_dense_layers: int = 3
    stage2_augment: bool = False
    stage2_ema: float = 0.999

    # evaluation
    w_sweep: tuple = (0.5,)

    def validate(self) -> "RunConfig":
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.n_train >= 1 and self.n_test >= 1, "n_train and n_test must be >= 1")
        need(self.spp >= 1, "spp must be >= 1")
        need(self.resolution % (self.codec_factor * self.tile) == 0 or self.resolution >= self.patch_size,
             "resolution too small")
        need(self.grid_resolution >= 2, "grid_resolution must be >= 2")
        need(0.0 <= self.pixel_fraction <= 1.0, "pixel_fraction must lie in [0, 1]")
        need(self.patch_size % self.codec_factor == 0, "patch_size must be a multiple of codec_factor")
        need(self.patch_size % self.sub_patch_h == 0 and self.patch_size % self.sub_patch_w == 0,
             "sub-patches must tile the patch")
        need(self.patch_size <= self.resolution, "patch_size exceeds image resolution")
        need(self.lam >= 0, "lam must be non-negative")
        need(len(self.background) == 3 and all(0 <= c <= 1 for c in self.background), "background must be RGB in [0,1]")
        need(self.checker_freq > 0 and self.stripe_freq > 0, "texture frequencies must be positive")
        need(self.sampler in ("ddim", "ddpm"), f"unknown sampler {self.sampler!r}")
        need(1 <= self.steps <= self.T and 1 <= self.stage2_sample_steps <= self.T, "steps must lie in [1, T]")
        need(0 < self.stride <= self.tile, "stride must lie in (0, tile]")
        need(self.tile_sigma > 0, "tile_sigma must be positive")
        need(0.0 <= self.w <= 1.0 and all(0.0 <= v <= 1.0 for v in self.w_sweep), "w must lie in [0, 1]")
        need(len(self.unet_channels) == 3, "unet_channels needs three entries")
        need(self.codec_factor >= 2 and self.codec_factor & (self.codec_factor - 1) == 0,
             "codec_factor must be a power of two")
        need(all(0 <= lvl <= self.codec_factor.bit_length() - 1 for lvl in self.tap_levels), "invalid tap level")
        need(self.eval_interval >= 1, "eval_interval must be >= 1")
        need(0.0 <= self.stage2_ema < 1.0, "stage2_ema must lie in [0, 1)")
        return self

    # ------------------------------------------------------------ serialization

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k != "out_dir"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=list).encode()).hexdigest()[:16]

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        cfg = dataclasses.replace(self)
        for key, raw in overrides.items():
            setattr(cfg, key, _coerce(key, raw))
        return cfg.validate()


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str) -> Any:
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELDS[key].default
    raw = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    values: dict[str, str] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    values.update(overrides or {})
    return RunConfig().with_overrides(values)
