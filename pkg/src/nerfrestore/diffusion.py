"""Conditional latent diffusion: schedule, denoiser U-Net, time-aware encoder, SFT, samplers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Conv2d, GroupNorm, Linear, Module, Tensor, functional as F


# ---------------------------------------------------------------- schedule


class NoiseSchedule:
    """Linear beta schedule; arrays are indexed by timestep t in 0..T with alpha_bar[0] = 1."""

    def __init__(self, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if T < 1 or not 0 < beta_start <= beta_end < 1:
            raise ValueError("invalid noise schedule parameters")
        self.T = T
        self.betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep outside [1, {self.T}]: {t}")
        return t


def _per_sample(values: np.ndarray, t, ndim: int) -> np.ndarray:
    v = values[np.asarray(t)]
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if np.ndim(v) else v


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward noising ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``; ``t`` is an int or one per sample."""
    if eps.shape != z0.shape:
        raise ValueError(f"q_sample: noise shape {eps.shape} != latent shape {z0.shape}")
    t = schedule.check_t(t)
    ab = _per_sample(schedule.alpha_bars, t, z0.ndim)
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype)


def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    """Strictly decreasing timesteps from T down to 0, ``steps`` jumps."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}]")
    return np.round(np.linspace(T, 0, steps + 1)).astype(np.int64)


def predict_x0(z_t: np.ndarray, eps: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bars[t]
    return (z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def ddim_step(z_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM jump from t to t_prev < t."""
    if t_prev >= t:
        raise ValueError(f"ddim_step: t_prev ({t_prev}) must be smaller than t ({t})")
    x0 = predict_x0(z_t, eps, t, schedule)
    ab_prev = schedule.alpha_bars[t_prev]
    return (np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps).astype(z_t.dtype)


def ddpm_step(z_t: np.ndarray, eps: np.ndarray, t: int, rng: np.random.Generator, schedule: NoiseSchedule,
              t_prev: Optional[int] = None) -> np.ndarray:
    """Ancestral step to ``t_prev`` (default t-1); strided jumps use the respaced posterior."""
    t_prev = t - 1 if t_prev is None else t_prev
    if t_prev >= t:
        raise ValueError(f"ddpm_step: t_prev ({t_prev}) must be smaller than t ({t})")
    ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t_prev]
    beta = 1.0 - ab / ab_prev
    x0 = predict_x0(z_t, eps, t, schedule)
    mean = (np.sqrt(ab_prev) * beta / (1.0 - ab)) * x0 + (np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)) * z_t
    if t_prev == 0:
        return mean.astype(z_t.dtype)
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return (mean + np.sqrt(var) * rng.standard_normal(z_t.shape)).astype(z_t.dtype)


NoisePredictor = Callable[[np.ndarray, int], np.ndarray]


def reverse_sample(predict: NoisePredictor, shape: tuple, schedule: NoiseSchedule, sampler: str = "ddim",
                   steps: int = 20, seed: int = 0, dtype=np.float32) -> np.ndarray:
    """Run the reverse process from pure noise; ``predict(z_t, t)`` returns the noise estimate."""
    if sampler not in ("ddim", "ddpm"):
        raise ValueError(f"unknown sampler {sampler!r}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape).astype(dtype)
    ts = sampling_timesteps(schedule.T, steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        eps = predict(z, int(t))
        if sampler == "ddim":
            z = ddim_step(z, eps, int(t), int(t_prev), schedule)
        else:
            z = ddpm_step(z, eps, int(t), rng, schedule, int(t_prev))
    return z


# ---------------------------------------------------------------- networks


def timestep_embedding(t, dim: int = 128, dtype=np.float32) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


class TimeMLP(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def forward(self, t) -> Tensor:
        return self.fc2(F.silu(self.fc1(Tensor(timestep_embedding(t, self.dim)))))


class TimeResBlock(Module):
    def __init__(self, cin: int, cout: int, temb: int, rng: np.random.Generator):
        self.norm1 = GroupNorm(cin)
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.temb = Linear(temb, cout, rng)
        self.norm2 = GroupNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.skip = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = F.channel_bias(h, self.temb(F.silu(emb)))
        h = self.conv2(F.silu(self.norm2(h)))
        return F.add(x if self.skip is None else self.skip(x), h)


@dataclass(frozen=True)
class DiffusionConfig:
    latent_channels: int = 4
    channels: tuple[int, int, int] = (32, 64, 128)
    temb_dim: int = 128
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    sft_encoder_side: bool = False


class DenoiserUNet(Module):
    """Three-resolution epsilon-prediction U-Net; ``modulate(scale, feature)`` hooks SFT in."""

    def __init__(self, cfg: DiffusionConfig, rng: np.random.Generator):
        c1, c2, c3 = cfg.channels
        d = cfg.temb_dim
        self.cfg = cfg
        self.time = TimeMLP(d, rng)
        self.conv_in = Conv2d(cfg.latent_channels, c1, 3, rng)
        self.down1 = TimeResBlock(c1, c1, d, rng)
        self.pool1 = Conv2d(c1, c2, 3, rng, stride=2)
        self.down2 = TimeResBlock(c2, c2, d, rng)
        self.pool2 = Conv2d(c2, c3, 3, rng, stride=2)
        self.down3 = TimeResBlock(c3, c3, d, rng)
        self.mid = TimeResBlock(c3, c3, d, rng)
        self.up3 = TimeResBlock(2 * c3, c3, d, rng)
        self.upconv2 = Conv2d(c3, c2, 3, rng)
        self.up2 = TimeResBlock(2 * c2, c2, d, rng)
        self.upconv1 = Conv2d(c2, c1, 3, rng)
        self.up1 = TimeResBlock(2 * c1, c1, d, rng)
        self.norm_out = GroupNorm(c1)
        self.conv_out = Conv2d(c1, cfg.latent_channels, 3, rng)

    def forward(self, z: Tensor, t, modulate: Optional[Callable[[int, Tensor], Tensor]] = None) -> Tensor:
        emb = self.time(np.broadcast_to(np.asarray(t), (z.shape[0],)))
        mod = modulate if modulate is not None else (lambda n, h: h)
        enc_side = self.cfg.sft_encoder_side and modulate is not None
        h1 = self.down1(self.conv_in(z), emb)
        if enc_side:
            h1 = mod(1, h1)
        h2 = self.down2(self.pool1(h1), emb)
        if enc_side:
            h2 = mod(2, h2)
        h3 = self.down3(self.pool2(h2), emb)
        if enc_side:
            h3 = mod(3, h3)
        h = self.mid(h3, emb)
        h = mod(3, self.up3(F.concat([h, h3], axis=1), emb))
        h = self.upconv2(F.upsample2x(h))
        h = mod(2, self.up2(F.concat([h, h2], axis=1), emb))
        h = self.upconv1(F.upsample2x(h))
        h = mod(1, self.up1(F.concat([h, h1], axis=1), emb))
        return self.conv_out(F.silu(self.norm_out(h)))


class TimeAwareEncoder(Module):
    """Mirror of the U-Net's contracting path applied to the degraded latent."""

    def __init__(self, cfg: DiffusionConfig, rng: np.random.Generator):
        c1, c2, c3 = cfg.channels
        d = cfg.temb_dim
        self.time = TimeMLP(d, rng)
        self.conv_in = Conv2d(cfg.latent_channels, c1, 3, rng)
        self.down1 = TimeResBlock(c1, c1, d, rng)
        self.pool1 = Conv2d(c1, c2, 3, rng, stride=2)
        self.down2 = TimeResBlock(c2, c2, d, rng)
        self.pool2 = Conv2d(c2, c3, 3, rng, stride=2)
        self.down3 = TimeResBlock(c3, c3, d, rng)

    def forward(self, z_lq: Tensor, t) -> dict[int, Tensor]:
        emb = self.time(np.broadcast_to(np.asarray(t), (z_lq.shape[0],)))
        f1 = self.down1(self.conv_in(z_lq), emb)
        f2 = self.down2(self.pool1(f1), emb)
        f3 = self.down3(self.pool2(f2), emb)
        return {1: f1, 2: f2, 3: f3}


class SFTHead(Module):
    """Predicts per-pixel (alpha, beta) from a condition feature; zero-initialized output."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, 2 * channels, 3, rng, zero_init=True)

    def forward(self, cond: Tensor) -> tuple[Tensor, Tensor]:
        ab = self.conv2(F.silu(self.conv1(cond)))
        c = self.channels
        return ab[:, :c], ab[:, c:]


class SFTLayerSet(Module):
    def __init__(self, cfg: DiffusionConfig, rng: np.random.Generator):
        self.heads = [SFTHead(c, rng) for c in cfg.channels]

    def head(self, scale: int) -> SFTHead:
        return self.heads[scale - 1]


def sft_apply(feature: Tensor, cond: Tensor, head: SFTHead) -> Tensor:
    """``(1 + alpha) * feature + beta`` with (alpha, beta) predicted from ``cond``."""
    if cond.shape[0] != feature.shape[0] or cond.shape[2:] != feature.shape[2:] or head.channels != feature.shape[1]:
        raise F.ShapeError(f"sft_apply: condition {cond.shape} does not match feature {feature.shape}")
    alpha, beta = head(cond)
    return modulate(feature, alpha, beta)


def modulate(feature: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    return F.add(F.mul(F.add(alpha, 1.0), feature), beta)


class ConditionalDenoiser(Module):
    """Frozen-prior U-Net plus trainable time-aware encoder and SFT layers."""

    def __init__(self, cfg: DiffusionConfig = DiffusionConfig(), seed: int = 0):
        self.cfg = cfg
        self.unet = DenoiserUNet(cfg, np.random.default_rng(seed))
        self.cond_encoder = TimeAwareEncoder(cfg, np.random.default_rng(seed + 1))
        self.sft = SFTLayerSet(cfg, np.random.default_rng(seed + 2))
        self.schedule = NoiseSchedule(cfg.T, cfg.beta_start, cfg.beta_end)

    def predict_noise(self, z_t: Tensor, t, z_lq: Optional[Tensor] = None) -> Tensor:
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        if z_lq is None:
            return self.unet(z_t, t)
        z_lq = z_lq if isinstance(z_lq, Tensor) else Tensor(z_lq)
        if z_lq.shape != z_t.shape:
            raise F.ShapeError(f"predict_noise: z_lq {z_lq.shape} does not match z_t {z_t.shape}")
        feats = self.cond_encoder(z_lq, t)

        def hook(scale: int, h: Tensor) -> Tensor:
            return sft_apply(h, feats[scale], self.sft.head(scale))

        return self.unet(z_t, t, hook)


def diffusion_loss(predict: Callable[[Tensor, np.ndarray, Optional[Tensor]], Tensor], z_hq: np.ndarray,
                   z_lq: Optional[np.ndarray], rng: np.random.Generator, schedule: NoiseSchedule) -> Tensor:
    """Mean squared error between injected and predicted noise at a random timestep per sample."""
    n = z_hq.shape[0]
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(z_hq.shape).astype(z_hq.dtype)
    z_t = q_sample(z_hq, t, eps, schedule)
    pred = predict(Tensor(z_t), t, None if z_lq is None else Tensor(z_lq))
    return F.mse(pred, Tensor(eps))


def stage1_loss(nerf_term: Tensor, diff_term: Optional[Tensor], lam: float = 1.0) -> Tensor:
    if diff_term is None or lam == 0:
        return nerf_term
    return F.add(nerf_term, F.mul(diff_term, lam))
