"""Fidelity fusion, adversarial stage-two losses, colour correction and the restore path."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Conv2d, Module, Tensor, functional as F, no_grad
from .codec import Codec, to_nchw, to_nhwc
from .diffusion import ConditionalDenoiser, reverse_sample
from .tiling import make_layout, tiled_reverse_sample


# ---------------------------------------------------------------- RRDB


class DenseBlock(Module):
    """Residual dense block: each conv sees the concatenation of all earlier outputs."""

    def __init__(self, nf: int, gc: int, layers: int, rng: np.random.Generator):
        self.convs = [Conv2d(nf + i * gc, gc, 3, rng) for i in range(layers - 1)]
        self.fuse = Conv2d(nf + (layers - 1) * gc, nf, 3, rng)
        for conv in self.convs + [self.fuse]:
            conv.weight.data *= 0.1

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.convs:
            feats.append(F.leaky_relu(conv(F.concat(feats, axis=1) if len(feats) > 1 else x)))
        out = self.fuse(F.concat(feats, axis=1))
        return F.add(x, F.mul(out, 0.2))


class RRDB(Module):
    def __init__(self, nf: int, gc: int, layers: int, rng: np.random.Generator, blocks: int = 3):
        self.blocks = [DenseBlock(nf, gc, layers, rng) for _ in range(blocks)]

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for b in self.blocks:
            h = b(h)
        return F.add(x, F.mul(h, 0.2))


class FusionNet(Module):
    """concat(F_e, F_d) -> conv -> RRDB x2 -> conv (zero-init) giving a residual for F_d."""

    def __init__(self, channels: int, rng: np.random.Generator, width: int | None = None, dense_layers: int = 3):
        nf = width or max(channels // 2, 8)
        self.channels = channels
        self.conv_in = Conv2d(2 * channels, nf, 3, rng)
        self.rrdbs = [RRDB(nf, max(nf // 2, 4), dense_layers, rng) for _ in range(2)]
        self.conv_out = Conv2d(nf, channels, 3, rng, zero_init=True)

    def forward(self, f_e: Tensor, f_d: Tensor) -> Tensor:
        h = self.conv_in(F.concat([f_e, f_d], axis=1))
        for block in self.rrdbs:
            h = block(h)
        return self.conv_out(h)


class CFWModule(Module):
    """One fusion network per codec tap level."""

    def __init__(self, codec_cfg, seed: int = 0, dense_layers: int = 3):
        rng = np.random.default_rng(seed)
        self.levels = tuple(codec_cfg.tap_levels)
        self.nets = [FusionNet(codec_cfg.channels(lvl), rng, dense_layers=dense_layers) for lvl in self.levels]

    def net(self, level: int) -> FusionNet:
        return self.nets[self.levels.index(level)]


def cfw_fuse(f_e: Tensor, f_d: Tensor, w: float, net: FusionNet) -> Tensor:
    """``F_d + C(F_e, F_d) * w`` with w clamped to [0, 1]; w = 0 returns F_d untouched."""
    if f_e.shape != f_d.shape:
        raise F.ShapeError(f"cfw_fuse: encoder feature {f_e.shape} vs decoder feature {f_d.shape}")
    w = float(min(max(w, 0.0), 1.0))
    if w == 0.0:
        return f_d
    return F.add(f_d, F.mul(net(f_e, f_d), w))


def fused_decode(codec: Codec, latent: Tensor, taps: dict[int, Tensor] | None, cfw: CFWModule | None,
                 w: float) -> Tensor:
    """Decode, fusing encoder taps into the decoder at every CFW level."""
    if taps is None or cfw is None:
        return codec.decode(latent)

    def fusion(level: int, f_d: Tensor) -> Tensor:
        if level not in cfw.levels:
            return f_d
        return cfw_fuse(taps[level], f_d, w, cfw.net(level))

    return codec.decode(latent, fusion)


# ---------------------------------------------------------------- discriminator


class PatchDiscriminator(Module):
    """Three strided conv layers producing a map of real/fake logits (receptive field 15 px)."""

    receptive_field = 15

    def __init__(self, seed: int = 0, width: int = 32):
        rng = np.random.default_rng(seed)
        self.conv1 = Conv2d(3, width, 3, rng, stride=2)
        self.conv2 = Conv2d(width, 2 * width, 3, rng, stride=2)
        self.conv3 = Conv2d(2 * width, 1, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = F.leaky_relu(self.conv1(F.sub(F.mul(x, 2.0), 1.0)))
        h = F.leaky_relu(self.conv2(h))
        return self.conv3(h)


# ---------------------------------------------------------------- losses


def perceptual_proxy(codec: Codec, x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean squared distance of codec-encoder tap features, averaged over tap levels."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    _, fa = codec.encode(x)
    _, fb = codec.encode(x_hat)
    levels = codec.cfg.tap_levels
    total = None
    for lvl in levels:
        d = F.mse(fa[lvl], fb[lvl])
        total = d if total is None else F.add(total, d)
    return F.mul(total, 1.0 / len(levels))


@dataclass(frozen=True)
class Stage2Weights:
    perceptual: float = 1.0
    adversarial: float = 0.05


def generator_loss(x: Tensor, x_hat: Tensor, disc: PatchDiscriminator, codec: Codec,
                   weights: Stage2Weights = Stage2Weights()) -> Tensor:
    loss = F.l1(x_hat, x)
    if weights.perceptual:
        loss = F.add(loss, F.mul(perceptual_proxy(codec, x, x_hat), weights.perceptual))
    if weights.adversarial:
        fooled = F.neg(F.mean(F.log_sigmoid(disc(x_hat))))
        loss = F.add(loss, F.mul(fooled, weights.adversarial))
    return loss


def discriminator_loss(x: Tensor, x_hat: Tensor, disc: PatchDiscriminator) -> Tensor:
    """``-[log D(x) + log(1 - D(x_hat))]`` averaged over the logit map, via log-sigmoid."""
    real = F.mean(F.log_sigmoid(disc(x)))
    fake = F.mean(F.log_sigmoid(F.neg(disc(x_hat.detach() if isinstance(x_hat, Tensor) else Tensor(x_hat)))))
    return F.neg(F.add(real, fake))


def stage2_losses(x: Tensor, x_hat: Tensor, disc: PatchDiscriminator, codec: Codec,
                  weights: Stage2Weights = Stage2Weights()) -> tuple[Tensor, Tensor]:
    return generator_loss(x, x_hat, disc, codec, weights), discriminator_loss(x, x_hat, disc)


# ---------------------------------------------------------------- colour correction


def color_correct(x_enh: np.ndarray, x_lq: np.ndarray, clamp: bool = True, eps: float = 1e-6,
                  tol: float = 1e-12) -> np.ndarray:
    """Match per-channel mean and std of ``x_enh`` to ``x_lq`` over an (H, W, 3) image.

    Channels whose statistics already match to ``tol`` are passed through
    unchanged, which makes the correction an exact fixpoint.
    """
    if x_enh.shape != x_lq.shape:
        raise ValueError(f"color_correct: shape mismatch {x_enh.shape} vs {x_lq.shape}")
    enh = np.asarray(x_enh, dtype=np.float64)
    ref = np.asarray(x_lq, dtype=np.float64)
    out = enh.copy()
    for c in range(enh.shape[-1]):
        a, b = enh[..., c], ref[..., c]
        mu_a, mu_b = a.mean(), b.mean()
        sd_a, sd_b = a.std(), b.std()
        if abs(mu_a - mu_b) <= tol and abs(sd_a - sd_b) <= tol * max(sd_b, 1.0):
            continue
        if a.min() == a.max():  # centring a constant is exactly zero; skip the rounding noise of a.mean()
            out[..., c] = mu_b
            continue
        out[..., c] = (a - mu_a) / max(sd_a, eps) * sd_b + mu_b
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.asarray(x_enh).dtype)


# ---------------------------------------------------------------- inference


@dataclass(frozen=True)
class SamplerConfig:
    sampler: str = "ddim"
    steps: int = 20
    tile: int = 8
    stride: int = 4
    sigma: float = 2.0
    seed: int = 0


def pad_to_multiple(image: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = image.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return image, (h, w)


def tile_predictor(denoiser: ConditionalDenoiser):
    def predict(z_tiles: np.ndarray, cond_tiles: np.ndarray, t: int) -> np.ndarray:
        return denoiser.predict_noise(Tensor(z_tiles), t, Tensor(cond_tiles)).data

    return predict


def sample_latent(denoiser: ConditionalDenoiser, z_lq: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
    """Conditional reverse sampling; tiled when the latent is larger than one tile."""
    h, w = z_lq.shape[2:]
    predict_tiles = tile_predictor(denoiser)
    if z_lq.shape[0] == 1 and max(h, w) > cfg.tile and min(h, w) >= cfg.tile:
        layout = make_layout((h, w), cfg.tile, cfg.stride, cfg.sigma)
        return tiled_reverse_sample(predict_tiles, z_lq, layout, denoiser.schedule, cfg.sampler, cfg.steps, cfg.seed)
    return reverse_sample(lambda z, t: predict_tiles(z, z_lq, t), z_lq.shape, denoiser.schedule, cfg.sampler,
                          cfg.steps, cfg.seed, dtype=z_lq.dtype)


def restore(image_lq: np.ndarray, codec: Codec, denoiser: ConditionalDenoiser, cfw: CFWModule | None,
            w: float = 1.0, cfg: SamplerConfig = SamplerConfig(), correct: bool = True) -> np.ndarray:
    """Restore an (H, W, 3) low-quality rendering; output has the input's shape."""
    with no_grad():
        padded, (h, w0) = pad_to_multiple(np.asarray(image_lq, dtype=np.float32), codec.cfg.factor)
        x = Tensor(to_nchw(padded))
        z_lq, taps = codec.encode(x)
        z0 = sample_latent(denoiser, z_lq.data, cfg)
        out = fused_decode(codec, Tensor(z0), taps, cfw, w)
        img = to_nhwc(out.data)[0][:h, :w0]
    if correct:
        img = color_correct(img, np.asarray(image_lq, dtype=np.float32))
    return img
