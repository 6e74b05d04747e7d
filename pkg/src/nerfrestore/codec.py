"""Small deterministic convolutional autoencoder used as the latent codec.

Encoder and decoder expose intermediate features ("taps") at matching
resolutions so the restoration stage can fuse encoder features into the
decoder.  Tap level ``k`` lives at spatial size H / 2**k.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Conv2d, GroupNorm, Module, Tensor, adam_step, AdamState, backward, functional as F, no_grad


@dataclass(frozen=True)
class CodecConfig:
    factor: int = 4
    latent_channels: int = 4
    base_channels: int = 32
    tap_levels: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        f = self.factor
        if f < 2 or f & (f - 1):
            raise ValueError(f"downsample factor must be a power of two, got {f}")
        for lvl in self.tap_levels:
            if not 0 <= lvl <= self.depth:
                raise ValueError(f"tap level {lvl} outside 0..{self.depth}")

    @property
    def depth(self) -> int:
        return int(np.log2(self.factor))

    def channels(self, level: int) -> int:
        """Feature width at a given level: half the base width at full resolution, doubling per level."""
        if level == 0:
            return max(self.base_channels // 2, 8)
        return self.base_channels * 2 ** (level - 1)


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.norm1 = GroupNorm(cin)
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.norm2 = GroupNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.skip = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return F.add(x if self.skip is None else self.skip(x), h)


class Encoder(Module):
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.conv_in = Conv2d(3, cfg.channels(0), 3, rng)
        self.downs = [Conv2d(cfg.channels(k), cfg.channels(k + 1), 3, rng, stride=2) for k in range(cfg.depth)]
        self.blocks = [ResBlock(cfg.channels(k + 1), cfg.channels(k + 1), rng) for k in range(cfg.depth)]
        self.norm_out = GroupNorm(cfg.channels(cfg.depth))
        self.conv_out = Conv2d(cfg.channels(cfg.depth), cfg.latent_channels, 3, rng)

    def forward(self, x: Tensor) -> tuple[Tensor, dict[int, Tensor]]:
        feats: dict[int, Tensor] = {}
        h = self.conv_in(x)
        feats[0] = h
        for k in range(self.cfg.depth):
            h = self.blocks[k](self.downs[k](F.silu(h) if k == 0 else h))
            feats[k + 1] = h
        z = self.conv_out(F.silu(self.norm_out(h)))
        return z, feats


Fusion = Callable[[int, Tensor], Tensor]


class Decoder(Module):
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        self.cfg = cfg
        top = cfg.depth
        self.conv_in = Conv2d(cfg.latent_channels, cfg.channels(top), 3, rng)
        self.blocks = [ResBlock(cfg.channels(k), cfg.channels(k), rng) for k in range(1, top + 1)]
        self.ups = [Conv2d(cfg.channels(k + 1), cfg.channels(k), 3, rng) for k in range(top)]
        self.norm_out = GroupNorm(cfg.channels(0))
        self.conv_out = Conv2d(cfg.channels(0), 3, 3, rng)

    def forward(self, z: Tensor, fusion: Optional[Fusion] = None) -> tuple[Tensor, dict[int, Tensor]]:
        """Returns (image in [0,1], decoder taps).  ``fusion(level, F_d)`` may rewrite taps."""
        feats: dict[int, Tensor] = {}
        top = self.cfg.depth
        h = self.conv_in(z)
        for k in range(top, -1, -1):
            if k > 0:
                h = self.blocks[k - 1](h)
            if fusion is not None and k in self.cfg.tap_levels:
                h = fusion(k, h)
            feats[k] = h
            if k > 0:
                h = self.ups[k - 1](F.upsample2x(h))
        out = self.conv_out(F.silu(self.norm_out(h)))
        return F.sigmoid(out), feats


class Codec(Module):
    def __init__(self, cfg: CodecConfig = CodecConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.latent_scale = 1.0

    def check_input(self, image: Tensor) -> None:
        f = self.cfg.factor
        if image.ndim != 4 or image.shape[1] != 3:
            raise F.ShapeError(f"encode: expected (N, 3, H, W) image, got {image.shape}")
        if image.shape[2] % f or image.shape[3] % f:
            raise F.ShapeError(
                f"encode: image size {image.shape[2]}x{image.shape[3]} is not a multiple of {f}; pad it first"
            )

    def encode(self, image: Tensor) -> tuple[Tensor, dict[int, Tensor]]:
        """Standardized latent and encoder taps for an (N, 3, H, W) image in [0, 1]."""
        self.check_input(image)
        z, feats = self.encoder(F.sub(F.mul(image, 2.0), 1.0))
        return F.mul(z, float(self.latent_scale)), feats

    def decode(self, latent: Tensor, fusion: Optional[Fusion] = None) -> Tensor:
        c = self.cfg.latent_channels
        if latent.ndim != 4 or latent.shape[1] != c:
            raise F.ShapeError(f"decode: expected latent with {c} channels, got {latent.shape}")
        img, _ = self.decoder(F.mul(latent, 1.0 / float(self.latent_scale)), fusion)
        return img

    def decode_with_taps(self, latent: Tensor, fusion: Optional[Fusion] = None) -> tuple[Tensor, dict[int, Tensor]]:
        return self.decoder(F.mul(latent, 1.0 / float(self.latent_scale)), fusion)

    def forward(self, image: Tensor) -> Tensor:
        z, _ = self.encode(image)
        return self.decode(z)


def to_nchw(images: np.ndarray) -> np.ndarray:
    """(N, H, W, 3) or (H, W, 3) -> (N, 3, H, W) float32."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2))


def to_nhwc(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(images).transpose(0, 2, 3, 1))


def random_patches(images: list[np.ndarray], rng: np.random.Generator, count: int, size: int = 32,
                   flip: bool = True) -> np.ndarray:
    """``count`` random (size x size) crops from (H, W, 3) images, returned NCHW."""
    out = np.empty((count, size, size, 3), dtype=np.float32)
    for i in range(count):
        img = images[int(rng.integers(len(images)))]
        y = int(rng.integers(0, img.shape[0] - size + 1))
        x = int(rng.integers(0, img.shape[1] - size + 1))
        p = img[y : y + size, x : x + size]
        if flip and rng.random() < 0.5:
            p = p[:, ::-1]
        out[i] = p
    return to_nchw(out)


def train_codec(codec: Codec, images: list[np.ndarray], steps: int = 3000, batch: int = 8, lr: float = 1e-3,
                patch: int = 32, seed: int = 0, log: Callable[[int, float], None] | None = None) -> list[float]:
    """Fit the autoencoder with an L1 reconstruction loss and set the latent scale.

    Returns the per-step loss curve.
    """
    if not images:
        raise ValueError("train_codec: empty dataset")
    rng = np.random.default_rng(seed)
    codec.latent_scale = 1.0
    params = codec.named_parameters()
    state = AdamState(lr=lr)
    curve = []
    for step in range(steps):
        x = Tensor(random_patches(images, rng, batch, patch))
        rec = codec(x)
        loss = F.l1(rec, x)
        backward(loss)
        adam_step(params, state)
        curve.append(float(loss.data))
        if log is not None:
            log(step, curve[-1])
    codec.latent_scale = latent_scale_for(codec, images, rng)
    return curve


def latent_scale_for(codec: Codec, images: list[np.ndarray], rng: np.random.Generator, count: int = 256) -> float:
    """Global constant making the training latents unit-std."""
    prev = codec.latent_scale
    codec.latent_scale = 1.0
    with no_grad():
        zs = [codec.encode(Tensor(random_patches(images, rng, 32, 32, flip=False)))[0].data for _ in range(count // 32)]
    codec.latent_scale = prev
    std = float(np.concatenate([z.reshape(-1) for z in zs]).std())
    return 1.0 / max(std, 1e-6)
