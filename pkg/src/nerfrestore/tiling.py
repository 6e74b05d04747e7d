"""Patch-aggregation reverse sampling over overlapping Gaussian-weighted latent tiles."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffusion import NoiseSchedule, reverse_sample


def tile_offsets(length: int, tile: int, stride: int) -> list[int]:
    """Offsets at multiples of ``stride``; the last tile is clamped flush to the border."""
    offs = list(range(0, length - tile + 1, stride))
    if offs[-1] != length - tile:
        offs.append(length - tile)
    return offs


def gaussian_window(tile: int, sigma: float) -> np.ndarray:
    c = (tile - 1) / 2.0
    g = np.exp(-0.5 * ((np.arange(tile) - c) / sigma) ** 2)
    return np.outer(g, g)


@dataclass
class TileLayout:
    height: int
    width: int
    tile: int
    stride: int
    sigma: float
    regions: list  # (y0, x0) top-left corner of each tile
    window: np.ndarray  # (tile, tile) Gaussian, shared by all tiles
    normalizer: np.ndarray  # (H, W) sum of placed windows

    def __len__(self):
        return len(self.regions)

    def weight_map(self, n: int) -> np.ndarray:
        """Full-resolution weight of tile ``n``, zero outside its region."""
        return place(self.window, self.regions[n], (self.height, self.width))

    def extract(self, full: np.ndarray) -> np.ndarray:
        """Stack the tile windows of a (C, H, W) array into (M, C, tile, tile)."""
        t = self.tile
        return np.stack([full[:, y : y + t, x : x + t] for y, x in self.regions])


def place(patch: np.ndarray, corner: tuple[int, int], hw: tuple[int, int]) -> np.ndarray:
    """Zero-padding placement of a (..., t, t) patch into a (..., H, W) canvas."""
    y, x = corner
    th, tw = patch.shape[-2:]
    out = np.zeros(patch.shape[:-2] + tuple(hw), dtype=patch.dtype)
    out[..., y : y + th, x : x + tw] = patch
    return out


def make_layout(latent_hw: tuple[int, int], tile: int = 8, stride: int | None = None,
                sigma: float | None = None) -> TileLayout:
    h, w = latent_hw
    stride = tile // 2 if stride is None else stride
    sigma = tile / 4.0 if sigma is None else sigma
    if tile > min(h, w):
        raise ValueError(f"tile {tile} larger than latent {h}x{w}")
    if not 0 < stride <= tile:
        raise ValueError(f"stride must lie in (0, {tile}], got {stride}")
    if sigma <= 0:
        raise ValueError("gaussian sigma must be positive")
    regions = [(y, x) for y in tile_offsets(h, tile, stride) for x in tile_offsets(w, tile, stride)]
    window = gaussian_window(tile, sigma)
    if window.min() <= 0.0:
        raise ValueError(f"gaussian sigma {sigma} too small for tile {tile}: weights underflow at the tile corners")
    norm = np.zeros((h, w))
    for y, x in regions:
        norm[y : y + tile, x : x + tile] += window
    return TileLayout(h, w, tile, stride, sigma, regions, window, norm)


def aggregate_noise(predictions: np.ndarray, layout: TileLayout) -> np.ndarray:
    """Blend per-tile predictions (M, C, t, t) into one (C, H, W) map, in fixed tile order."""
    m = len(layout)
    t = layout.tile
    if predictions.ndim != 4 or predictions.shape[0] != m or predictions.shape[2:] != (t, t):
        raise ValueError(f"aggregate_noise: expected ({m}, C, {t}, {t}) predictions, got {predictions.shape}")
    c = predictions.shape[1]
    out = np.zeros((c, layout.height, layout.width), dtype=np.float64)
    for n, (y, x) in enumerate(layout.regions):
        ratio = layout.window / layout.normalizer[y : y + t, x : x + t]
        out[:, y : y + t, x : x + t] += ratio * predictions[n]
    return out.astype(predictions.dtype)


TilePredictor = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def tiled_noise_predictor(predict_tiles: TilePredictor, cond_full: np.ndarray, layout: TileLayout):
    """Wrap a per-tile predictor ``(z_tiles, cond_tiles, t) -> eps_tiles`` as a full-map predictor."""
    cond_tiles = layout.extract(cond_full)

    def predict(z: np.ndarray, t: int) -> np.ndarray:
        eps_tiles = predict_tiles(layout.extract(z[0]), cond_tiles, t)
        return aggregate_noise(eps_tiles, layout)[None]

    return predict


def tiled_reverse_sample(predict_tiles: TilePredictor, z_lq_full: np.ndarray, layout: TileLayout,
                         schedule: NoiseSchedule, sampler: str = "ddim", steps: int = 20, seed: int = 0) -> np.ndarray:
    """Sample a (1, C, H, W) latent conditioned on ``z_lq_full`` with per-step tile aggregation."""
    if z_lq_full.ndim != 4 or z_lq_full.shape[0] != 1:
        raise ValueError(f"expected a single (1, C, H, W) latent, got {z_lq_full.shape}")
    cond = z_lq_full[0]
    predict = tiled_noise_predictor(predict_tiles, cond, layout)
    return reverse_sample(predict, z_lq_full.shape, schedule, sampler, steps, seed, dtype=z_lq_full.dtype)
