"""Low-capacity trilinear voxel radiance field, volume rendering and ray sampling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Module, Tensor, functional as F, no_grad
from .autodiff.nn import param
from .autodiff.tensor import make_result
from .scene import Camera, ViewSet, intersect_unit_cube

DENSITY_SCALE = 10.0


# ---------------------------------------------------------------- rays


@dataclass
class Rays:
    origins: np.ndarray  # (N, 3)
    dirs: np.ndarray  # (N, 3), unit length
    near: np.ndarray  # (N,)
    far: np.ndarray  # (N,)
    hit: np.ndarray  # (N,) bool, ray meets the scene cube

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx], self.hit[idx])


def generate_rays(camera: Camera, xs, ys) -> Rays:
    """Pinhole rays through the centres of integer pixels ``(xs, ys)``."""
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    if np.any(xs < 0) or np.any(xs >= camera.width) or np.any(ys < 0) or np.any(ys >= camera.height):
        raise IndexError(f"pixel coordinates outside {camera.width}x{camera.height} image")
    o, d = camera.rays(xs + 0.5, ys + 0.5)
    near, far, hit = intersect_unit_cube(o, d)
    return Rays(o, d, near, far, hit)


def all_rays(camera: Camera) -> Rays:
    ys, xs = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    return generate_rays(camera, xs.reshape(-1), ys.reshape(-1))


def stratified_depths(near: np.ndarray, far: np.ndarray, n_samples: int,
                      rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sample depths in equal bins over [near, far]; midpoints when ``rng`` is None.

    Returns (t, delta), both (N, n_samples); delta is the bin width.
    """
    k = np.arange(n_samples, dtype=np.float64)[None, :]
    u = 0.5 if rng is None else rng.random((near.shape[0], n_samples))
    span = (far - near)[:, None]
    t = near[:, None] + span * (k + u) / n_samples
    delta = np.broadcast_to(span / n_samples, t.shape).copy()
    return t, delta


# ---------------------------------------------------------------- compositing


def volume_render(sigma: Tensor, color: Tensor, delta, background) -> tuple[Tensor, Tensor]:
    """Alpha-composite per-sample densities (R, S) and colours (R, S, 3).

    Returns (rgb (R, 3), weights (R, S)). Uncovered transmittance shows the
    background colour.
    """
    r, s = sigma.shape
    delta = delta if isinstance(delta, Tensor) else Tensor(np.asarray(delta, dtype=sigma.dtype))
    tau = F.mul(sigma, delta)
    alpha = F.sub(1.0, F.exp(F.neg(tau)))
    trans = F.exp(F.neg(F.cumsum(tau, axis=1, exclusive=True)))
    weights = F.mul(alpha, trans)
    w3 = F.broadcast_to(F.reshape(weights, (r, s, 1)), (r, s, 3))
    rgb = F.sum(F.mul(w3, color), axis=1)
    acc = F.sum(weights, axis=1)
    bg = np.broadcast_to(np.asarray(background, dtype=sigma.dtype), (r, 3))
    rest = F.broadcast_to(F.reshape(F.sub(1.0, acc), (r, 1)), (r, 3))
    return F.add(rgb, F.mul(rest, Tensor(np.ascontiguousarray(bg)))), weights


def composite_np(sigma: np.ndarray, color: np.ndarray, delta: np.ndarray, background) -> np.ndarray:
    """Non-differentiable entry point to :func:`volume_render`."""
    with no_grad():
        rgb, _ = volume_render(Tensor(sigma), Tensor(color), delta, background)
    return rgb.data


# ---------------------------------------------------------------- voxel grid


def trilinear_lookup(values: Tensor, index: np.ndarray, weights: np.ndarray) -> Tensor:
    """``sum_k weights[:, k] * values[index[:, k]]`` for a (cells, C) table."""
    vd = values.data
    w = weights.astype(vd.dtype, copy=False)
    out = np.einsum("nk,nkc->nc", w, vd[index])
    ncell, nch = vd.shape

    def bw(g):
        flat = index.reshape(-1)
        grad = np.empty_like(vd)
        for c in range(nch):
            contrib = (w * g[:, c : c + 1]).reshape(-1)
            grad[:, c] = np.bincount(flat, weights=contrib, minlength=ncell)
        return (grad,)

    return make_result(out, (values,), bw, "trilinear_lookup")


class VoxelGrid(Module):
    """R^3 cells over the unit cube, each holding a density logit and 3 colour logits."""

    def __init__(self, resolution: int = 24, density_init: float = -2.0, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.resolution = resolution
        table = np.zeros((resolution ** 3, 4))
        table[:, 0] = density_init
        table[:, 1:] = rng.normal(0.0, 0.1, (resolution ** 3, 3))
        self.values = param(table)
        self.values.name = "param"

    def corner_weights(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        r = self.resolution
        u = np.clip(points * r - 0.5, 0.0, r - 1.0)
        i0 = np.clip(np.floor(u), 0, r - 2).astype(np.int64)
        f = u - i0
        idx = np.empty(points.shape[:-1] + (8,), dtype=np.int64)
        wts = np.empty(points.shape[:-1] + (8,), dtype=points.dtype)
        k = 0
        for dx in (0, 1):
            wx = f[..., 0] if dx else 1 - f[..., 0]
            for dy in (0, 1):
                wy = f[..., 1] if dy else 1 - f[..., 1]
                for dz in (0, 1):
                    wz = f[..., 2] if dz else 1 - f[..., 2]
                    idx[..., k] = ((i0[..., 0] + dx) * r + (i0[..., 1] + dy)) * r + (i0[..., 2] + dz)
                    wts[..., k] = wx * wy * wz
                    k += 1
        return idx, wts

    def query(self, points: np.ndarray) -> tuple[Tensor, Tensor]:
        """Decoded (density (N,), colour (N, 3)) at (N, 3) points."""
        idx, wts = self.corner_weights(points)
        raw = trilinear_lookup(self.values, idx, wts)
        density = F.mul(F.softplus(raw[:, 0]), DENSITY_SCALE)
        color = F.sigmoid(raw[:, 1:4])
        return density, color

    def density_activation(self) -> Tensor:
        r = self.resolution
        return F.reshape(F.softplus(self.values[:, 0]), (r, r, r))

    def forward(self, rays: Rays, n_samples: int, rng: np.random.Generator | None, background) -> Tensor:
        t, delta = stratified_depths(rays.near, rays.far, n_samples, rng)
        pts = rays.origins[:, None, :] + rays.dirs[:, None, :] * t[..., None]
        dtype = self.values.dtype
        sigma, color = self.query(pts.reshape(-1, 3).astype(dtype))
        n = len(rays)
        sigma = F.reshape(sigma, (n, n_samples))
        if not rays.hit.all():
            sigma = F.mul(sigma, Tensor(np.broadcast_to(rays.hit[:, None], (n, n_samples)).astype(dtype)))
        rgb, _ = volume_render(sigma, F.reshape(color, (n, n_samples, 3)), delta.astype(dtype), background)
        return rgb


def reg_losses(grid: VoxelGrid, tv_weight: float = 1e-3, l1_weight: float = 1e-4) -> Tensor:
    """Weighted L1 sparsity on density activations plus total variation over all three axes."""
    dens = grid.density_activation()
    r = grid.resolution
    l1 = F.mean(F.abs(dens))
    dx = F.abs(F.sub(dens[1:, :, :], dens[:-1, :, :]))
    dy = F.abs(F.sub(dens[:, 1:, :], dens[:, :-1, :]))
    dz = F.abs(F.sub(dens[:, :, 1:], dens[:, :, :-1]))
    count = 3 * (r - 1) * r * r
    tv = F.div(F.add(F.add(F.sum(dx), F.sum(dy)), F.sum(dz)), float(count))
    return F.add(F.mul(tv, tv_weight), F.mul(l1, l1_weight))


def nerf_loss(rendered: Tensor, target, grid: VoxelGrid | None = None, tv_weight: float = 1e-3,
              l1_weight: float = 1e-4) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=rendered.dtype))
    if rendered.shape != target.shape:
        raise F.ShapeError(f"nerf_loss: rendered {rendered.shape} vs target {target.shape}")
    loss = F.mse(rendered, target)
    if grid is not None and (tv_weight or l1_weight):
        loss = F.add(loss, reg_losses(grid, tv_weight, l1_weight))
    return loss


def render_image(grid: VoxelGrid, camera: Camera, background, n_samples: int = 128, chunk: int = 4096) -> np.ndarray:
    """Deterministic full-image render of a (frozen) grid, (H, W, 3) in [0, 1]."""
    rays = all_rays(camera)
    out = np.empty((len(rays), 3), dtype=np.float32)
    with no_grad():
        for s in range(0, len(rays), chunk):
            sub = rays.subset(slice(s, s + chunk))
            out[s : s + chunk] = grid(sub, n_samples, None, background).data
    return np.clip(out.reshape(camera.height, camera.width, 3), 0.0, 1.0)


# ---------------------------------------------------------------- ray batches


class RayBank:
    """Precomputed rays and target colours for every pixel of the training views."""

    def __init__(self, viewset: ViewSet, split: str = "train"):
        self.views = viewset.indices(split)
        self.height, self.width = viewset.resolution
        self.rays = [all_rays(viewset.cameras[v]) for v in self.views]
        self.targets = [viewset.images[v].reshape(-1, 3).astype(np.float32) for v in self.views]

    def sample_pixels(self, rng: np.random.Generator, batch: int) -> tuple[Rays, np.ndarray]:
        """Uniformly random pixels across all training views."""
        npix = self.height * self.width
        flat = rng.integers(0, len(self.views) * npix, size=batch)
        view, pix = np.divmod(flat, npix)
        parts = [self.rays[v].subset(pix[view == v]) for v in range(len(self.views))]
        tgts = [self.targets[v][pix[view == v]] for v in range(len(self.views))]
        rays = Rays(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("origins", "dirs", "near", "far", "hit")))
        return rays, np.concatenate(tgts)

    def patch(self, view: int, y0: int, x0: int, h: int, w: int) -> tuple[Rays, np.ndarray]:
        ys, xs = np.meshgrid(np.arange(y0, y0 + h), np.arange(x0, x0 + w), indexing="ij")
        pix = (ys * self.width + xs).reshape(-1)
        return self.rays[view].subset(pix), self.targets[view][pix]


class SubPatchBuffer:
    """Assembles rendered sub-patches into one full diffusion-sized patch."""

    def __init__(self, height: int = 32, width: int = 32, channels: int = 3):
        self.shape = (height, width, channels)
        self.reset()

    def reset(self) -> None:
        self.image = np.zeros(self.shape, dtype=np.float32)
        self.mask = np.zeros(self.shape[:2], dtype=bool)

    @property
    def complete(self) -> bool:
        return bool(self.mask.all())

    def add(self, sub: np.ndarray, offset: tuple[int, int]) -> None:
        oy, ox = offset
        h, w = sub.shape[:2]
        if oy < 0 or ox < 0 or oy + h > self.shape[0] or ox + w > self.shape[1]:
            raise ValueError(f"sub-patch {sub.shape[:2]} at {offset} exceeds buffer {self.shape[:2]}")
        if self.mask[oy : oy + h, ox : ox + w].any():
            raise ValueError(f"sub-patch at {offset} overlaps already filled pixels")
        self.image[oy : oy + h, ox : ox + w] = sub
        self.mask[oy : oy + h, ox : ox + w] = True

    def emit(self) -> np.ndarray:
        if not self.complete:
            raise RuntimeError("buffer emitted before all sub-patches were filled")
        img = self.image.copy()
        self.reset()
        return img


@dataclass
class PatchSchedule:
    """Walks a full patch in sub-patch strips; a new patch location is drawn per cycle.

    Patch positions are uniform over the valid offsets of a uniformly chosen view.
    """

    n_views: int
    image_hw: tuple[int, int]
    patch_hw: tuple[int, int] = (32, 32)
    sub_hw: tuple[int, int] = (16, 32)  # rows x cols of each rendered strip
    _queue: list = field(default_factory=list)

    def __post_init__(self):
        ph, pw = self.patch_hw
        sh, sw = self.sub_hw
        if ph % sh or pw % sw:
            raise ValueError("sub-patch must tile the full patch exactly")

    @property
    def iterations_per_patch(self) -> int:
        return (self.patch_hw[0] // self.sub_hw[0]) * (self.patch_hw[1] // self.sub_hw[1])

    def next(self, rng: np.random.Generator) -> tuple[int, int, int, tuple[int, int], tuple[int, int]]:
        """(view, patch_y, patch_x, sub_offset, sub_hw) for the next training iteration."""
        if not self._queue:
            ph, pw = self.patch_hw
            view = int(rng.integers(self.n_views))
            y0 = int(rng.integers(0, self.image_hw[0] - ph + 1))
            x0 = int(rng.integers(0, self.image_hw[1] - pw + 1))
            sh, sw = self.sub_hw
            self._queue = [(view, y0, x0, (oy, ox)) for oy in range(0, ph, sh) for ox in range(0, pw, sw)]
        view, y0, x0, off = self._queue.pop(0)
        return view, y0, x0, off, self.sub_hw
