"""Analytic ground-truth scene, pinhole cameras and supersampled reference views."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OPAQUE_DENSITY = 40.0


@dataclass(frozen=True)
class Texture:
    kind: str  # "checker" or "stripes"
    freq: float  # cycles per unit length
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    axis: int = 2  # stripes only

    def __post_init__(self):
        if self.freq <= 0:
            raise ValueError("texture frequency must be positive")
        if self.kind not in ("checker", "stripes"):
            raise ValueError(f"unknown texture kind {self.kind!r}")

    def evaluate(self, p: np.ndarray) -> np.ndarray:
        """Colour at points ``p`` of shape (N, 3)."""
        a = np.asarray(self.color_a, dtype=p.dtype)
        b = np.asarray(self.color_b, dtype=p.dtype)
        if self.kind == "checker":
            # cells of width 1/(2 freq); floor indexing puts a boundary point in the upper cell
            cells = np.floor(2.0 * self.freq * p).astype(np.int64)
            mix = (cells.sum(axis=1) % 2).astype(p.dtype)
        else:
            mix = 0.5 + 0.5 * np.sin(2.0 * np.pi * self.freq * p[:, self.axis])
        return a + (b - a) * mix[:, None]


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    texture: Texture

    def contains(self, p: np.ndarray) -> np.ndarray:
        d = p - np.asarray(self.center, dtype=p.dtype)
        return (d * d).sum(axis=1) <= self.radius ** 2

    def bounds(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    texture: Texture

    def contains(self, p: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo, dtype=p.dtype)
        hi = np.asarray(self.hi, dtype=p.dtype)
        return np.all((p >= lo) & (p <= hi), axis=1)

    def bounds(self):
        return np.asarray(self.lo), np.asarray(self.hi)


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple = ()
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for prim in self.primitives:
            lo, hi = prim.bounds()
            if np.any(lo < -1e-9) or np.any(hi > 1 + 1e-9):
                raise ValueError(f"primitive {prim} leaves the unit cube")


def default_scene(checker_freq: float = 14.0, stripe_freq: float = 13.0,
                  background=(0.85, 0.9, 1.0)) -> AnalyticScene:
    """Checkered pedestal with a striped sphere resting on it."""
    pedestal = Box(
        lo=(0.08, 0.08, 0.1), hi=(0.92, 0.92, 0.3),
        texture=Texture("checker", checker_freq, (0.95, 0.85, 0.3), (0.15, 0.25, 0.65)),
    )
    ball = Sphere(
        center=(0.5, 0.5, 0.56), radius=0.26,
        texture=Texture("stripes", stripe_freq, (0.9, 0.25, 0.2), (0.95, 0.95, 0.9), axis=2),
    )
    return AnalyticScene(primitives=(pedestal, ball), background=tuple(background))


def scene_radiance(points: np.ndarray, scene: AnalyticScene) -> tuple[np.ndarray, np.ndarray]:
    """Density and colour at (N, 3) points. The first primitive containing a point wins."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64 if np.asarray(points).dtype == np.float64 else np.float32))
    n = points.shape[0]
    density = np.zeros(n, dtype=points.dtype)
    rgb = np.broadcast_to(np.asarray(scene.background, dtype=points.dtype), (n, 3)).copy()
    free = np.ones(n, dtype=bool)
    for prim in scene.primitives:
        hit = free & prim.contains(points)
        if hit.any():
            density[hit] = OPAQUE_DENSITY
            rgb[hit] = prim.texture.evaluate(points[hit])
            free &= ~hit
    return density, rgb


# ---------------------------------------------------------------- cameras


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    target: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    fov_y: float = np.deg2rad(40.0)
    width: int = 128
    height: int = 128

    def __post_init__(self):
        if not 0 < self.fov_y < np.pi:
            raise ValueError("fov must lie in (0, pi)")
        fwd = np.asarray(self.target, float) - np.asarray(self.position, float)
        if np.linalg.norm(fwd) == 0:
            raise ValueError("camera target coincides with position")
        if np.linalg.norm(np.cross(fwd, np.asarray(self.up, float))) < 1e-9 * np.linalg.norm(fwd):
            raise ValueError("look direction is parallel to up vector")

    @property
    def focal(self) -> float:
        return 0.5 * self.height / np.tan(0.5 * self.fov_y)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        fwd = np.asarray(self.target, float) - np.asarray(self.position, float)
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, float))
        right /= np.linalg.norm(right)
        true_up = np.cross(right, fwd)
        return right, true_up, fwd

    def rays(self, px: np.ndarray, py: np.ndarray, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions through continuous image coordinates.

        ``px`` runs left to right and ``py`` top to bottom; pixel (i, j) spans
        [i, i+1) x [j, j+1), so its centre is at (i + 0.5, j + 0.5).
        """
        right, up, fwd = self.basis()
        x = (np.asarray(px, float) - 0.5 * self.width) / self.focal
        y = -(np.asarray(py, float) - 0.5 * self.height) / self.focal
        d = x[..., None] * right + y[..., None] * up + fwd
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(np.asarray(self.position, float), d.shape)
        return o.astype(dtype), d.astype(dtype)


def intersect_unit_cube(origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab test against [0,1]^3; returns (near, far, hit)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (0.0 - origins) * inv
        t1 = (1.0 - origins) * inv
    tmin = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf)
    tmax = np.nan_to_num(np.maximum(t0, t1), nan=np.inf)
    near = np.maximum(tmin.max(axis=-1), 0.0)
    far = tmax.min(axis=-1)
    hit = far > near + 1e-6
    return near, np.where(hit, far, near + 1.0), hit


# ---------------------------------------------------------------- reference rendering


def _subpixel_offsets(rng: np.random.Generator, npix: int, spp: int) -> np.ndarray:
    """Stratified (Latin hypercube) offsets inside each pixel, shape (npix, spp, 2)."""
    u = rng.random((npix, spp, 2))
    perm = np.argsort(rng.random((npix, spp)), axis=1)
    k = np.arange(spp)[None, :]
    ox = (k + u[..., 0]) / spp
    oy = (perm + u[..., 1]) / spp
    return np.stack([ox, oy], axis=-1)


def render_rays_analytic(origins, dirs, scene: AnalyticScene, samples_per_ray: int, chunk: int = 16384) -> np.ndarray:
    """Integrate the analytic scene along rays with the radiance-field quadrature."""
    from .radiance_field import composite_np, stratified_depths

    near, far, hit = intersect_unit_cube(origins, dirs)
    out = np.broadcast_to(np.asarray(scene.background, np.float64), origins.shape).copy()
    idx = np.nonzero(hit)[0]
    for s in range(0, idx.size, chunk):
        sel = idx[s : s + chunk]
        t, delta = stratified_depths(near[sel], far[sel], samples_per_ray, rng=None)
        pts = origins[sel, None, :] + dirs[sel, None, :] * t[..., None]
        sigma, rgb = scene_radiance(pts.reshape(-1, 3), scene)
        out[sel] = composite_np(
            sigma.reshape(t.shape), rgb.reshape(t.shape + (3,)), delta, np.asarray(scene.background)
        )
    return out


def render_reference(camera: Camera, scene: AnalyticScene, spp: int = 8, samples_per_ray: int = 192,
                     seed: int = 0) -> np.ndarray:
    """Anti-aliased (H, W, 3) image averaging ``spp`` jittered sub-pixel rays per pixel."""
    if spp < 1:
        raise ValueError("spp must be >= 1")
    h, w = camera.height, camera.width
    rng = np.random.default_rng(seed)
    jj, ii = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    offs = _subpixel_offsets(rng, h * w, spp)
    px = ii.reshape(-1, 1) + offs[..., 0]
    py = jj.reshape(-1, 1) + offs[..., 1]
    o, d = camera.rays(px.reshape(-1), py.reshape(-1))
    rgb = render_rays_analytic(o, d, scene, samples_per_ray)
    img = rgb.reshape(h * w, spp, 3).mean(axis=1).reshape(h, w, 3)
    return np.clip(img, 0.0, 1.0)


@dataclass
class ViewSet:
    cameras: list
    images: list
    splits: list  # "train" / "test" per view

    def __post_init__(self):
        if len(self.cameras) != len(self.images) or len(self.cameras) != len(self.splits):
            raise ValueError("cameras, images and splits must have equal length")
        shapes = {im.shape for im in self.images}
        if len(shapes) > 1:
            raise ValueError(f"images have differing shapes {shapes}")
        if "train" not in self.splits or "test" not in self.splits:
            raise ValueError("both train and test splits must be non-empty")

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.images[0].shape[:2]


SCENE_CENTER = (0.5, 0.5, 0.45)


def make_cameras(n_train: int, n_test: int, resolution: int, seed: int, distance: float = 1.6,
                 fov_deg: float = 40.0) -> tuple[list[Camera], list[str]]:
    """Cameras on an upper-hemisphere ring, test views interleaved between train views."""
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one train and one test view")
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    center = np.asarray(SCENE_CENTER)
    az = 2 * np.pi * (np.arange(n) + rng.uniform(-0.2, 0.2, n)) / n
    elev = np.deg2rad(rng.uniform(22.0, 42.0, n))
    test_idx = set(np.round(np.linspace(0, n, n_test, endpoint=False) + n / (2 * n_test)).astype(int) % n)
    while len(test_idx) < n_test:  # only reachable for tiny n
        test_idx.add(int(rng.integers(n)))
    cams, splits = [], []
    for i in range(n):
        offset = np.array([np.cos(elev[i]) * np.cos(az[i]), np.cos(elev[i]) * np.sin(az[i]), np.sin(elev[i])])
        pos = center + distance * offset
        target = center + rng.uniform(-0.03, 0.03, 3)
        cams.append(Camera(tuple(pos), tuple(target), (0.0, 0.0, 1.0), np.deg2rad(fov_deg), resolution, resolution))
        splits.append("test" if i in test_idx else "train")
    return cams, splits


def generate_viewset(scene: AnalyticScene, n_train: int = 12, n_test: int = 4, resolution: int = 128,
                     spp: int = 8, seed: int = 0, samples_per_ray: int = 192) -> ViewSet:
    cams, splits = make_cameras(n_train, n_test, resolution, seed)
    images = [
        render_reference(cam, scene, spp=spp, samples_per_ray=samples_per_ray, seed=seed * 1000 + i)
        for i, cam in enumerate(cams)
    ]
    return ViewSet(cams, images, splits)
