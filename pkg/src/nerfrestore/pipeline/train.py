"""Two-stage training driver: codec and prior pretraining, joint NeRF/diffusion, CFW/decoder/GAN."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..autodiff import AdamState, Module, Tensor, adam_step, backward, no_grad
from ..codec import Codec, CodecConfig, random_patches, to_nchw, train_codec
from ..diffusion import ConditionalDenoiser, DiffusionConfig, diffusion_loss, reverse_sample, stage1_loss
from ..radiance_field import PatchSchedule, RayBank, SubPatchBuffer, VoxelGrid, nerf_loss, render_image
from ..restoration import CFWModule, PatchDiscriminator, Stage2Weights, discriminator_loss, fused_decode, generator_loss
from ..scene import ViewSet, default_scene, generate_viewset
from .checkpoint import Checkpoint, CheckpointError, save_checkpoint
from .config import RunConfig
from .metrics import psnr

log = logging.getLogger("nerfrestore")

STAGE1_TRAINABLE = frozenset({"grid", "cond_encoder", "sft"})
STAGE2_TRAINABLE = frozenset({"cfw", "decoder", "discriminator"})
STAGE_GROUPS = {
    "codec": ("encoder", "decoder", "unet"),
    "stage1": ("encoder", "decoder", "unet", "cond_encoder", "sft", "grid"),
    "stage2": ("encoder", "decoder", "unet", "cond_encoder", "sft", "grid", "cfw", "discriminator"),
}


class TrainingDiverged(RuntimeError):
    pass


def stream(cfg: RunConfig, name: str) -> np.random.Generator:
    """Independent named RNG stream derived from the run seed."""
    tag = int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng([cfg.seed, tag])


# ---------------------------------------------------------------- components


def codec_config(cfg: RunConfig) -> CodecConfig:
    return CodecConfig(cfg.codec_factor, cfg.latent_channels, cfg.codec_base, tuple(cfg.tap_levels))


def diffusion_config(cfg: RunConfig) -> DiffusionConfig:
    return DiffusionConfig(cfg.latent_channels, tuple(cfg.unet_channels), cfg.temb_dim, cfg.T, cfg.beta_start,
                           cfg.beta_end, cfg.sft_encoder_side)


@dataclass
class Components:
    codec: Codec
    denoiser: ConditionalDenoiser
    grid: VoxelGrid | None = None
    cfw: CFWModule | None = None
    disc: PatchDiscriminator | None = None

    @classmethod
    def build(cls, cfg: RunConfig, stage: str = "stage2") -> "Components":
        comps = cls(Codec(codec_config(cfg), cfg.seed), ConditionalDenoiser(diffusion_config(cfg), cfg.seed + 10))
        return comps.promote(cfg, stage)

    def promote(self, cfg: RunConfig, stage: str) -> "Components":
        """Add freshly initialized modules that ``stage`` needs and that are not present yet."""
        if "grid" in STAGE_GROUPS[stage] and self.grid is None:
            self.grid = VoxelGrid(cfg.grid_resolution, rng=np.random.default_rng(cfg.seed + 20))
        if "cfw" in STAGE_GROUPS[stage] and self.cfw is None:
            self.cfw = CFWModule(codec_config(cfg), cfg.seed + 30, cfg.cfw_dense_layers)
            self.disc = PatchDiscriminator(cfg.seed + 40)
        return self

    def groups(self) -> dict[str, Module]:
        out = {
            "encoder": self.codec.encoder,
            "decoder": self.codec.decoder,
            "unet": self.denoiser.unet,
            "cond_encoder": self.denoiser.cond_encoder,
            "sft": self.denoiser.sft,
        }
        for name, mod in (("grid", self.grid), ("cfw", self.cfw), ("discriminator", self.disc)):
            if mod is not None:
                out[name] = mod
        return out

    def configure(self, trainable) -> None:
        for name, mod in self.groups().items():
            mod.set_trainable(name in trainable)

    def params(self, names) -> dict[str, Tensor]:
        groups = self.groups()
        out = {}
        for n in names:
            out.update(groups[n].named_parameters(n + "."))
        return out

    def tensors(self, stage: str) -> dict[str, np.ndarray]:
        groups = self.groups()
        out = {}
        for n in STAGE_GROUPS[stage]:
            out.update(groups[n].state_dict(n + "."))
        return out

    def to_checkpoint(self, cfg: RunConfig, stage: str, extra: dict | None = None) -> Checkpoint:
        meta = {
            "stage": stage,
            "config_hash": cfg.hash(),
            "latent_scale": float(self.codec.latent_scale),
            "config": cfg.to_dict(),
        }
        meta.update(extra or {})
        return Checkpoint(self.tensors(stage), meta)


def config_from_checkpoint(ckpt: Checkpoint) -> RunConfig:
    stored = ckpt.metadata.get("config")
    if stored is None:
        raise CheckpointError("checkpoint metadata carries no run configuration")
    return RunConfig().with_overrides({k: ",".join(map(str, v)) if isinstance(v, list) else str(v)
                                       for k, v in stored.items()})


def load_components(ckpt: Checkpoint, cfg: RunConfig | None = None, stage: str | None = None) -> Components:
    """Rebuild modules for ``stage`` (default: the checkpoint's own stage) and load their weights."""
    cfg = cfg or config_from_checkpoint(ckpt)
    stage = stage or ckpt.metadata.get("stage")
    if stage not in STAGE_GROUPS:
        raise CheckpointError(f"checkpoint stage tag {stage!r} is not one of {sorted(STAGE_GROUPS)}")
    comps = Components.build(cfg, stage)
    groups = comps.groups()
    expected = [n + "." + k for n in STAGE_GROUPS[stage] for k in groups[n].named_parameters()]
    ckpt.require(expected)
    for n in STAGE_GROUPS[stage]:
        groups[n].load_state_dict(ckpt.tensors, prefix=n + ".")
    comps.codec.latent_scale = float(ckpt.metadata.get("latent_scale", 1.0))
    return comps


def _check_finite(value: float, what: str, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"{what} became non-finite at step {step}")


# ---------------------------------------------------------------- dataset


def make_dataset(cfg: RunConfig) -> ViewSet:
    scene = default_scene(cfg.checker_freq, cfg.stripe_freq, tuple(cfg.background))
    return generate_viewset(scene, cfg.n_train, cfg.n_test, cfg.resolution, cfg.spp, cfg.seed, cfg.reference_samples)


def save_dataset(viewset: ViewSet, cfg: RunConfig, directory: str | Path) -> Path:
    from .imageio import write_png

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "views.npz"
    np.savez(path, images=np.stack(viewset.images).astype(np.float32), splits=np.array(viewset.splits),
             config_hash=np.array(cfg.hash()))
    for i, (img, split) in enumerate(zip(viewset.images, viewset.splits)):
        write_png(directory / f"{split}_{i:02d}.png", img)
    return path


def load_dataset(cfg: RunConfig, directory: str | Path) -> ViewSet:
    from ..scene import make_cameras

    path = Path(directory) / "views.npz"
    if not path.exists():
        raise FileNotFoundError(f"dataset not found at {path}; run make-dataset first")
    data = np.load(path)
    cams, splits = make_cameras(cfg.n_train, cfg.n_test, cfg.resolution, cfg.seed)
    if list(data["splits"]) != splits:
        raise ValueError(f"dataset at {path} was generated with a different view configuration")
    return ViewSet(cams, [im for im in data["images"]], splits)


def train_images(viewset: ViewSet) -> list[np.ndarray]:
    return [viewset.images[i] for i in viewset.indices("train")]


# ---------------------------------------------------------------- codec and prior


def pretrain_prior(cfg: RunConfig, comps: Components, images: list[np.ndarray]) -> list[float]:
    """Unconditional noise-prediction training of the U-Net on clean latents."""
    rng = stream(cfg, "prior")
    unet_params = comps.params(["unet"])
    comps.configure({"unet"})
    state = AdamState(lr=cfg.prior_lr)
    curve = []
    for step in range(cfg.prior_steps):
        with no_grad():
            z, _ = comps.codec.encode(Tensor(random_patches(images, rng, cfg.prior_batch, cfg.patch_size)))
        loss = diffusion_loss(lambda zt, t, c: comps.denoiser.predict_noise(zt, t), z.data, None, rng,
                              comps.denoiser.schedule)
        backward(loss)
        adam_step(unet_params, state)
        curve.append(float(loss.data))
        _check_finite(curve[-1], "prior loss", step)
        if (step + 1) % cfg.eval_interval == 0:
            log.info("prior step %d loss %.4f", step + 1, float(np.mean(curve[-cfg.eval_interval:])))
    return curve


def run_codec_stage(cfg: RunConfig, viewset: ViewSet) -> tuple[Components, dict]:
    comps = Components.build(cfg, "codec")
    images = train_images(viewset)
    t0 = time.perf_counter()
    comps.configure({"encoder", "decoder"})

    def on_step(step: int, loss: float) -> None:
        _check_finite(loss, "codec loss", step)
        if (step + 1) % cfg.eval_interval == 0:
            log.info("codec step %d l1 %.4f", step + 1, loss)

    codec_curve = train_codec(comps.codec, images, cfg.codec_steps, cfg.codec_batch, cfg.codec_lr, cfg.patch_size,
                              cfg.seed, on_step)
    log.info("codec done: latent scale %.4f", comps.codec.latent_scale)
    prior_curve = pretrain_prior(cfg, comps, images)
    comps.configure(())
    history = {
        "codec_final_l1": float(np.mean(codec_curve[-100:])) if codec_curve else None,
        "prior_final_loss": float(np.mean(prior_curve[-100:])) if prior_curve else None,
        "seconds": time.perf_counter() - t0,
    }
    return comps, history


# ---------------------------------------------------------------- stage one


def test_psnr(cfg: RunConfig, grid: VoxelGrid, viewset: ViewSet) -> float:
    vals = [psnr(render_image(grid, viewset.cameras[i], cfg.background, cfg.eval_samples), viewset.images[i])
            for i in viewset.indices("test")]
    return float(np.mean(vals))


class Stage1Trainer:
    """Pixel-phase NeRF fitting followed by patch-phase joint NeRF + conditional diffusion."""

    def __init__(self, cfg: RunConfig, comps: Components, viewset: ViewSet):
        if comps.grid is None:
            raise ValueError("stage one needs a radiance grid")
        self.cfg = cfg
        self.comps = comps
        self.viewset = viewset
        self.rng = stream(cfg, "stage1")
        self.diff_rng = stream(cfg, "stage1-diffusion")
        self.bank = RayBank(viewset, "train")
        self.schedule = PatchSchedule(len(self.bank.views), viewset.resolution, (cfg.patch_size, cfg.patch_size),
                                      (cfg.sub_patch_h, cfg.sub_patch_w))
        self.buffer = SubPatchBuffer(cfg.patch_size, cfg.patch_size)
        self.grid_params = comps.params(["grid"])
        self.diff_params = comps.params(["cond_encoder", "sft"])
        self.grid_opt = AdamState(lr=cfg.grid_lr)
        self.diff_opt = AdamState(lr=cfg.diff_lr)
        self.pixel_iters = int(round(cfg.stage1_iters * cfg.pixel_fraction))
        self.deferred: list[tuple[int, int, int]] = []
        self.diffusion_steps = 0
        comps.configure(STAGE1_TRAINABLE)

    # -- losses

    def _nerf(self, rays, target) -> Tensor:
        c = self.cfg
        out = self.comps.grid(rays, c.train_samples, self.rng, c.background)
        return out, nerf_loss(out, target, self.comps.grid, c.tv_weight, c.l1_weight)

    def diffusion_term(self, lq_patch: np.ndarray, hq_patch: np.ndarray) -> Tensor:
        """Conditional noise-prediction loss for one (detached LQ, HQ) patch pair."""
        codec, den = self.comps.codec, self.comps.denoiser
        with no_grad():
            z_lq, _ = codec.encode(Tensor(to_nchw(lq_patch)))
            z_hq, _ = codec.encode(Tensor(to_nchw(hq_patch)))
        return diffusion_loss(den.predict_noise, z_hq.data, z_lq.data, self.diff_rng, den.schedule)

    def pixel_loss(self) -> Tensor:
        rays, target = self.bank.sample_pixels(self.rng, self.cfg.ray_batch)
        return self._nerf(rays, target)[1]

    def patch_losses(self) -> tuple[Tensor, Tensor | None, tuple | None]:
        """NeRF loss on one sub-patch plus the diffusion term when a full patch is assembled."""
        view, y0, x0, (oy, ox), (sh, sw) = self.schedule.next(self.rng)
        rays, target = self.bank.patch(view, y0 + oy, x0 + ox, sh, sw)
        out, l_nerf = self._nerf(rays, target)
        self.buffer.add(np.clip(out.data, 0, 1).reshape(sh, sw, 3), (oy, ox))
        if not self.buffer.complete:
            return l_nerf, None, None
        lq = self.buffer.emit()
        loc = (view, y0, x0)
        if self.cfg.separate_stage1:
            return l_nerf, None, loc
        return l_nerf, self.diffusion_term(lq, self._hq(loc)), loc

    def _hq(self, loc) -> np.ndarray:
        view, y0, x0 = loc
        p = self.cfg.patch_size
        return self.viewset.images[self.bank.views[view]][y0 : y0 + p, x0 : x0 + p]

    # -- steps

    def step(self, it: int) -> dict:
        if it < self.pixel_iters:
            loss = self.pixel_loss()
            backward(loss)
            adam_step(self.grid_params, self.grid_opt)
            return {"nerf": float(loss.data)}
        l_nerf, l_diff, loc = self.patch_losses()
        total = stage1_loss(l_nerf, l_diff, self.cfg.lam)
        _check_finite(float(total.data), "stage-one loss", it)
        backward(total)
        adam_step(self.grid_params, self.grid_opt)
        rec = {"nerf": float(l_nerf.data)}
        if l_diff is not None and self.cfg.lam > 0:
            adam_step(self.diff_params, self.diff_opt)
            self.diffusion_steps += 1
            rec["diffusion"] = float(l_diff.data)
        elif loc is not None and self.cfg.separate_stage1:
            self.deferred.append(loc)
        return rec

    def render_patch(self, loc) -> np.ndarray:
        """Re-render a full patch from the current grid with training-style sampling."""
        view, y0, x0 = loc
        p = self.cfg.patch_size
        rays, _ = self.bank.patch(view, y0, x0, p, p)
        with no_grad():
            out = self.comps.grid(rays, self.cfg.train_samples, self.rng, self.cfg.background)
        return np.clip(out.data, 0, 1).reshape(p, p, 3)

    def deferred_diffusion(self) -> list[float]:
        """Separate-schedule ablation: diffusion updates on patches rendered by the final NeRF."""
        losses = []
        if self.cfg.lam == 0:
            self.deferred.clear()
        for k, loc in enumerate(self.deferred):
            l_diff = self.diffusion_term(self.render_patch(loc), self._hq(loc))
            _check_finite(float(l_diff.data), "diffusion loss", k)
            backward(l_diff)
            adam_step(self.diff_params, self.diff_opt)
            self.diffusion_steps += 1
            losses.append(float(l_diff.data))
        self.deferred.clear()
        return losses

    def probe_loss(self) -> Tensor:
        """One joint loss on a fresh full patch, for the gradient-presence audit."""
        rng = np.random.default_rng(12345)
        view = int(rng.integers(len(self.bank.views)))
        h, w = self.viewset.resolution
        p = self.cfg.patch_size
        y0, x0 = int(rng.integers(0, h - p + 1)), int(rng.integers(0, w - p + 1))
        rays, target = self.bank.patch(view, y0, x0, p, p)
        out, l_nerf = self._nerf(rays, target)
        lq = np.clip(out.data, 0, 1).reshape(p, p, 3)
        return stage1_loss(l_nerf, self.diffusion_term(lq, self._hq((view, y0, x0))), self.cfg.lam)


def run_stage1(cfg: RunConfig, comps: Components, viewset: ViewSet, ckpt_dir: str | Path | None = None) -> dict:
    trainer = Stage1Trainer(cfg, comps, viewset)
    ckpt_dir = Path(ckpt_dir) if ckpt_dir is not None else None
    history: dict = {"eval": [], "phase_switch": trainer.pixel_iters, "diffusion_steps": 0}
    t0 = time.perf_counter()
    recent: list[dict] = []
    for it in range(cfg.stage1_iters):
        if it == trainer.pixel_iters:
            log.info("stage1: switching from pixel to patch phase at iteration %d", it)
        try:
            recent.append(trainer.step(it))
        except TrainingDiverged:
            log.error("stage1 diverged at iteration %d; last good checkpoint kept", it)
            raise
        _check_finite(recent[-1]["nerf"], "stage-one loss", it)
        if (it + 1) % cfg.eval_interval == 0 or it + 1 == cfg.stage1_iters:
            value = test_psnr(cfg, comps.grid, viewset)
            nerf = float(np.mean([r["nerf"] for r in recent]))
            diffs = [r["diffusion"] for r in recent if "diffusion" in r]
            history["eval"].append({"iteration": it + 1, "test_psnr": value, "nerf_loss": nerf,
                                    "diffusion_loss": float(np.mean(diffs)) if diffs else None})
            log.info("stage1 it %d nerf %.5f diff %s test psnr %.2f", it + 1, nerf,
                     f"{np.mean(diffs):.4f}" if diffs else "-", value)
            recent = []
            if ckpt_dir is not None:
                save_checkpoint(ckpt_dir / "stage1_last_good.ckpt",
                                comps.to_checkpoint(cfg, "stage1", {"iteration": it + 1}))
    if cfg.separate_stage1:
        losses = trainer.deferred_diffusion()
        log.info("stage1: %d deferred diffusion steps, mean loss %.4f", len(losses),
                 float(np.mean(losses)) if losses else float("nan"))
    history["diffusion_steps"] = trainer.diffusion_steps
    history["audit"] = gradient_audit_stage1(trainer)
    history["seconds"] = time.perf_counter() - t0
    comps.configure(())
    return history


# ---------------------------------------------------------------- stage two


@dataclass
class PatchPairs:
    """Aligned low-quality renders and references for sampling training patches."""

    lq: list[np.ndarray]
    hq: list[np.ndarray]
    size: int
    augment: bool = False

    def sample(self, rng: np.random.Generator, count: int) -> tuple[np.ndarray, np.ndarray]:
        lq, hq = [], []
        for _ in range(count):
            v = int(rng.integers(len(self.lq)))
            h, w = self.lq[v].shape[:2]
            y, x = int(rng.integers(0, h - self.size + 1)), int(rng.integers(0, w - self.size + 1))
            a = self.lq[v][y : y + self.size, x : x + self.size]
            b = self.hq[v][y : y + self.size, x : x + self.size]
            if self.augment:  # one of the 8 square symmetries, shared by both patches
                k, flip = int(rng.integers(4)), bool(rng.integers(2))
                a, b = (np.rot90(p[:, ::-1] if flip else p, k) for p in (a, b))
            lq.append(a)
            hq.append(b)
        return to_nchw(np.stack(lq)), to_nchw(np.stack(hq))


def render_split(cfg: RunConfig, grid: VoxelGrid, viewset: ViewSet, split: str) -> list[np.ndarray]:
    return [render_image(grid, viewset.cameras[i], cfg.background, cfg.eval_samples) for i in viewset.indices(split)]


class Stage2Trainer:
    """Alternating generator (CFW + decoder) and discriminator updates on on-the-fly diffusion samples."""

    def __init__(self, cfg: RunConfig, comps: Components, train_pairs: PatchPairs):
        if comps.cfw is None or comps.disc is None:
            raise ValueError("stage two needs CFW and discriminator modules")
        self.cfg = cfg
        self.comps = comps
        self.pairs = train_pairs
        self.rng = stream(cfg, "stage2")
        self.weights = Stage2Weights(cfg.lambda_p, cfg.lambda_g)
        self.gen_params = comps.params(["cfw", "decoder"])
        self.disc_params = comps.params(["discriminator"])
        self.gen_opt = AdamState(lr=cfg.stage2_lr)
        self.disc_opt = AdamState(lr=cfg.stage2_lr)
        self.ema = {k: p.data.copy() for k, p in self.gen_params.items()} if cfg.stage2_ema > 0 else None
        comps.configure(STAGE2_TRAINABLE)

    def update_ema(self) -> None:
        if self.ema is None:
            return
        decay = self.cfg.stage2_ema
        for k, p in self.gen_params.items():
            self.ema[k] *= decay
            self.ema[k] += (1.0 - decay) * p.data

    def load_ema(self) -> None:
        """Replace the generator weights by their running average."""
        if self.ema is not None:
            for k, p in self.gen_params.items():
                p.data[...] = self.ema[k]

    def sample_candidates(self, lq: np.ndarray, seed: int) -> tuple[np.ndarray, dict]:
        """Frozen-diffusion latent sample conditioned on the LQ batch, plus the LQ encoder taps."""
        codec, den = self.comps.codec, self.comps.denoiser
        with no_grad():
            z_lq, taps = codec.encode(Tensor(lq))
            z0 = reverse_sample(lambda z, t: den.predict_noise(Tensor(z), t, z_lq).data, z_lq.shape, den.schedule,
                                "ddim", self.cfg.stage2_sample_steps, seed)
        return z0, taps

    def restore_batch(self, lq: np.ndarray, seed: int) -> Tensor:
        z0, taps = self.sample_candidates(lq, seed)
        return fused_decode(self.comps.codec, Tensor(z0), taps, self.comps.cfw, self.cfg.w)

    def generator_pass(self, lq, hq, seed) -> tuple[Tensor, Tensor]:
        self.comps.disc.set_trainable(False)
        x_hat = self.restore_batch(lq, seed)
        loss = generator_loss(Tensor(hq), x_hat, self.comps.disc, self.comps.codec, self.weights)
        return loss, x_hat

    def discriminator_pass(self, hq, x_hat: Tensor) -> Tensor:
        self.comps.disc.set_trainable(True)
        return discriminator_loss(Tensor(hq), x_hat, self.comps.disc)

    def step(self, it: int) -> dict:
        lq, hq = self.pairs.sample(self.rng, self.cfg.stage2_batch)
        seed = int(self.rng.integers(2 ** 31))
        g_loss, x_hat = self.generator_pass(lq, hq, seed)
        _check_finite(float(g_loss.data), "generator loss", it)
        backward(g_loss)
        adam_step(self.gen_params, self.gen_opt)
        self.update_ema()
        d_loss = self.discriminator_pass(hq, x_hat)
        _check_finite(float(d_loss.data), "discriminator loss", it)
        backward(d_loss)
        adam_step(self.disc_params, self.disc_opt)
        return {"generator": float(g_loss.data), "discriminator": float(d_loss.data)}

    def held_out_l1(self, pairs: PatchPairs, count: int = 8) -> float:
        rng = np.random.default_rng([self.cfg.seed, 777])
        lq, hq = pairs.sample(rng, count)
        with no_grad():
            x_hat = self.restore_batch(lq, seed=self.cfg.seed + 777)
        return float(np.mean(np.abs(x_hat.data - hq)))


def run_stage2(cfg: RunConfig, comps: Components, viewset: ViewSet, ckpt_dir: str | Path | None = None) -> dict:
    t0 = time.perf_counter()
    train_lq = render_split(cfg, comps.grid, viewset, "train")
    test_lq = render_split(cfg, comps.grid, viewset, "test")
    train_pairs = PatchPairs(train_lq, train_images(viewset), cfg.patch_size, cfg.stage2_augment)
    test_pairs = PatchPairs(test_lq, [viewset.images[i] for i in viewset.indices("test")], cfg.patch_size)
    trainer = Stage2Trainer(cfg, comps, train_pairs)
    history: dict = {"eval": [], "held_out_l1_before": trainer.held_out_l1(test_pairs)}
    ckpt_dir = Path(ckpt_dir) if ckpt_dir is not None else None
    recent: list[dict] = []
    d_finite = True
    for it in range(cfg.stage2_iters):
        try:
            recent.append(trainer.step(it))
        except TrainingDiverged:
            log.error("stage2 diverged at iteration %d; last good checkpoint kept", it)
            raise
        d_finite &= bool(np.isfinite(recent[-1]["discriminator"]))
        if (it + 1) % cfg.eval_interval == 0 or it + 1 == cfg.stage2_iters:
            l1 = trainer.held_out_l1(test_pairs)
            g = float(np.mean([r["generator"] for r in recent]))
            d = float(np.mean([r["discriminator"] for r in recent]))
            history["eval"].append({"iteration": it + 1, "generator": g, "discriminator": d, "held_out_l1": l1})
            log.info("stage2 it %d gen %.4f disc %.4f held-out l1 %.4f", it + 1, g, d, l1)
            recent = []
            if ckpt_dir is not None:
                save_checkpoint(ckpt_dir / "stage2_last_good.ckpt",
                                comps.to_checkpoint(cfg, "stage2", {"iteration": it + 1}))
    trainer.load_ema()
    history["held_out_l1_after"] = trainer.held_out_l1(test_pairs)
    history["discriminator_finite"] = d_finite
    history["audit"] = gradient_audit_stage2(trainer)
    history["seconds"] = time.perf_counter() - t0
    comps.configure(())
    return history


# ---------------------------------------------------------------- gradient-presence audit


def _nonzero(params: dict[str, Tensor]) -> bool:
    return any(p.grad is not None and np.any(p.grad != 0) for p in params.values())


def _grad_presence(comps: Components) -> dict[str, bool]:
    return {name: _nonzero(mod.named_parameters()) for name, mod in comps.groups().items()}


def gradient_audit_stage1(trainer: Stage1Trainer) -> dict[str, bool]:
    """Which component groups receive nonzero gradient from one stage-one probe step."""
    comps = trainer.comps
    comps.configure(STAGE1_TRAINABLE)
    backward(trainer.probe_loss())
    present = _grad_presence(comps)
    for mod in comps.groups().values():
        mod.zero_grad()
    return present


def gradient_audit_stage2(trainer: Stage2Trainer) -> dict[str, bool]:
    """Union of groups touched by one generator and one discriminator probe step."""
    comps = trainer.comps
    comps.configure(STAGE2_TRAINABLE)
    rng = np.random.default_rng(54321)
    lq, hq = trainer.pairs.sample(rng, 2)
    g_loss, x_hat = trainer.generator_pass(lq, hq, seed=54321)
    backward(g_loss)
    present = _grad_presence(comps)
    for mod in comps.groups().values():
        mod.zero_grad()
    backward(trainer.discriminator_pass(hq, x_hat))
    present = {k: v or _nonzero(comps.groups()[k].named_parameters()) for k, v in present.items()}
    for mod in comps.groups().values():
        mod.zero_grad()
    comps.configure(STAGE2_TRAINABLE)
    return present
