"""Wall-clock cost of the main building blocks at the default configuration."""
import time

import numpy as np

from nerfrestore.autodiff import AdamState, Tensor, adam_step, backward, no_grad, reset_tape
from nerfrestore.codec import Codec
from nerfrestore.diffusion import ConditionalDenoiser, NoiseSchedule, diffusion_loss
from nerfrestore.pipeline.config import RunConfig
from nerfrestore.pipeline.train import codec_config, diffusion_config
from nerfrestore.restoration import CFWModule, SamplerConfig, restore


def timed(label: str, fn, repeats: int = 3) -> None:
    fn()  # warm-up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
        reset_tape()
    print(f"{label:<40} {(time.perf_counter() - t0) / repeats:8.3f} s")


if __name__ == "__main__":
    cfg = RunConfig()
    rng = np.random.default_rng(0)
    codec = Codec(codec_config(cfg), seed=0)
    den = ConditionalDenoiser(diffusion_config(cfg), seed=1)
    cfw = CFWModule(codec_config(cfg), seed=2)
    schedule = NoiseSchedule(cfg.T, cfg.beta_start, cfg.beta_end)
    x = Tensor(rng.uniform(size=(cfg.codec_batch, 3, 32, 32)).astype(np.float32))
    z = rng.normal(size=(4, 4, 8, 8)).astype(np.float32)
    params = {f"{group}.{k}": v for group in ("sft", "cond_encoder")
              for k, v in getattr(den, group).named_parameters().items()}
    state = AdamState(lr=cfg.diff_lr)

    def codec_forward():
        with no_grad():
            codec(x)

    def conditional_step():
        backward(diffusion_loss(den.predict_noise, z, z, rng, schedule))
        adam_step(params, state)

    timed("codec forward, batch 8 at 32x32", codec_forward)
    timed("conditional diffusion step, batch 4", conditional_step)
    image = rng.uniform(size=(cfg.resolution, cfg.resolution, 3)).astype(np.float32)
    timed(f"restore {cfg.resolution}x{cfg.resolution}, DDIM {cfg.steps}",
          lambda: restore(image, codec, den, cfw, 1.0, SamplerConfig(steps=cfg.steps)), repeats=1)
