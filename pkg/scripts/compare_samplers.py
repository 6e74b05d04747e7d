"""Deterministic DDIM with few steps against stochastic DDPM with many, on a finished run.

    python scripts/compare_samplers.py runs/desk [--ddim-steps 20] [--ddpm-steps 200]
"""
import argparse
import time

import numpy as np

from nerfrestore.pipeline.evaluate import proxy_distance
from nerfrestore.pipeline.metrics import psnr
from nerfrestore.restoration import SamplerConfig, restore
from run_tools import open_run, table

if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("run_dir")
    parser.add_argument("--ddim-steps", type=int, default=20)
    parser.add_argument("--ddpm-steps", type=int, default=200)
    args = parser.parse_args()
    run = open_run(args.run_dir)
    cfg = run.cfg
    samplers = {"ddim": args.ddim_steps, "ddpm": args.ddpm_steps}
    results = {name: ([], [], 0.0) for name in samplers}
    for v, ref, raw in run.test_pairs():
        for name, steps in samplers.items():
            scfg = SamplerConfig(name, steps, cfg.tile, cfg.stride, cfg.tile_sigma, cfg.seed * 1000 + v)
            t0 = time.perf_counter()
            out = restore(raw, run.comps.codec, run.comps.denoiser, run.comps.cfw, cfg.w, scfg)
            p, q, sec = results[name]
            results[name] = (p + [psnr(out, ref)], q + [proxy_distance(run.comps, ref, out)],
                             sec + time.perf_counter() - t0)
    rows = [[f"{n} x{samplers[n]}", float(np.mean(p)), float(np.mean(q)), sec / len(p)]
            for n, (p, q, sec) in results.items()]
    print(table(["sampler", "PSNR", "proxy", "s/view"], rows, fmt="{:>14}"))
