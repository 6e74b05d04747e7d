"""Sweep the fidelity weight w at inference on a finished run's held-out views.

    python scripts/sweep_fidelity_weight.py runs/desk --weights 0 0.25 0.5 0.75 1
"""
import argparse

import numpy as np

from nerfrestore.pipeline.evaluate import proxy_distance, sampler_config
from nerfrestore.pipeline.metrics import psnr
from nerfrestore.restoration import restore
from run_tools import open_run, table

if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("run_dir")
    parser.add_argument("--weights", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75, 1.0])
    args = parser.parse_args()
    run = open_run(args.run_dir)
    scores = {w: ([], []) for w in args.weights}
    raw_psnr = []
    for v, ref, raw in run.test_pairs():
        raw_psnr.append(psnr(raw, ref))
        for w in args.weights:
            out = restore(raw, run.comps.codec, run.comps.denoiser, run.comps.cfw, w,
                          sampler_config(run.cfg, run.cfg.seed * 1000 + v))
            scores[w][0].append(psnr(out, ref))
            scores[w][1].append(proxy_distance(run.comps, ref, out))
    print(f"raw PSNR {np.mean(raw_psnr):.4f}")
    print(table(["w", "PSNR", "proxy"], [[w, float(np.mean(p)), float(np.mean(q))] for w, (p, q) in scores.items()]))
