"""Held-out evaluation: raw grid renders vs restored renders, written as CSV, JSON and image grids."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import Tensor, no_grad
from ..codec import to_nchw
from ..radiance_field import render_image
from ..restoration import SamplerConfig, perceptual_proxy, restore
from ..scene import ViewSet
from .config import RunConfig
from .imageio import side_by_side, write_png
from .metrics import psnr, ssim
from .train import Components

log = logging.getLogger("nerfrestore")

BASE_COLUMNS = ("view", "psnr_raw", "psnr_restored", "psnr_gain", "ssim_raw", "ssim_restored", "proxy_raw",
                "proxy_restored")


def w_column(w: float) -> str:
    return f"psnr_restored_w{w:g}"


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    @property
    def columns(self) -> list[str]:
        extra = [k for k in (self.rows[0] if self.rows else {}) if k not in BASE_COLUMNS]
        return list(BASE_COLUMNS) + extra

    @property
    def aggregates(self) -> dict[str, float]:
        return {c: float(np.mean([r[c] for r in self.rows])) for c in self.columns if c != "view"}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for r in self.rows:
                writer.writerow([r["view"]] + [repr(float(r[c])) for c in self.columns[1:]])
            agg = self.aggregates
            writer.writerow(["mean"] + [repr(agg[c]) for c in self.columns[1:]])

    def write_json(self, path: str | Path) -> None:
        payload = {"per_view": self.rows, "aggregate": self.aggregates, "manifest": self.manifest}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def read_csv(path: str | Path) -> tuple[list[dict], dict[str, float]]:
    """Per-view rows and the aggregate ``mean`` row of a metrics CSV."""
    with open(path, newline="") as fh:
        records = list(csv.DictReader(fh))
    rows, agg = [], {}
    for rec in records:
        values = {k: float(v) for k, v in rec.items() if k != "view"}
        if rec["view"] == "mean":
            agg = values
        else:
            rows.append({"view": int(rec["view"]), **values})
    return rows, agg


def proxy_distance(comps: Components, x: np.ndarray, y: np.ndarray) -> float:
    with no_grad():
        return float(perceptual_proxy(comps.codec, Tensor(to_nchw(x)), Tensor(to_nchw(y))).data)


def sampler_config(cfg: RunConfig, seed: int) -> SamplerConfig:
    return SamplerConfig(cfg.sampler, cfg.steps, cfg.tile, cfg.stride, cfg.tile_sigma, seed)


def evaluate(cfg: RunConfig, comps: Components, viewset: ViewSet, out_dir: str | Path | None = None,
             manifest: dict | None = None) -> MetricsReport:
    if comps.grid is None or comps.cfw is None:
        raise ValueError("evaluation needs stage-one and stage-two components")
    test_views = viewset.indices("test")
    if not test_views:
        raise ValueError("evaluation needs a non-empty test split")
    out_dir = Path(out_dir) if out_dir is not None else None
    t0 = time.perf_counter()
    report = MetricsReport(manifest=dict(manifest or {}))
    for v in test_views:
        ref = viewset.images[v]
        raw = render_image(comps.grid, viewset.cameras[v], cfg.background, cfg.eval_samples)
        scfg = sampler_config(cfg, cfg.seed * 1000 + v)
        restored = restore(raw, comps.codec, comps.denoiser, comps.cfw, cfg.w, scfg)
        row = {
            "view": v,
            "psnr_raw": psnr(raw, ref),
            "psnr_restored": psnr(restored, ref),
            "ssim_raw": ssim(raw, ref),
            "ssim_restored": ssim(restored, ref),
            "proxy_raw": proxy_distance(comps, ref, raw),
            "proxy_restored": proxy_distance(comps, ref, restored),
        }
        row["psnr_gain"] = row["psnr_restored"] - row["psnr_raw"]
        for w in cfg.w_sweep:
            alt = restore(raw, comps.codec, comps.denoiser, comps.cfw, w, scfg)
            row[w_column(w)] = psnr(alt, ref)
        report.rows.append({k: row[k] for k in BASE_COLUMNS} | {k: row[k] for k in row if k not in BASE_COLUMNS})
        log.info("view %d: psnr raw %.2f restored %.2f (gain %+.2f)", v, row["psnr_raw"], row["psnr_restored"],
                 row["psnr_gain"])
        if out_dir is not None:
            write_png(out_dir / "grids" / f"view_{v:02d}.png", side_by_side([ref, raw, restored]))
            write_png(out_dir / "renders" / f"raw_{v:02d}.png", raw)
            write_png(out_dir / "renders" / f"restored_{v:02d}.png", restored)
    report.manifest.setdefault("timings", {})["evaluate_seconds"] = time.perf_counter() - t0
    report.manifest["seed"] = cfg.seed
    report.manifest["test_views"] = test_views
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(out_dir / "metrics.csv")
        report.write_json(out_dir / "report.json")
    return report
