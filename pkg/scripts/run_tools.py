"""Helpers shared by the experiment scripts: load a finished run directory."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from nerfrestore.pipeline.checkpoint import load_checkpoint
from nerfrestore.pipeline.config import RunConfig
from nerfrestore.pipeline.train import Components, config_from_checkpoint, load_components, load_dataset
from nerfrestore.radiance_field import render_image
from nerfrestore.scene import ViewSet


@dataclass
class FinishedRun:
    cfg: RunConfig
    comps: Components
    viewset: ViewSet

    def test_pairs(self):
        """(view, reference, raw grid render) for every held-out view."""
        for v in self.viewset.indices("test"):
            raw = render_image(self.comps.grid, self.viewset.cameras[v], self.cfg.background, self.cfg.eval_samples)
            yield v, self.viewset.images[v], raw


def open_run(run_dir: str | Path) -> FinishedRun:
    run_dir = Path(run_dir)
    ckpt = load_checkpoint(run_dir / "checkpoints" / "stage2.ckpt")
    cfg = config_from_checkpoint(ckpt)
    return FinishedRun(cfg, load_components(ckpt, cfg, "stage2"), load_dataset(cfg, run_dir / "dataset"))


def table(header: list[str], rows: list[list], fmt: str = "{:>12}") -> str:
    cell = lambda v: fmt.format(f"{v:.4f}" if isinstance(v, (float, np.floating)) else str(v))
    return "\n".join("".join(cell(v) for v in r) for r in [header, *rows])
