"""Command-line entry point: ``nerfrestore <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .evaluate import evaluate, sampler_config
from .imageio import read_png, write_png
from .train import (
    load_components,
    load_dataset,
    make_dataset,
    run_codec_stage,
    run_stage1,
    run_stage2,
    save_dataset,
    config_from_checkpoint,
)
from ..restoration import restore

log = logging.getLogger("nerfrestore")

# CLI flag -> config key, for the flags that are shorthands of config entries
FLAG_KEYS = {
    "seed": "seed",
    "out_dir": "out_dir",
    "sampler": "sampler",
    "steps": "steps",
    "tile": "tile",
    "stride": "stride",
    "tile_sigma": "tile_sigma",
    "w": "w",
}


class Layout:
    """File locations inside a run directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.dataset = self.root / "dataset"
        self.checkpoints = self.root / "checkpoints"
        self.history = self.root / "history.json"

    def ckpt(self, stage: str) -> Path:
        return self.checkpoints / f"{stage}.ckpt"


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--sampler", choices=["ddim", "ddpm"])
    p.add_argument("--steps", type=int, help="reverse sampling steps")
    p.add_argument("--tile", type=int, help="latent tile size")
    p.add_argument("--stride", type=int, help="latent tile stride")
    p.add_argument("--tile-sigma", dest="tile_sigma", type=float, help="Gaussian tile-weight sigma")
    p.add_argument("--w", type=float, help="fidelity coefficient for the fused decode")
    p.add_argument("--separate-stage1", dest="separate_stage1", action="store_true",
                   help="defer all diffusion updates until NeRF training finishes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="nerfrestore", description="Diffusion restoration of radiance-field renders")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("make-dataset", parents=[common], help="render the analytic scene's reference views")
    sub.add_parser("train-codec", parents=[common], help="train the latent codec and denoiser prior")
    sub.add_parser("train-stage1", parents=[common], help="joint radiance-field and diffusion training")
    sub.add_parser("train-stage2", parents=[common], help="CFW, decoder and discriminator training")
    ev = sub.add_parser("evaluate", parents=[common], help="held-out metrics, CSV/JSON report and image grids")
    ev.add_argument("--checkpoint", help="stage-two checkpoint (default: <out-dir>/checkpoints/stage2.ckpt)")
    rs = sub.add_parser("restore", parents=[common], help="restore one PNG rendering")
    rs.add_argument("--input", required=True)
    rs.add_argument("--checkpoint", required=True)
    rs.add_argument("--out", required=True)
    sub.add_parser("run-all", parents=[common], help="dataset, codec, both stages and evaluation")
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(value)
    if args.separate_stage1:
        out["separate_stage1"] = "true"
    return out


def _setup_logging(verbose: bool, log_file: Path | None = None) -> None:
    root = logging.getLogger("nerfrestore")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.handlers.clear()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(message)s")
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(fmt)
    root.addHandler(h)
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(log_file)
        fh.setFormatter(fmt)
        root.addHandler(fh)


def _update_history(layout: Layout, key: str, value) -> None:
    data = json.loads(layout.history.read_text()) if layout.history.exists() else {}
    data[key] = value
    layout.history.parent.mkdir(parents=True, exist_ok=True)
    layout.history.write_text(json.dumps(data, indent=2, sort_keys=True, default=float))


def _dataset(cfg: RunConfig, layout: Layout):
    if not (layout.dataset / "views.npz").exists():
        log.info("no dataset in %s; rendering it", layout.dataset)
        return cmd_make_dataset(cfg, layout)
    return load_dataset(cfg, layout.dataset)


def _load_stage(layout: Layout, stage: str, cfg: RunConfig, path: str | None = None):
    ckpt = load_checkpoint(path or layout.ckpt(stage))
    if ckpt.metadata.get("stage") != stage:
        raise CheckpointError(f"expected a {stage} checkpoint, found stage {ckpt.metadata.get('stage')!r}")
    if ckpt.metadata.get("config_hash") != cfg.hash():
        log.warning("%s checkpoint was written with a different config (hash %s, current %s)", stage,
                    ckpt.metadata.get("config_hash"), cfg.hash())
    return load_components(ckpt, cfg, stage)


# ---------------------------------------------------------------- subcommands


def cmd_make_dataset(cfg: RunConfig, layout: Layout):
    t0 = time.perf_counter()
    viewset = make_dataset(cfg)
    save_dataset(viewset, cfg, layout.dataset)
    _update_history(layout, "dataset", {"seconds": time.perf_counter() - t0})
    log.info("dataset: %d views written to %s", len(viewset.images), layout.dataset)
    return viewset


def cmd_train_codec(cfg: RunConfig, layout: Layout):
    viewset = _dataset(cfg, layout)
    comps, history = run_codec_stage(cfg, viewset)
    save_checkpoint(layout.ckpt("codec"), comps.to_checkpoint(cfg, "codec"))
    _update_history(layout, "codec", history)
    return comps


def cmd_train_stage1(cfg: RunConfig, layout: Layout):
    viewset = _dataset(cfg, layout)
    comps = _load_stage(layout, "codec", cfg).promote(cfg, "stage1")
    history = run_stage1(cfg, comps, viewset, layout.checkpoints)
    save_checkpoint(layout.ckpt("stage1"), comps.to_checkpoint(cfg, "stage1"))
    _update_history(layout, "stage1", history)
    return comps


def cmd_train_stage2(cfg: RunConfig, layout: Layout):
    viewset = _dataset(cfg, layout)
    comps = _load_stage(layout, "stage1", cfg).promote(cfg, "stage2")
    history = run_stage2(cfg, comps, viewset, layout.checkpoints)
    save_checkpoint(layout.ckpt("stage2"), comps.to_checkpoint(cfg, "stage2"))
    _update_history(layout, "stage2", history)
    return comps


def cmd_evaluate(cfg: RunConfig, layout: Layout, checkpoint: str | None = None):
    viewset = _dataset(cfg, layout)
    comps = _load_stage(layout, "stage2", cfg, checkpoint)
    history = json.loads(layout.history.read_text()) if layout.history.exists() else {}
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "timings": {k: v.get("seconds") for k, v in history.items() if isinstance(v, dict)},
        "training": {k: v for k, v in history.items() if k in ("stage1", "stage2")},
    }
    return evaluate(cfg, comps, viewset, layout.root, manifest)


def cmd_restore(args: argparse.Namespace, overrides: dict[str, str]) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = config_from_checkpoint(ckpt).with_overrides(
        {k: v for k, v in overrides.items() if k in ("seed", "sampler", "steps", "tile", "stride", "tile_sigma", "w")})
    comps = load_components(ckpt, cfg, "stage2")

    image = read_png(args.input)
    out = restore(image, comps.codec, comps.denoiser, comps.cfw, cfg.w, sampler_config(cfg, cfg.seed))
    write_png(args.out, out)
    log.info("restored %s -> %s", args.input, args.out)


def cmd_run_all(cfg: RunConfig, layout: Layout):
    cmd_make_dataset(cfg, layout)
    cmd_train_codec(cfg, layout)
    cmd_train_stage1(cfg, layout)
    cmd_train_stage2(cfg, layout)
    return cmd_evaluate(cfg, layout)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        overrides = overrides_from_args(args)
        if args.command == "restore":
            cmd_restore(args, overrides)
            return 0
        cfg = load_config(args.config, overrides)
        layout = Layout(cfg.out_dir)
        layout.root.mkdir(parents=True, exist_ok=True)
        _setup_logging(args.verbose, layout.root / "run.log")
        (layout.root / "config.txt").write_text(cfg.to_text())
        if args.command == "make-dataset":
            cmd_make_dataset(cfg, layout)
        elif args.command == "train-codec":
            cmd_train_codec(cfg, layout)
        elif args.command == "train-stage1":
            cmd_train_stage1(cfg, layout)
        elif args.command == "train-stage2":
            cmd_train_stage2(cfg, layout)
        elif args.command == "evaluate":
            report = cmd_evaluate(cfg, layout, args.checkpoint)
            _print_summary(report)
        elif args.command == "run-all":
            _print_summary(cmd_run_all(cfg, layout))
        return 0
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError, RuntimeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


def _print_summary(report) -> None:
    agg = report.aggregates
    print(f"mean PSNR raw {agg['psnr_raw']:.3f} dB, restored {agg['psnr_restored']:.3f} dB "
          f"(gain {agg['psnr_gain']:+.3f}); proxy raw {agg['proxy_raw']:.5f}, restored {agg['proxy_restored']:.5f}")


if __name__ == "__main__":
    sys.exit(main())
