"""Joint stage one (grid and diffusion trained together) against training them separately.

Runs the separate variant with otherwise identical config and compares it to an existing joint run.

    python scripts/ablate_separate_stage1.py --joint runs/desk --out-dir runs/desk_separate
"""
import argparse
import sys
from pathlib import Path

from nerfrestore.pipeline.cli import main
from nerfrestore.pipeline.evaluate import read_csv
from run_tools import table

COLUMNS = ["psnr_raw", "psnr_restored", "psnr_gain", "proxy_raw", "proxy_restored"]

if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--joint", required=True, help="finished run-all directory with the default joint stage one")
    parser.add_argument("--out-dir", default="runs/desk_separate")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = parser.parse_args()
    sets = [f"--set={kv}" for kv in [*args.set, "separate_stage1=true"]]
    if main(["run-all", "--config", str(Path(args.joint) / "config.txt"), "--out-dir", args.out_dir, *sets]):
        sys.exit(1)
    _, joint = read_csv(Path(args.joint) / "metrics.csv")
    _, separate = read_csv(Path(args.out_dir) / "metrics.csv")
    print(table(["variant", *COLUMNS], [["joint", *(joint[c] for c in COLUMNS)],
                                        ["separate", *(separate[c] for c in COLUMNS)]], fmt="{:>15}"))
