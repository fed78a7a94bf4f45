"""Full model against the three ablation variants over the config's seeds.

Thin wrapper around ``hemix ablate``; results land in ``<out>/summary.json``
and ``<out>/metrics.{jsonl,csv}``.

    python scripts/ablation.py --out runs/ablation
"""
import argparse
import sys
from pathlib import Path

from hemix.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "configs" / "toy.yaml"))
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--steps", type=int)
    args = ap.parse_args()
    argv = ["ablate", "--config", args.config, "--out", args.out]
    if args.steps is not None:
        argv += ["--steps", str(args.steps)]
    sys.exit(cli(argv))
