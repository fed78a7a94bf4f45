"""Parameter/FLOP scaling tables plus the trained sweep from the config.

Prints how the mixing sub-layer and the self-attention baseline grow with the
token count, then runs ``hemix bench-scaling`` for the AUC-vs-parameters CSV.

    python scripts/scaling.py --out runs/scaling.csv [--steps 0]
"""
import argparse
import sys
from pathlib import Path

from hemix.cli import main as cli
from hemix.cli import print_table
from hemix.heteromixer import HETEROMIXER, SELF_ATTENTION, InteractionStackConfig, block_flops

ROOT = Path(__file__).resolve().parents[1]


def token_sweep(d_t=256, heads=8, d_r=64, counts=(30, 60, 120, 240)):
    rows = []
    for n in counts:
        hm = block_flops(InteractionStackConfig(n_tokens=n, d_t=d_t, heads=heads, d_r=d_r, block_kind=HETEROMIXER))
        sa = block_flops(InteractionStackConfig(n_tokens=n, d_t=d_t, heads=heads, d_r=d_r,
                                                block_kind=SELF_ATTENTION))
        rows.append({"N": n, "mixing": hm["mixing"], "attn_pairwise": sa["pairwise"],
                     "attn_projections": sa["projections"], "hetero_ffn": hm["ffn"], "shared_ffn": sa["ffn"]})
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "configs" / "toy.yaml"))
    ap.add_argument("--out", default="runs/scaling.csv")
    ap.add_argument("--steps", type=int)
    args = ap.parse_args()
    rows = token_sweep()
    print_table(rows, list(rows[0]))
    print()
    argv = ["bench-scaling", "--config", args.config, "--out", args.out]
    if args.steps is not None:
        argv += ["--steps", str(args.steps)]
    sys.exit(cli(argv))
