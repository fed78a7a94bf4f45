"""Train the toy config on several seeds and print test AUC against the untrained model.

    python scripts/learnability.py --seeds 1 2 3 --out runs/learnability.csv
"""
import argparse
import csv
import statistics
import time
from pathlib import Path

from hemix.cli import fit_and_evaluate
from hemix.config import load
from hemix.data import generate
from hemix.metrics import auc
from hemix.model import HeMix

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=ROOT / "configs" / "toy.yaml")
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--steps", type=int)
    ap.add_argument("--out", default="runs/learnability.csv")
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        t0 = time.perf_counter()
        rc = load(args.config, seed=seed, steps=args.steps)
        ds = generate(rc.data_spec())
        base = auc(ds.test.labels, HeMix(rc.model_config(seed=seed)).predict(ds.test))
        _, rep = fit_and_evaluate(rc, ds, seed)
        rows.append({"seed": seed, "untrained_auc": base, "auc": rep.auc, "logloss": rep.logloss,
                     "seconds": round(time.perf_counter() - t0, 1)})
        print(rows[-1], flush=True)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"median test AUC {statistics.median(r['auc'] for r in rows):.4f} -> {out}")


if __name__ == "__main__":
    main()
