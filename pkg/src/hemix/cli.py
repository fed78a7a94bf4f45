"""Command-line entry point: ``hemix {generate,train,eval,ablate,bench-scaling}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric fault.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import statistics
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path


from . import __version__
from .config import VARIANTS, RunConfig, load
from .data import Dataset, generate, read_dataset, read_header, write_dataset
from .metrics import EvalReport, evaluate
from .model import (
    HeMix,
    NumericFault,
    count_params,
    estimate_flops,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .tokenizer import ConfigError, FeatureSchema, InputError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
MANIFEST = "manifest.json"
REPORT_FIELDS = ["run_id", "manifest", "command", "variant", "seed", "split",
                 "auc", "logloss", "n_samples", "n_positive", "rela_imp_pct"]


def build_id() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        rev = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"hemix-{__version__}" + (f"+{rev}" if rev else "")


@dataclass
class RunManifest:
    command: str
    run_id: str
    seed: int
    config: dict
    build: str = field(default_factory=build_id)
    phases: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    def phase(self, name: str):
        return _Timer(self.phases, name)

    def write(self, out_dir: Path) -> None:
        (out_dir / MANIFEST).write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")


class _Timer:
    def __init__(self, sink: dict, name: str):
        self.sink, self.name = sink, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.sink[self.name] = round(time.perf_counter() - self.t0, 3)


# -- shared helpers -----------------------------------------------------------------------

def _out_dir(path) -> Path:
    if path is None:
        raise ConfigError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(rc: RunConfig, data_path, seed: int | None = None) -> Dataset:
    if data_path is None:
        return generate(rc.data_spec(seed))
    path = Path(data_path)
    if not path.is_file():
        raise ConfigError(f"dataset file not found: {path}")
    ds = read_dataset(path)
    check_schema_match(rc.schema, ds.schema, path)
    return ds


def check_schema_match(expected: FeatureSchema, found: FeatureSchema, where) -> None:
    if expected.to_dict() != found.to_dict():
        raise ConfigError(f"{where}: dataset schema does not match the configured model schema")


def _fmt(x) -> str:
    if x is None:
        return "-"
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)


def print_table(rows: list[dict], cols: list[str]) -> None:
    cells = [[_fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(cols)]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for row in cells:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)))


def write_reports(out: Path, rows: list[dict], stem: str = "metrics") -> dict:
    jl, cs = out / f"{stem}.jsonl", out / f"{stem}.csv"
    with open(jl, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    with open(cs, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return {f"{stem}_jsonl": str(jl), f"{stem}_csv": str(cs)}


def _report_row(manifest: RunManifest, rep: EvalReport, **extra) -> dict:
    return {"run_id": manifest.run_id, "manifest": MANIFEST, "command": manifest.command, "split": "test",
            **extra, **asdict(rep)}


def fit_and_evaluate(rc: RunConfig, ds: Dataset, seed: int, variant: str = "full",
                     loss_csv: Path | None = None, **model_overrides) -> tuple[HeMix, EvalReport]:
    model = HeMix(rc.model_config(seed=seed, variant=variant, **model_overrides))
    tc = model.config.training
    losses = train(model, ds.train)
    if loss_csv is not None:
        with open(loss_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows((i, repr(v)) for i, v in enumerate(losses))
    test = ds.test
    scores = model.predict(test, tc.eval_batch_size)
    return model, evaluate(test.target(tc.target), scores)


# -- commands -----------------------------------------------------------------------------

def cmd_generate(args) -> int:
    rc = load(args.config, args.override, seed=args.seed)
    if args.out is None:
        raise ConfigError("--out is required")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ds = generate(rc.data_spec())
    write_dataset(out, ds)
    labels = ds.data.labels
    print_table([{"file": str(out), "samples": len(ds.data), "train": ds.n_train,
                  "test": len(ds.data) - ds.n_train, "positive_rate": float(labels.mean()),
                  "seconds": round(time.perf_counter() - t0, 1)}],
                ["file", "samples", "train", "test", "positive_rate", "seconds"])
    return EXIT_OK


def cmd_train(args) -> int:
    rc = load(args.config, args.override, seed=args.seed, steps=args.steps)
    out = _out_dir(args.out)
    man = RunManifest("train", rc.run_id(), rc.seed, rc.raw)
    with man.phase("load_data"):
        ds = _dataset(rc, args.data)
    with man.phase("train"):
        model, rep = fit_and_evaluate(rc, ds, rc.seed, loss_csv=out / "loss.csv")
    with man.phase("save"):
        save_checkpoint(out / "model.hmxc", model)
    man.outputs = {"checkpoint": str(out / "model.hmxc"), "loss_csv": str(out / "loss.csv"),
                   **write_reports(out, [_report_row(man, rep, variant="full", seed=rc.seed)])}
    man.write(out)
    print_table([{"variant": "full", "seed": rc.seed, "steps": rc.model.training.steps, **asdict(rep)}],
                ["variant", "seed", "steps", "auc", "logloss", "n_samples", "n_positive"])
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    out = _out_dir(args.out)
    if args.data is not None:
        path = Path(args.data)
        if not path.is_file():
            raise ConfigError(f"dataset file not found: {path}")
        check_schema_match(model.config.schema, FeatureSchema.from_dict(read_header(path)["schema"]), path)
        ds = read_dataset(path)
    elif args.config is not None:
        rc = load(args.config, args.override, seed=args.seed)
        check_schema_match(model.config.schema, rc.schema, args.config)
        ds = generate(rc.data_spec())
    else:
        raise ConfigError("eval needs --data or --config")
    seed = model.config.training.seed
    man = RunManifest("eval", f"eval-{ckpt.stem}", seed, {"checkpoint": str(ckpt), "data": args.data,
                                                        "config": args.config})
    with man.phase("eval"):
        test = ds.test
        rep = evaluate(test.target(model.config.training.target),
                       model.predict(test, model.config.training.eval_batch_size))
    man.outputs = write_reports(out, [_report_row(man, rep, variant="checkpoint", seed=seed)])
    man.write(out)
    print_table([asdict(rep)], ["auc", "logloss", "n_samples", "n_positive"])
    return EXIT_OK


def _sign_test_p(wins: int, n: int) -> float:
    """One-sided exact sign test: P(at least ``wins`` successes of ``n`` under p=1/2)."""
    return sum(math.comb(n, i) for i in range(wins, n + 1)) / 2 ** n


def summarize_ablation(rows: list[dict]) -> list[dict]:
    """Median metrics per variant plus paired comparison against ``full``."""
    by = {}
    for r in rows:
        by.setdefault(r["variant"], {})[r["seed"]] = r
    full = by.get("full", {})
    full_median = statistics.median(r["logloss"] for r in full.values()) if full else None
    out = []
    for variant, runs in by.items():
        seeds = sorted(runs)
        s = {"variant": variant, "seeds": len(seeds),
             "median_auc": statistics.median(runs[k]["auc"] for k in seeds),
             "median_logloss": statistics.median(runs[k]["logloss"] for k in seeds)}
        if variant != "full" and full:
            paired = [runs[k]["logloss"] - full[k]["logloss"] for k in seeds if k in full]
            wins = sum(d >= 0 for d in paired)
            s.update(full_wins=f"{wins}/{len(paired)}",
                     mean_logloss_gap=statistics.fmean(paired) if paired else None,
                     sign_test_p=_sign_test_p(wins, len(paired)) if paired else None,
                     full_not_worse=full_median <= s["median_logloss"])
        out.append(s)
    return out


def cmd_ablate(args) -> int:
    rc = load(args.config, args.override, seed=args.seed, steps=args.steps)
    out = _out_dir(args.out)
    man = RunManifest("ablate", rc.run_id(), rc.seed, rc.raw)
    seeds = [args.seed] if args.seed is not None else rc.ablate_seeds
    variants = ["full"] + [v for v in rc.ablate_variants if v != "full"]
    rows, shapes = [], {}
    datasets = {}
    for seed in seeds:
        with man.phase(f"data_seed{seed}"):
            ds = datasets[seed] = _dataset(rc, args.data, seed)
        for variant in variants:
            with man.phase(f"{variant}_seed{seed}"):
                model, rep = fit_and_evaluate(rc, ds, seed, variant)
            cfg = model.config
            shapes[variant] = (cfg.n_tokens, cfg.token_dim)
            rows.append(_report_row(man, rep, variant=variant, seed=seed))
    summary = summarize_ablation(rows)
    man.outputs = {**write_reports(out, rows)}
    (out / "summary.json").write_text(json.dumps({"summary": summary, "token_shapes": shapes}, indent=2,
                                                 sort_keys=True) + "\n")
    man.outputs["summary"] = str(out / "summary.json")
    man.write(out)
    print_table(summary, ["variant", "seeds", "median_auc", "median_logloss", "mean_logloss_gap",
                          "full_wins", "sign_test_p"])
    print("token shapes (N, d_T): " + ", ".join(f"{k}={v}" for k, v in shapes.items()))
    return EXIT_OK


BENCH_FIELDS = ["point", "n_blocks", "token_dim", "n_tokens", "ffn_expansion", "low_rank",
                "params_total", "interaction_weights", "approx", "approx_ratio", "heteromixing_extra",
                "heteromixing_extra_expected", "flops_total", "flops_stack", "flops_stack_per_block",
                "auc", "logloss", "status", "error"]


def bench_point(rc: RunConfig, ds: Dataset | None, point: dict, steps: int, index: int) -> dict:
    row = {"point": index, "status": "ok", "error": ""}
    try:
        cfg = rc.model_config(**point)
        stack = cfg.stack_config()
        pc, fl = count_params(cfg), estimate_flops(cfg)
        row.update(n_blocks=cfg.n_blocks, token_dim=cfg.token_dim, n_tokens=cfg.n_tokens,
                   ffn_expansion=cfg.ffn_expansion, low_rank=cfg.d_r, params_total=pc["total"],
                   interaction_weights=pc["interaction_weights"], approx=pc["approx"],
                   approx_ratio=pc["approx_ratio"], heteromixing_extra=pc["heteromixing_extra"],
                   heteromixing_extra_expected=2 * stack.layers * stack.n_tokens * stack.d_t * stack.d_r,
                   flops_total=fl["total"], flops_stack=fl["interaction_stack"],
                   flops_stack_per_block=fl["interaction_stack"] / cfg.n_blocks)
        problems = []
        if not 0.95 <= pc["approx_ratio"] <= 1.10:
            problems.append(f"approx ratio {pc['approx_ratio']:.4f} outside [0.95, 1.10]")
        if pc["heteromixing_extra"] != row["heteromixing_extra_expected"]:
            problems.append("heteromixing extra differs from 2LN*d_T*d_r")
        if steps > 0 and ds is not None:
            model = HeMix(cfg)
            train(model, ds.train, steps=steps)
            test = ds.test
            rep = evaluate(test.target(cfg.training.target), model.predict(test, cfg.training.eval_batch_size))
            row.update(auc=rep.auc, logloss=rep.logloss)
        if problems:
            row.update(status="failed", error="; ".join(problems))
    except (ConfigError, InputError, NumericFault) as exc:
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def cmd_bench_scaling(args) -> int:
    rc = load(args.config, args.override, seed=args.seed)
    if not rc.bench_sweep:
        raise ConfigError("bench.sweep is empty; list model overrides per point")
    out_path = Path(args.out) if args.out else None
    if out_path is None:
        raise ConfigError("--out is required")
    steps = rc.bench_steps if args.steps is None else args.steps
    out_dir = out_path.parent if out_path.suffix else out_path
    csv_path = out_path if out_path.suffix else out_path / "scaling.csv"
    out_dir.mkdir(parents=True, exist_ok=True)
    man = RunManifest("bench-scaling", rc.run_id(), rc.seed, rc.raw)
    ds = None
    if steps > 0:
        with man.phase("load_data"):
            ds = _dataset(rc, args.data)
    rows = []
    for i, point in enumerate(rc.bench_sweep):
        with man.phase(f"point{i}"):
            rows.append(bench_point(rc, ds, dict(point), steps, i))
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    man.outputs = {"scaling_csv": str(csv_path)}
    man.write(out_dir)
    print_table(rows, ["point", "n_blocks", "token_dim", "n_tokens", "params_total", "approx_ratio",
                       "flops_total", "auc", "logloss", "status"])
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "bench-scaling": cmd_bench_scaling}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hemix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "eval", help="YAML run config")
        p.add_argument("--data", help="dataset file (default: generate from the config)")
        p.add_argument("--out", help="output file (generate, bench-scaling) or directory")
        p.add_argument("--seed", type=int, help="overrides the config's top-level seed")
        p.add_argument("--steps", type=int, help="overrides model.training.steps")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config key, value parsed as YAML; repeatable")
        if name == "eval":
            p.add_argument("--checkpoint", help="model checkpoint to evaluate")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except NumericFault as exc:
        print(f"hemix {args.command}: numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, InputError, OSError) as exc:
        print(f"hemix {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
