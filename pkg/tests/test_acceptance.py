"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The learnability and ablation runs train the default toy configuration
(configs/toy.yaml) and take roughly half an hour together on one core.
"""
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from hemix import kernel as K
from hemix.cli import fit_and_evaluate, summarize_ablation
from hemix.config import load
from hemix.data import generate
from hemix.heteromixer import InteractionStackConfig, block_flops, fuse_tokens, reconstruct_tokens
from hemix.metrics import auc, rela_imp
from hemix.model import HeMix, ModelConfig, bce_loss, count_params

import conftest
from conftest import tiny_batch, tiny_config
from oracle import reference_forward
from test_data_metrics import brute_auc
from test_model import default_schema, perturbed

TOY = Path(__file__).resolve().parents[1] / "configs" / "toy.yaml"
SEEDS = (1, 2, 3)


def record(k: int, ok: bool, detail: str, soft: bool = False) -> None:
    verdict = "PASS" if ok else ("FINDING" if soft else "FAIL")
    conftest.ACCEPTANCE_LINES[k] = f"criterion {k}: {verdict}  {detail}"


def test_1_gradient_fidelity():
    t0 = time.perf_counter()
    model = perturbed(HeMix(tiny_config()))
    batch = tiny_batch(6, seed=7)
    errs = K.grad_check(lambda: bce_loss(model(batch), batch.labels), model.parameters())
    worst, secs = max(errs.values()), time.perf_counter() - t0
    ok = worst < 1e-4 and secs < 60
    record(1, ok, f"max rel err {worst:.2e} over {len(errs)} params, {secs:.1f}s (< 1e-4, < 60s)")
    assert ok


def test_2_oracle_equivalence():
    model = perturbed(HeMix(tiny_config()), seed=11)
    batch = tiny_batch(10, seed=12)
    params = {n: p.data for n, p in model.named_parameters()}
    y = model(batch).data
    ref = [reference_forward(params, model.config, batch.ns_ids[i], batch.g_ids[i, :batch.g_len[i]],
                             batch.r_ids[i, :batch.r_len[i]]) for i in range(10)]
    gap = float(np.abs(y - np.array(ref)).max())
    record(2, gap <= 1e-12, f"max |forward - oracle| = {gap:.1e} on 10 inputs (<= 1e-12)")
    assert gap <= 1e-12


@pytest.mark.parametrize("n_blocks,d_t,n_tokens", [(2, 256, 60), (4, 128, 60), (2, 512, 30)])
def test_3_parameter_law(n_blocks, d_t, n_tokens):
    cfg = ModelConfig(schema=default_schema(), n_ns_tokens=n_tokens // 3, token_dim=d_t, mix_heads=8,
                      n_blocks=n_blocks, ffn_expansion=4)
    assert cfg.n_tokens == n_tokens
    c = count_params(cfg)
    ratio = c["approx_ratio"]
    extra_ok = c["heteromixing_extra"] == 2 * n_blocks * n_tokens * d_t * cfg.d_r
    ok = 0.95 <= ratio <= 1.10 and extra_ok
    line = f"L={n_blocks} d_T={d_t} N={n_tokens}: ratio {ratio:.4f}, mixing extra exact={extra_ok}"
    prev = conftest.ACCEPTANCE_LINES.get(3, "")
    prior_ok = not prev.startswith("criterion 3: FAIL")
    detail = (prev.split("  ", 1)[1] + "; " if prev else "") + line
    record(3, ok and prior_ok, detail)
    assert ok


def test_4_fusion_bijection():
    rng = np.random.default_rng(2024)
    bad = 0
    for _ in range(1000):
        n, m, d_h = (int(v) for v in rng.integers(1, [40, 9, 9]))
        t = rng.normal(size=(n, m * d_h))
        g = rng.normal(size=(m, n * d_h))
        bad += not np.array_equal(reconstruct_tokens(fuse_tokens(K.Tensor(t), m), n, m * d_h).data, t)
        bad += not np.array_equal(fuse_tokens(reconstruct_tokens(K.Tensor(g), n, m * d_h), m).data, g)
    record(4, bad == 0, f"{bad} mismatches over 1000 random (N, d_T, M)")
    assert bad == 0


def test_5_fixed_query_candidate_invariance():
    rc = load(TOY)
    model = perturbed(HeMix(rc.model_config(seed=1)), scale=0.05)
    cfg = model.config
    schema = cfg.schema
    spec = rc.data_spec()
    spec.n_train, spec.n_test = 8, 0
    batch = generate(spec).data
    one = batch.take([0])
    other = batch.take([0])
    other.ns_ids = other.ns_ids.copy()
    for j, f in enumerate(schema.ns_fields):
        if schema.field_group(f.field_id) == "ITEM":
            other.ns_ids[0, j] = (other.ns_ids[0, j] + 1) % f.vocab_size
    a, b = model.tokens(one).data[0], model.tokens(other).data[0]
    (g, r), (fg, fr) = cfg.routed, cfg.fixed
    fixed_rows = list(range(g, g + fg)) + list(range(g + fg + r, g + fg + r + fr))
    routed_rows = list(range(g)) + list(range(g + fg, g + fg + r))
    fixed_same = np.array_equal(a[fixed_rows], b[fixed_rows])
    routed_differ = all(not np.array_equal(a[i], b[i]) for i in routed_rows)
    ok = fixed_same and routed_differ
    record(5, ok, f"fixed rows bit-identical={fixed_same}, all {len(routed_rows)} routed rows differ={routed_differ}")
    assert ok


# -- trained runs -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_runs():
    """Full-model runs on the default toy config, one per seed, plus untrained scores."""
    runs = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        rc = load(TOY, seed=seed)
        ds = generate(rc.data_spec())
        untrained = HeMix(rc.model_config(seed=seed)).predict(ds.test)
        _, rep = fit_and_evaluate(rc, ds, seed)
        runs[seed] = {"rc": rc, "ds": ds, "report": rep, "untrained_auc": auc(ds.test.labels, untrained)}
    return runs, time.perf_counter() - t0


def test_6_learnability(toy_runs):
    runs, secs = toy_runs
    aucs = [runs[s]["report"].auc for s in SEEDS]
    untrained = [runs[s]["untrained_auc"] for s in SEEDS]
    steps = runs[1]["rc"].model.training.steps
    median = statistics.median(aucs)
    ok = (median >= 0.70 and steps <= 20_000 and secs < 30 * 60
          and all(abs(u - 0.5) <= 0.02 for u in untrained))
    record(6, ok, f"test AUC {[round(a, 4) for a in aucs]} median {median:.4f} (>= 0.70), {steps} steps, "
                  f"{secs / 60:.1f} min (< 30), untrained AUC {[round(u, 4) for u in untrained]} (0.5 +/- 0.02)")
    assert ok


def test_7_ablation_direction(toy_runs):
    runs, _ = toy_runs
    rows = []
    for seed in SEEDS:
        run = runs[seed]
        rows.append({"variant": "full", "seed": seed, **vars(run["report"])})
        for variant in ("no_fixed_query", "autosplit", "self_attention"):
            _, rep = fit_and_evaluate(run["rc"], run["ds"], seed, variant)
            rows.append({"variant": variant, "seed": seed, **vars(rep)})
    summary = {s["variant"]: s for s in summarize_ablation(rows)}
    parts, held = [], True
    for variant in ("no_fixed_query", "autosplit", "self_attention"):
        s = summary[variant]
        held &= s["full_not_worse"]
        parts.append(f"{variant} {s['median_logloss']:.4f} (full wins {s['full_wins']}, p={s['sign_test_p']:.3f})")
    detail = f"median test logloss full {summary['full']['median_logloss']:.4f} vs " + ", ".join(parts)
    record(7, held, detail, soft=True)
    # soft criterion: a reversal is a reported finding, so only completion is asserted
    assert len(rows) == 4 * len(SEEDS)


def test_8_metric_oracles():
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = rng.integers(0, 30, n) / 30.0
        mismatches += auc(y, s) != brute_auc(y, s)
    small, large = rela_imp(0.7315, 0.7312), rela_imp(0.7350, 0.7312)
    ok = mismatches == 0 and abs(small - 0.13) <= 0.01 and abs(large - 1.64) <= 0.01
    record(8, ok, f"{mismatches}/100 AUC mismatches, rela_imp {small:.3f}% and {large:.3f}% (0.13, 1.64 +/- 0.01)")
    assert ok


def test_9_efficiency_shape():
    def cost(n, kind):
        return block_flops(InteractionStackConfig(n_tokens=n, d_t=256, heads=8, d_r=64, block_kind=kind))

    mix = [cost(n, "heteromixer")["mixing"] for n in (30, 60, 120)]
    att = [cost(n, "self_attention") for n in (30, 60, 120)]
    pair = [a["pairwise"] for a in att]
    whole = [a["pairwise"] + a["projections"] for a in att]
    mix_r = [mix[i + 1] / mix[i] for i in range(2)]
    pair_r = [pair[i + 1] / pair[i] for i in range(2)]
    whole_r = [whole[i + 1] / whole[i] for i in range(2)]
    ok = all(abs(r / 2 - 1) <= 0.05 for r in mix_r) and all(abs(r / 4 - 1) <= 0.05 for r in pair_r)
    record(9, ok, f"N 30->60->120: mixing x{mix_r[0]:.3f}, x{mix_r[1]:.3f}; attention score/value term "
                  f"x{pair_r[0]:.3f}, x{pair_r[1]:.3f}; attention incl. projections x{whole_r[0]:.3f}, "
                  f"x{whole_r[1]:.3f}")
    assert ok
