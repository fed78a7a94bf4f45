import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hemix import kernel as K
from hemix.data import (
    PlantedSpec,
    SyntheticSpec,
    build_world,
    expected_click_rate,
    generate,
    generate_batch,
    read_dataset,
    read_header,
    toy_schema,
    write_dataset,
)
from hemix.metrics import EvalReport, MetricError, auc, evaluate, logloss, rela_imp
from hemix.model import bce_loss
from hemix.tokenizer import ConfigError

from conftest import tiny_spec


def brute_auc(labels, scores):
    pos = [s for y, s in zip(labels, scores) if y]
    neg = [s for y, s in zip(labels, scores) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def small_spec(seed=0, n_train=3000, n_test=1000, **kw):
    spec = SyntheticSpec(n_users=300, n_items=600, n_categories=10, n_segments=4, n_train=n_train, n_test=n_test,
                         mean_global_len=20, mean_rt_len=4, seed=seed, **kw)
    spec.schema = toy_schema(spec, global_max_len=40, realtime_max_len=8, id_dim=4, side_dim=4)
    return spec


# -- AUC ------------------------------------------------------------------------------

def test_auc_examples():
    assert auc([1, 0], [0.9, 0.1]) == 1.0
    assert auc([1, 0, 1], [0.9, 0.8, 0.7]) == 0.5
    assert auc([1, 0, 0, 1], [0.3] * 4) == 0.5
    assert auc([0, 1], [0.9, 0.1]) == 0.0


def test_auc_needs_both_classes():
    with pytest.raises(MetricError):
        auc([1, 1, 1], [0.1, 0.2, 0.3])
    with pytest.raises(MetricError):
        auc([0, 0], [0.1, 0.2])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2**31), st.integers(2, 50))
def test_rank_sum_equals_pairwise(n, seed, n_levels):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.integers(0, n_levels, n) / n_levels  # coarse grid forces ties
    assert auc(y, s) == brute_auc(y, s)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 100), st.integers(0, 2**31))
def test_auc_monotone_invariant(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = np.round(rng.normal(size=n), 2)
    base = auc(y, s)
    assert auc(y, 2 * s + 1) == base
    assert auc(y, 1 / (1 + np.exp(-s))) == base


# -- Logloss / relative improvement -----------------------------------------------------

def test_logloss_examples():
    assert math.isclose(logloss([1, 1, 1], [0.5] * 3), math.log(2), rel_tol=1e-12)
    assert abs(logloss([1, 0], [0.9, 0.2]) - 0.16425) < 1e-5
    assert math.isfinite(logloss([1], [0.0]))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50), st.integers(0, 2**31))
def test_logloss_matches_training_loss(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    p = rng.uniform(0, 1, n)
    p[:2] = [0.0, 1.0][: min(2, n)]
    assert abs(logloss(y, p) - bce_loss(K.Tensor(p), y).item()) < 1e-12


def test_rela_imp_examples():
    assert round(rela_imp(0.7315, 0.7312), 2) == 0.13
    assert round(rela_imp(0.7350, 0.7312), 2) == 1.64
    assert rela_imp(0.7312, 0.7312) == 0.0
    with pytest.raises(MetricError):
        rela_imp(0.7, 0.5)


def test_evaluate_report():
    base = evaluate([1, 0, 1, 0], [0.9, 0.1, 0.4, 0.6])
    rep = evaluate([1, 0, 1, 0], [0.9, 0.1, 0.8, 0.2], base=base)
    assert (rep.n_samples, rep.n_positive, rep.auc) == (4, 2, 1.0)
    assert math.isclose(rep.rela_imp_pct, ((1.0 - 0.5) / (0.75 - 0.5) - 1) * 100)
    assert rep.n_positive <= rep.n_samples
    assert EvalReport(**__import__("json").loads(rep.to_json())) == rep


# -- generator ------------------------------------------------------------------------

def test_same_seed_byte_identical_file(tmp_path):
    a, b = tmp_path / "a.hmxd", tmp_path / "b.hmxd"
    write_dataset(a, generate(small_spec(seed=4)))
    write_dataset(b, generate(small_spec(seed=4)))
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()
    write_dataset(b, generate(small_spec(seed=5)))
    assert a.read_bytes() != b.read_bytes()


def test_generation_does_not_depend_on_split():
    spec = small_spec()
    whole = generate_batch(spec, n=5000)
    part = generate_batch(spec, n=1000, offset=4096)
    assert np.array_equal(whole.labels[4096:], part.labels[:904])
    assert np.array_equal(whole.g_ids[4096:], part.g_ids[:904])


def test_pure_noise_rate_is_one_half():
    spec = small_spec(n_train=50_000, n_test=0, planted=PlantedSpec(noise_scale=1e6))
    rate = generate_batch(spec).labels.mean()
    assert abs(rate - 0.5) < 0.02


def test_label_rate_matches_monte_carlo_expectation():
    spec = small_spec(n_train=20_000, n_test=0)
    rate = generate_batch(spec).labels.mean()
    expected = expected_click_rate(spec, 200_000, offset=10**8)  # disjoint streams, 10x samples
    assert abs(rate - expected) / expected < 0.2


def _noiseless_probability(spec, batch):
    """Recompute the planted click probability from the stored ids alone."""
    p, w = spec.planted, build_world(spec)
    probs = []
    for i in range(len(batch)):
        user, _, cand, cand_cat, _, _ = batch.ns_ids[i]
        hist = batch.g_ids[i, : batch.g_len[i]]
        sess = batch.r_ids[i, : batch.r_len[i]]
        v = w.item_vec[cand]
        z = p.base_logit + p.affinity_weight * float(w.user_vec[user] @ v)
        if len(hist):
            z += p.interest_weight * float(np.mean([w.item_vec[it] @ v for it, _ in hist]))
            hot = np.mean([w.hot[c] for _, c in hist])
            z += p.pattern_weight * (hot - p.n_hot_categories / spec.n_categories)
        if len(sess):
            z += p.recency_weight * float(np.mean([c == cand_cat for _, c in sess]))
        probs.append(1 / (1 + math.exp(-z)))
    return np.array(probs)


def test_labels_follow_planted_rule():
    spec = small_spec(n_train=6000, n_test=0)
    batch = generate_batch(spec)
    prob = _noiseless_probability(spec, batch)
    assert abs(batch.labels.mean() - prob.mean()) / prob.mean() < 0.2
    # the planted probability ranks labels well above chance
    assert auc(batch.labels, prob) > 0.75
    assert auc(batch.labels[prob > np.median(prob)], prob[prob > np.median(prob)]) > 0.5


@pytest.mark.parametrize("field", ["interest_weight", "recency_weight", "pattern_weight"])
def test_both_sequences_carry_signal(field):
    spec = small_spec(n_train=8000, n_test=0)
    batch = generate_batch(spec)
    full = _noiseless_probability(spec, batch)
    setattr(spec.planted, field, 0.0)
    without = _noiseless_probability(spec, batch)
    assert auc(batch.labels, full) > auc(batch.labels, without) + 0.005


def test_rate_stable_under_sample_seed():
    n = 20_000
    rates = [generate_batch(small_spec(seed=s, n_train=n, n_test=0, world_seed=0)).labels.mean() for s in range(5)]
    mean = float(np.mean(rates))
    sigma = math.sqrt(mean * (1 - mean) / n)
    assert all(abs(r - mean) < 3 * sigma for r in rates), (rates, sigma)


def test_rate_inside_band():
    for seed in range(3):
        rate = generate(small_spec(seed=seed)).data.labels.mean()
        assert 0.02 < rate < 0.5


def test_mean_lengths_follow_spec():
    batch = generate_batch(small_spec(n_train=5000, n_test=0))
    assert abs(batch.g_len.mean() - 20) < 0.5
    assert abs(batch.r_len.mean() - 4) < 0.2
    assert batch.g_len.max() <= 40 and batch.r_len.max() <= 8


def test_schema_violations():
    spec = tiny_spec()
    schema = toy_schema(spec, global_max_len=2)  # shorter than the mean global length
    with pytest.raises(ConfigError):
        SyntheticSpec(**{**vars(tiny_spec()), "schema": schema})
    small = toy_schema(SyntheticSpec(n_users=3, n_items=12, n_categories=4, n_segments=3))
    with pytest.raises(ConfigError, match="user_id"):
        SyntheticSpec(**{**vars(tiny_spec()), "schema": small})
    with pytest.raises(ConfigError):
        SyntheticSpec(n_items=3, n_categories=5)


# -- file I/O ---------------------------------------------------------------------------

def test_round_trip(tmp_path):
    ds = generate(small_spec(seed=2))
    path = tmp_path / "d.hmxd"
    write_dataset(path, ds)
    back = read_dataset(path)
    assert back.schema == ds.schema and back.n_train == ds.n_train
    for name in ("ns_ids", "g_ids", "g_len", "r_ids", "r_len", "labels", "labels_cvr"):
        assert np.array_equal(getattr(back.data, name), getattr(ds.data, name)), name
    assert list(back.samples())[:50] == list(ds.samples())[:50]
    assert read_header(path)["n_samples"] == len(ds.data)


def test_rejects_foreign_file(tmp_path):
    path = tmp_path / "x"
    path.write_bytes(b"garbage!" * 4)
    with pytest.raises(ConfigError):
        read_dataset(path)
    with pytest.raises(ConfigError):
        read_header(path)
