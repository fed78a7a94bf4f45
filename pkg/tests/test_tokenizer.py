import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_batch, tiny_config, tiny_schema
from hemix import kernel as K
from hemix.model import HeMix, ModelConfig
from hemix.tokenizer import (
    AutoSplitTokenizer,
    ConfigError,
    EmbeddingTables,
    FeatureField,
    FeatureGroup,
    FeatureSchema,
    InputError,
    MixedHeteroAttention,
    NSTokenizer,
    Sample,
    SampleBatch,
    SequenceTokenizer,
    assemble_tokens,
    attend,
    embed_batch,
    embed_sample,
    mixed_hetero_attention,
    split_ns_queries,
    split_sizes,
    tokenize_ns,
)


def small_schema(dims=(3, 5), vocab=6, seq_dim=2, lg=4, lr=3):
    return FeatureSchema(
        groups=[FeatureGroup("USER", [FeatureField("u", vocab, dims[0])]),
                FeatureGroup("ITEM", [FeatureField("i", vocab, dims[1])])],
        seq_fields=[FeatureField("s", vocab, seq_dim)],
        global_max_len=lg, realtime_max_len=lr,
    )


# -- embedding ---------------------------------------------------------------------

def test_embed_sample_concatenates_and_pads():
    schema = small_schema()
    tables = EmbeddingTables(schema, K.Rng(0))
    out = embed_sample(Sample((1, 2), [(3,), (4,)], []), schema, tables)
    assert out["e_ns"].shape == (8,)
    assert np.array_equal(out["e_ns"], np.concatenate([tables.tables["u"].data[1], tables.tables["i"].data[2]]))
    assert out["realtime"].shape == (3, 2) and not out["realtime"].any() and out["r_len"] == 0
    assert out["g_len"] == 2
    assert np.array_equal(out["global"][1], tables.tables["seq.s"].data[4])
    assert not out["global"][2:].any()


def test_identity_tables_reproduce_index_pattern():
    schema = small_schema(dims=(6, 6))
    tables = EmbeddingTables(schema, K.Rng(0))
    for t in tables.tables.values():
        t.data[...] = np.eye(*t.shape)
    out = embed_sample(Sample((4, 1)), schema, tables)
    expected = np.zeros(12)
    expected[4] = expected[6 + 1] = 1.0
    assert np.array_equal(out["e_ns"], expected)


def test_out_of_vocabulary_names_the_field():
    schema = small_schema()
    with pytest.raises(InputError, match="'i'"):
        SampleBatch.from_samples([Sample((0, 6))], schema)
    with pytest.raises(InputError, match="'s'"):
        SampleBatch.from_samples([Sample((0, 0), [(9,)])], schema)


def test_schema_validation():
    with pytest.raises(ConfigError):
        FeatureField("x", 3, 0)
    with pytest.raises(ConfigError):
        FeatureGroup("OTHER", [])
    with pytest.raises(ConfigError):
        FeatureSchema([FeatureGroup("USER", [FeatureField("u", 3, 2)])],
                      [FeatureField("s", 3, 2, shared_with="nope")], 2, 2)
    s = small_schema()
    assert FeatureSchema.from_dict(s.to_dict()) == s


# -- NS tokens ---------------------------------------------------------------------

def test_ns_tokenizer_default_sizes():
    tok = NSTokenizer(d_ns=4, n_ns=20, d_t=256, hidden=[], rng=K.Rng(0))
    assert tok.mlp.dims[-1] == 5120
    assert tok(K.Tensor(np.ones((1, 4)))).shape == (1, 20, 256)


def test_identity_interaction_is_a_reshape():
    tok = NSTokenizer(d_ns=6, n_ns=2, d_t=3, hidden=[], rng=K.Rng(0))
    tok.mlp.weights[0].data[...] = np.eye(6)
    e = K.Tensor(np.arange(1.0, 7.0)[None])
    assert np.array_equal(tokenize_ns(e, tok).data[0], [[1, 2, 3], [4, 5, 6]])


def test_split_sizes():
    assert split_sizes(20) == (16, 4)
    assert split_sizes(5) == (4, 1)
    assert split_sizes(2) == (1, 1)
    with pytest.raises(ConfigError):
        split_sizes(1)
    g, r = split_ns_queries(K.Tensor(np.arange(10.0).reshape(5, 2)))
    assert g.shape == (4, 2) and np.array_equal(r.data, [[8.0, 9.0]])


@given(st.integers(2, 400))
def test_split_sizes_cover_all_tokens(n):
    g, r = split_sizes(n)
    assert g + r == n and g >= 1 and r >= 1
    assert g == max(1, n - math.ceil(n / 5))


# -- attention ---------------------------------------------------------------------

def test_attention_scalar_oracle():
    # scores [1, 0] / sqrt(2); softmax of [0.7071, 0] worked by hand
    q = K.Tensor([[[1.0, 0.0]]])
    kv = K.Tensor([[[1.0, 0.0], [0.0, 1.0]]])
    out = attend(q, kv, kv, np.array([2]))
    assert np.allclose(out.data[0, 0], [0.6698, 0.3302], atol=1e-4)


def _mha(n_routed=2, n_fixed=2, d_t=4, d_item=3, d=4, heads=1, seed=0):
    return MixedHeteroAttention(n_routed, n_fixed, d_t, d_item, d, heads, K.Rng(seed), "mha")


def test_single_key_gets_all_the_weight():
    p = _mha()
    rng = np.random.default_rng(0)
    seq = rng.normal(size=(3, 3))
    q = K.Tensor(rng.normal(size=(4, 4)))
    out = mixed_hetero_attention(q, K.Tensor(seq), 1, p).data
    expected = seq[0] @ p.W_V.data @ p.W_O.data
    assert np.allclose(out, np.broadcast_to(expected, out.shape), atol=1e-14)


def test_equal_queries_and_projections_give_equal_rows():
    p = _mha()
    p.W_Q_fixed.data[...] = p.W_Q_routed.data[0]
    p.W_Q_routed.data[...] = p.W_Q_routed.data[0]
    seq = K.Tensor(np.random.default_rng(1).normal(size=(3, 3)))
    q = K.Tensor(np.tile(np.arange(4.0), (4, 1)))
    out = mixed_hetero_attention(q, seq, 3, p).data
    assert np.allclose(out, out[0], atol=1e-14)


def test_distinct_projections_give_distinct_rows():
    p = _mha(n_routed=3, n_fixed=3)
    seq = K.Tensor(np.random.default_rng(2).normal(size=(3, 3)))
    q = K.Tensor(np.tile(np.arange(4.0), (6, 1)))
    out = mixed_hetero_attention(q, seq, 3, p).data
    dists = [np.abs(out[i] - out[j]).max() for i in range(6) for j in range(i + 1, 6)]
    assert min(dists) > 0


def test_empty_sequence_gives_zero_rows():
    p = _mha()
    q = K.Tensor(np.ones((2, 2, 4)))
    seq = K.Tensor(np.ones((2, 3, 3)))
    out = mixed_hetero_attention(K.concat([q, q], axis=1), seq, np.array([0, 2]), p).data
    assert not out[0].any() and out[1].any()
    assert np.all(np.isfinite(out))
    none = mixed_hetero_attention(K.concat([q, q], axis=1), K.Tensor(np.zeros((2, 0, 3))), [0, 0], p)
    assert not none.data.any()


def test_multi_head_splits_width():
    p = _mha(d=4, heads=2)
    rng = np.random.default_rng(3)
    q, seq = rng.normal(size=(4, 4)), rng.normal(size=(3, 3))
    out = mixed_hetero_attention(K.Tensor(q), K.Tensor(seq), 3, p).data
    qt = np.stack([q[i] @ w for i, w in enumerate(p.per_query_W_Q)])
    k, v = seq @ p.W_K.data, seq @ p.W_V.data
    heads = []
    for h in range(2):
        s = qt[:, 2 * h:2 * h + 2] @ k[:, 2 * h:2 * h + 2].T / math.sqrt(2)
        w = np.exp(s - s.max(1, keepdims=True))
        heads.append((w / w.sum(1, keepdims=True)) @ v[:, 2 * h:2 * h + 2])
    assert np.allclose(out, np.concatenate(heads, axis=1) @ p.W_O.data, atol=1e-13)
    with pytest.raises(ConfigError):
        _mha(d=4, heads=3)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 4), st.integers(1, 3), st.integers(0, 2**31))
def test_extra_padding_never_changes_attention(length, extra, heads, seed):
    rng = np.random.default_rng(seed)
    p = _mha(d=6, heads=heads, seed=seed % 7)
    q = K.Tensor(rng.normal(size=(1, 4, 4)))
    seq = rng.normal(size=(1, length, 3))
    padded = np.concatenate([seq, np.zeros((1, extra + 1, 3))], axis=1)
    longer = np.concatenate([padded, np.zeros((1, 3, 3))], axis=1)
    with K.batch_invariant():
        a = mixed_hetero_attention(q, K.Tensor(padded), [length], p).data
        b = mixed_hetero_attention(q, K.Tensor(longer), [length], p).data
        c = mixed_hetero_attention(q, K.Tensor(seq), [length], p).data
    assert np.array_equal(a, b) and np.array_equal(a, c)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**31))
def test_key_permutation_leaves_output_unchanged(length, seed):
    rng = np.random.default_rng(seed)
    p = _mha(d=4, heads=2)
    q = K.Tensor(rng.normal(size=(4, 4)))
    seq = rng.normal(size=(length + 2, 3))
    perm = np.r_[rng.permutation(length), length, length + 1]
    a = mixed_hetero_attention(q, K.Tensor(seq), length, p).data
    b = mixed_hetero_attention(q, K.Tensor(seq[perm]), length, p).data
    assert np.allclose(a, b, atol=1e-10, rtol=0)


# -- sequence tokens and assembly -----------------------------------------------------

def test_default_token_counts():
    cfg = ModelConfig(schema=tiny_schema())
    assert cfg.routed == (16, 4) and cfg.queries == (32, 8)
    assert cfg.n_seq_tokens == 40 == 2 * cfg.n_ns_tokens
    assert cfg.n_tokens == 60 and cfg.token_dim == 256
    assert tiny_config(n_ns_tokens=5).n_tokens == 15
    no_fixed = tiny_config(n_ns_tokens=5).with_ablation(no_fixed_query=True)
    assert no_fixed.n_tokens == 2 * 5


def test_no_fixed_query_model_is_shape_valid():
    cfg = tiny_config().with_ablation(no_fixed_query=True)
    t = HeMix(cfg).tokens(tiny_batch())
    assert t.shape == (8, 2 * cfg.n_ns_tokens, cfg.token_dim)


def test_empty_sequences_propagate():
    model = HeMix(tiny_config())
    b = tiny_batch()
    b.g_len[:] = 0
    b.r_len[:] = 0
    t = model.tokens(b).data
    assert not t[:, :model.config.n_seq_tokens].any()
    assert np.all(np.isfinite(model(b).data))


def test_assemble_rejects_wrong_count():
    x = K.Tensor(np.zeros((2, 3)))
    assert assemble_tokens(x, x, x, 6).shape == (6, 3)
    with pytest.raises(K.DimensionError):
        assemble_tokens(x, x, x, 7)


def _swap_item_features(batch, schema):
    other = batch.take(slice(None))
    other.ns_ids = batch.ns_ids.copy()
    for j, f in enumerate(schema.ns_fields):
        if schema.field_group(f.field_id) == "ITEM":
            other.ns_ids[:, j] = (batch.ns_ids[:, j] + 1) % f.vocab_size
    return other


def test_fixed_query_rows_ignore_the_candidate():
    model = HeMix(tiny_config(n_ns_tokens=5))
    cfg = model.config
    b = tiny_batch(4, seed=5)
    b2 = _swap_item_features(b, cfg.schema)
    t1, t2 = model.tokens(b).data, model.tokens(b2).data
    (g, r), (fg, fr) = cfg.routed, cfg.fixed
    fixed_rows = list(range(g, g + fg)) + list(range(g + fg + r, g + fg + r + fr))
    routed_rows = list(range(g)) + list(range(g + fg, g + fg + r))
    assert np.array_equal(t1[:, fixed_rows], t2[:, fixed_rows])
    live = b.g_len > 0
    assert np.all(np.abs(t1[live][:, routed_rows[:g]] - t2[live][:, routed_rows[:g]]).max(axis=(1, 2)) > 0)


def test_sequence_tokenizer_gradients():
    rng = K.Rng(4)
    tok = SequenceTokenizer(2, 1, 2, 1, d_t=4, d_item=3, d=4, heads=2, rng=rng)
    r = np.random.default_rng(0)
    tg = K.Parameter(r.normal(size=(2, 2, 4)), "tg")
    tr = K.Parameter(r.normal(size=(2, 1, 4)), "tr")
    g = K.Parameter(r.normal(size=(2, 4, 3)), "g")
    rr = K.Parameter(r.normal(size=(2, 2, 3)), "r")
    w = r.normal(size=(2, 4, 4))
    w2 = r.normal(size=(2, 2, 4))

    def loss():
        og, orr = tok(tg, tr, g, rr, np.array([3, 4]), np.array([2, 1]))
        return K.sum(og * w) + K.sum(orr * w2)

    errs = K.grad_check(loss, tok.parameters() + [tg, tr, g, rr])
    assert max(errs.values()) < 1e-4, errs


def test_embedding_gradients():
    schema = tiny_schema()
    tables = EmbeddingTables(schema, K.Rng(1))
    b = tiny_batch(6)
    w = np.random.default_rng(0).normal(size=(6, schema.global_max_len, schema.d_item))

    def loss():
        e, g, r = embed_batch(b, tables)
        return K.sum(e * e) + K.sum(g * w) + K.sum(r)

    errs = K.grad_check(loss, tables.parameters())
    assert max(errs.values()) < 1e-4, errs


# -- AutoSplit baseline ---------------------------------------------------------------

def test_autosplit_matches_full_token_shape():
    full = HeMix(tiny_config())
    auto = HeMix(tiny_config().with_ablation(autosplit_tokenizer=True))
    b = tiny_batch()
    assert full.tokens(b).shape == auto.tokens(b).shape


def test_autosplit_zero_sequences_give_bias_pattern():
    tok = AutoSplitTokenizer(d_item=3, n_seq_tokens=4, d_t=2, rng=K.Rng(0))
    tok.b.data[...] = np.arange(8.0)
    z = K.Tensor(np.zeros((2, 5, 3)))
    out = tok(z, K.Tensor(np.zeros((2, 2, 3))), [3, 0], [0, 2]).data
    assert np.array_equal(out, np.broadcast_to(np.arange(8.0).reshape(4, 2), (2, 4, 2)))
