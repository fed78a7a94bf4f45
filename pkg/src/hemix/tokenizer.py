"""Feature embedding and tokenization.

Raw samples become an ``(N, d_T)`` token matrix: non-sequential fields are
embedded, concatenated and pushed through an MLP whose output is cut into
``N_NS`` tokens; those tokens, together with learnable fixed queries, then
attend over the global and real-time behaviour sequences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernel as K
from .kernel import Module, Parameter, Rng, Tensor

GROUPS = ("USER", "ITEM", "CROSS")
MASK_VALUE = -1e9


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass
class FeatureField:
    field_id: str
    vocab_size: int
    embed_dim: int
    # sequence attributes may reuse a non-sequential field's table
    shared_with: str | None = None

    def __post_init__(self):
        if self.embed_dim < 1 or self.vocab_size < 1:
            raise ConfigError(f"field {self.field_id!r}: vocab_size and embed_dim must be >= 1")


@dataclass
class FeatureGroup:
    group: str
    fields: list[FeatureField]

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ConfigError(f"unknown feature group {self.group!r}; expected one of {GROUPS}")


@dataclass
class FeatureSchema:
    groups: list[FeatureGroup]
    seq_fields: list[FeatureField]
    global_max_len: int
    realtime_max_len: int

    def __post_init__(self):
        if self.d_ns < 1:
            raise ConfigError("schema needs at least one non-sequential field")
        if self.global_max_len < 0 or self.realtime_max_len < 0:
            raise ConfigError("sequence max lengths must be >= 0")
        names = [f.field_id for f in self.ns_fields]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate non-sequential field ids")
        by_id = {f.field_id: f for f in self.ns_fields}
        for f in self.seq_fields:
            if f.shared_with is not None:
                src = by_id.get(f.shared_with)
                if src is None:
                    raise ConfigError(f"seq field {f.field_id!r} shares unknown table {f.shared_with!r}")
                if (src.vocab_size, src.embed_dim) != (f.vocab_size, f.embed_dim):
                    raise ConfigError(f"seq field {f.field_id!r} shape differs from shared table")

    @property
    def ns_fields(self) -> list[FeatureField]:
        return [f for g in self.groups for f in g.fields]

    @property
    def d_ns(self) -> int:
        return sum(f.embed_dim for f in self.ns_fields)

    @property
    def d_item(self) -> int:
        return sum(f.embed_dim for f in self.seq_fields)

    def field_group(self, field_id: str) -> str:
        for g in self.groups:
            if any(f.field_id == field_id for f in g.fields):
                return g.group
        raise KeyError(field_id)

    def to_dict(self) -> dict:
        return {
            "groups": [{"group": g.group, "fields": [vars(f).copy() for f in g.fields]} for g in self.groups],
            "seq_fields": [vars(f).copy() for f in self.seq_fields],
            "global_max_len": self.global_max_len,
            "realtime_max_len": self.realtime_max_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        try:
            groups = [FeatureGroup(g["group"], [FeatureField(**f) for f in g["fields"]]) for g in d["groups"]]
            seq = [FeatureField(**f) for f in d.get("seq_fields", [])]
            return cls(groups, seq, int(d["global_max_len"]), int(d["realtime_max_len"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed feature schema: {exc}") from exc


@dataclass
class Sample:
    """One user/candidate record. Sequences are stored newest first."""

    ns_feature_ids: tuple[int, ...]
    global_seq: list[tuple[int, ...]] = field(default_factory=list)
    realtime_seq: list[tuple[int, ...]] = field(default_factory=list)
    label: int = 0
    label_cvr: int = 0


@dataclass
class SampleBatch:
    """Columnar, zero-padded view of several samples."""

    ns_ids: np.ndarray  # (B, F)
    g_ids: np.ndarray  # (B, L_G, A)
    g_len: np.ndarray  # (B,)
    r_ids: np.ndarray  # (B, L_R, A)
    r_len: np.ndarray  # (B,)
    labels: np.ndarray  # (B,)
    labels_cvr: np.ndarray | None = None

    def __len__(self):
        return self.ns_ids.shape[0]

    def take(self, idx) -> "SampleBatch":
        return SampleBatch(
            self.ns_ids[idx], self.g_ids[idx], self.g_len[idx], self.r_ids[idx], self.r_len[idx],
            self.labels[idx], None if self.labels_cvr is None else self.labels_cvr[idx],
        )

    def trimmed(self) -> "SampleBatch":
        """Drop padding columns beyond the longest sequence in this batch.

        Masked keys get exactly zero attention weight, so model outputs are
        unchanged up to floating-point summation order.
        """
        lg = int(self.g_len.max(initial=0))
        lr = int(self.r_len.max(initial=0))
        return SampleBatch(self.ns_ids, self.g_ids[:, :lg], self.g_len, self.r_ids[:, :lr], self.r_len,
                           self.labels, self.labels_cvr)

    def target(self, name: str = "ctr") -> np.ndarray:
        if name == "ctr":
            return self.labels
        if name == "cvr":
            if self.labels_cvr is None:
                raise InputError("dataset carries no cvr label column")
            return self.labels_cvr
        raise ConfigError(f"unknown target {name!r}")

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], schema: FeatureSchema) -> "SampleBatch":
        b, a = len(samples), len(schema.seq_fields)
        lg, lr = schema.global_max_len, schema.realtime_max_len
        ns = np.zeros((b, len(schema.ns_fields)), dtype=np.int64)
        g = np.zeros((b, lg, a), dtype=np.int64)
        r = np.zeros((b, lr, a), dtype=np.int64)
        gl = np.zeros(b, dtype=np.int64)
        rl = np.zeros(b, dtype=np.int64)
        y = np.zeros(b, dtype=np.int64)
        yc = np.zeros(b, dtype=np.int64)
        for i, s in enumerate(samples):
            if len(s.ns_feature_ids) != ns.shape[1]:
                raise InputError(f"sample {i}: expected {ns.shape[1]} non-sequential ids, got {len(s.ns_feature_ids)}")
            if len(s.global_seq) > lg or len(s.realtime_seq) > lr:
                raise InputError(f"sample {i}: sequence longer than schema max length")
            ns[i] = s.ns_feature_ids
            gl[i], rl[i] = len(s.global_seq), len(s.realtime_seq)
            if gl[i]:
                g[i, : gl[i]] = np.asarray(s.global_seq).reshape(gl[i], a)
            if rl[i]:
                r[i, : rl[i]] = np.asarray(s.realtime_seq).reshape(rl[i], a)
            y[i], yc[i] = s.label, s.label_cvr
        batch = cls(ns, g, gl, r, rl, y, yc)
        validate_batch(batch, schema)
        return batch


def validate_batch(batch: SampleBatch, schema: FeatureSchema) -> None:
    """Raise InputError naming the first field holding an out-of-vocabulary id."""
    for j, f in enumerate(schema.ns_fields):
        col = batch.ns_ids[:, j]
        if col.size and (col.min() < 0 or col.max() >= f.vocab_size):
            raise InputError(f"field {f.field_id!r}: id outside vocabulary of size {f.vocab_size}")
    for ids, lens, which in ((batch.g_ids, batch.g_len, "global"), (batch.r_ids, batch.r_len, "realtime")):
        live = np.arange(ids.shape[1])[None, :] < lens[:, None]
        for a, f in enumerate(schema.seq_fields):
            vals = ids[..., a][live]
            if vals.size and (vals.min() < 0 or vals.max() >= f.vocab_size):
                raise InputError(f"{which} sequence field {f.field_id!r}: id outside vocabulary of size {f.vocab_size}")


# -- embedding -------------------------------------------------------------------

class EmbeddingTables(Module):
    def __init__(self, schema: FeatureSchema, rng: Rng):
        self.schema = schema
        self.tables = {
            f.field_id: K.glorot(rng, (f.vocab_size, f.embed_dim), f"emb.{f.field_id}")
            for f in schema.ns_fields
        }
        for f in schema.seq_fields:
            if f.shared_with is None:
                self.tables[f"seq.{f.field_id}"] = K.glorot(
                    rng, (f.vocab_size, f.embed_dim), f"emb.seq.{f.field_id}")

    def seq_table(self, f: FeatureField) -> Parameter:
        return self.tables[f.shared_with] if f.shared_with else self.tables[f"seq.{f.field_id}"]


def _pad_mask(lens: np.ndarray, max_len: int) -> np.ndarray:
    return (np.arange(max_len)[None, :] < np.asarray(lens)[:, None]).astype(K.get_default_dtype())


def embed_batch(batch: SampleBatch, tables: EmbeddingTables):
    """Return ``(e_ns (B, d_NS), G (B, L_G, d_I), R (B, L_R, d_I))``; pads are zero rows."""
    schema = tables.schema
    e_ns = K.concat([K.embedding(tables.tables[f.field_id], batch.ns_ids[:, j])
                     for j, f in enumerate(schema.ns_fields)], axis=-1)

    def seq(ids, lens):
        b, length = ids.shape[:2]
        if length == 0 or not schema.seq_fields:
            return Tensor(np.zeros((b, length, schema.d_item)))
        rows = K.concat([K.embedding(tables.seq_table(f), ids[..., a])
                         for a, f in enumerate(schema.seq_fields)], axis=-1)
        return rows * _pad_mask(lens, length)[..., None]

    return e_ns, seq(batch.g_ids, batch.g_len), seq(batch.r_ids, batch.r_len)


def embed_sample(sample: Sample, schema: FeatureSchema, tables: EmbeddingTables) -> dict:
    batch = SampleBatch.from_samples([sample], schema)
    e_ns, g, r = embed_batch(batch, tables)
    return {"e_ns": e_ns.data[0], "global": g.data[0], "realtime": r.data[0],
            "g_len": int(batch.g_len[0]), "r_len": int(batch.r_len[0])}


# -- non-sequential tokens -------------------------------------------------------

class MLP(Module):
    """Linear layers with ReLU between them (none after the last).

    ``zero_last`` starts the output layer at zero, making the untrained
    network a constant function of its input.
    """

    def __init__(self, dims: Sequence[int], rng: Rng, name: str, zero_last: bool = False):
        self.weights = [K.glorot(rng, (i, o), f"{name}.W{n}") for n, (i, o) in enumerate(zip(dims[:-1], dims[1:]))]
        if zero_last:
            self.weights[-1] = K.zeros(self.weights[-1].shape, self.weights[-1].name)
        self.biases = [K.zeros((o,), f"{name}.b{n}") for n, o in enumerate(dims[1:])]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def __call__(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = K.matmul(x, w) + b
            if i < len(self.weights) - 1:
                x = K.relu(x)
        return x


class NSTokenizer(Module):
    """Interact-then-split: MLP over the concatenated embedding, cut into tokens."""

    def __init__(self, d_ns: int, n_ns: int, d_t: int, hidden: Sequence[int], rng: Rng):
        self.n_ns, self.d_t = n_ns, d_t
        self.mlp = MLP([d_ns, *hidden, n_ns * d_t], rng, "ns_mlp")
        if self.mlp.dims[-1] != n_ns * d_t:
            raise ConfigError("NS interaction MLP output width must equal N_NS * d_T")

    def __call__(self, e_ns: Tensor) -> Tensor:
        return split_tokens(self.mlp(e_ns), self.d_t)


def split_tokens(x: Tensor, d_t: int) -> Tensor:
    """(..., n*d_t) -> (..., n, d_t) in contiguous slices."""
    width = x.shape[-1]
    if width % d_t:
        raise ConfigError(f"width {width} is not a multiple of token size {d_t}")
    return K.reshape(x, x.shape[:-1] + (width // d_t, d_t))


def tokenize_ns(e_ns: Tensor, ns_tokenizer: NSTokenizer) -> Tensor:
    return ns_tokenizer(e_ns)


def split_sizes(n_ns: int) -> tuple[int, int]:
    """4:1 split of NS tokens into (global, real-time) query groups, at least one each."""
    if n_ns < 2:
        raise ConfigError("need N_NS >= 2 so both sequences receive a routed query")
    n_g = max(1, n_ns - math.ceil(n_ns / 5))
    return n_g, n_ns - n_g


def split_ns_queries(ns_tokens: Tensor) -> tuple[Tensor, Tensor]:
    n_g, _ = split_sizes(ns_tokens.shape[-2])
    return ns_tokens[..., :n_g, :], ns_tokens[..., n_g:, :]


# -- mixed hetero attention --------------------------------------------------------

def attend(q: Tensor, k: Tensor, v: Tensor, seq_len: np.ndarray, heads: int = 1) -> Tensor:
    """Masked scaled dot-product attention over projected inputs.

    q: (B, L_Q, d), k/v: (B, L_s, d), seq_len: (B,). Returns (B, L_Q, d).
    Keys at positions >= seq_len get an additive mask; rows for an empty
    sequence come out as zeros.
    """
    b, l_q, d = q.shape
    l_s = k.shape[1]
    if d % heads:
        raise ConfigError(f"attention width {d} not divisible by {heads} heads")
    dh = d // heads
    seq_len = np.asarray(seq_len)
    if l_s == 0:
        return K.mul(q, 0.0)
    qh = K.transpose(K.reshape(q, (b, l_q, heads, dh)), (0, 2, 1, 3))
    kh = K.transpose(K.reshape(k, (b, l_s, heads, dh)), (0, 2, 3, 1))
    vh = K.transpose(K.reshape(v, (b, l_s, heads, dh)), (0, 2, 1, 3))
    scores = K.matmul(qh, kh) * (1.0 / math.sqrt(dh))
    live = np.arange(l_s)[None, :] < seq_len[:, None]
    mask = np.where(live, 0.0, MASK_VALUE)[:, None, None, :]
    att = K.softmax_rows(scores, mask)
    nonempty = (seq_len > 0).astype(K.get_default_dtype())[:, None, None, None]
    if not nonempty.all():
        att = att * nonempty
    out = K.matmul(att, vh)
    return K.reshape(K.transpose(out, (0, 2, 1, 3)), (b, l_q, d))


class MixedHeteroAttention(Module):
    """Cross attention where every query row owns its projection matrix.

    Query rows are ``[routed NS tokens ; fixed learnable queries]``; key and
    value projections are shared across the sequence.
    """

    def __init__(self, n_routed: int, n_fixed: int, d_t: int, d_item: int, d: int, heads: int,
                 rng: Rng, name: str):
        if d % heads:
            raise ConfigError(f"attention width {d} not divisible by {heads} heads")
        self.n_routed, self.n_fixed, self.heads = n_routed, n_fixed, heads
        self.fixed_queries = K.glorot(rng, (n_fixed, d_t), f"{name}.Q_fixed")
        self.W_Q_routed = K.glorot(rng, (n_routed, d_t, d), f"{name}.W_Q_routed")
        self.W_Q_fixed = K.glorot(rng, (n_fixed, d_t, d), f"{name}.W_Q_fixed")
        self.W_K = K.glorot(rng, (d_item, d), f"{name}.W_K")
        self.W_V = K.glorot(rng, (d_item, d), f"{name}.W_V")
        self.W_O = K.glorot(rng, (d, d_t), f"{name}.W_O")

    @property
    def n_queries(self) -> int:
        return self.n_routed + self.n_fixed

    @property
    def per_query_W_Q(self) -> np.ndarray:
        return np.concatenate([self.W_Q_routed.data, self.W_Q_fixed.data], axis=0)

    def project_queries(self, routed: Tensor) -> Tensor:
        """(B, n_routed, d_T) -> (B, L_Q, d), each row through its own matrix."""
        b = routed.shape[0]
        parts = []
        if self.n_routed:
            q = K.matmul(K.transpose(routed, (1, 0, 2)), self.W_Q_routed)
            parts.append(K.transpose(q, (1, 0, 2)))
        if self.n_fixed:
            # computed once, independent of the sample, then broadcast
            fq = K.matmul(K.reshape(self.fixed_queries, (self.n_fixed, 1, -1)), self.W_Q_fixed)
            fq = K.reshape(fq, (1, self.n_fixed, fq.shape[-1]))
            parts.append(K.broadcast_to(fq, (b, self.n_fixed, fq.shape[-1])))
        return parts[0] if len(parts) == 1 else K.concat(parts, axis=1)

    def __call__(self, routed: Tensor, seq: Tensor, seq_len: np.ndarray) -> Tensor:
        if routed.shape[1] != self.n_routed:
            raise ConfigError(f"expected {self.n_routed} routed queries, got {routed.shape[1]}")
        q = self.project_queries(routed)
        k = K.matmul(seq, self.W_K)
        v = K.matmul(seq, self.W_V)
        return K.matmul(attend(q, k, v, seq_len, self.heads), self.W_O)


def mixed_hetero_attention(queries: Tensor, seq: Tensor, seq_len, params: MixedHeteroAttention) -> Tensor:
    """Functional form taking the full query stack ``[routed ; fixed]``.

    Accepts unbatched (L_Q, d_T) / (L_s, d_I) inputs too.
    """
    unbatched = queries.ndim == 2
    if unbatched:
        queries = K.reshape(queries, (1,) + queries.shape)
        seq = K.reshape(seq, (1,) + seq.shape)
        seq_len = [seq_len]
    if queries.shape[1] != params.n_queries:
        raise ConfigError(f"expected {params.n_queries} queries, got {queries.shape[1]}")
    w_q = K.concat([params.W_Q_routed, params.W_Q_fixed], axis=0)
    q = K.transpose(K.matmul(K.transpose(queries, (1, 0, 2)), w_q), (1, 0, 2))
    k = K.matmul(seq, params.W_K)
    v = K.matmul(seq, params.W_V)
    out = K.matmul(attend(q, k, v, np.asarray(seq_len), params.heads), params.W_O)
    return K.reshape(out, out.shape[1:]) if unbatched else out


class SequenceTokenizer(Module):
    def __init__(self, n_g: int, n_r: int, fixed_g: int, fixed_r: int, d_t: int, d_item: int,
                 d: int, heads: int, rng: Rng):
        self.attn_global = MixedHeteroAttention(n_g, fixed_g, d_t, d_item, d, heads, rng, "mha_global")
        self.attn_realtime = MixedHeteroAttention(n_r, fixed_r, d_t, d_item, d, heads, rng, "mha_realtime")

    def __call__(self, t_ns_g, t_ns_r, g, r, g_len, r_len) -> tuple[Tensor, Tensor]:
        return self.attn_global(t_ns_g, g, g_len), self.attn_realtime(t_ns_r, r, r_len)


def tokenize_sequences(t_ns_g, t_ns_r, g, r, g_len, r_len, seq_tok: SequenceTokenizer):
    return seq_tok(t_ns_g, t_ns_r, g, r, g_len, r_len)


def assemble_tokens(o_g: Tensor, o_r: Tensor, ns_tokens: Tensor, n_expected: int | None = None) -> Tensor:
    out = K.concat([o_g, o_r, ns_tokens], axis=-2)
    if n_expected is not None and out.shape[-2] != n_expected:
        raise K.DimensionError(f"assembled {out.shape[-2]} tokens, expected {n_expected}")
    return out


class AutoSplitTokenizer(Module):
    """Ablation baseline: pooled sequences -> one linear map -> split into tokens."""

    def __init__(self, d_item: int, n_seq_tokens: int, d_t: int, rng: Rng):
        self.n_seq_tokens, self.d_t = n_seq_tokens, d_t
        self.W = K.glorot(rng, (2 * d_item, n_seq_tokens * d_t), "autosplit.W")
        self.b = K.zeros((n_seq_tokens * d_t,), "autosplit.b")

    def __call__(self, g: Tensor, r: Tensor, g_len, r_len) -> Tensor:
        pooled = K.concat([_masked_mean(g, g_len), _masked_mean(r, r_len)], axis=-1)
        return split_tokens(K.matmul(pooled, self.W) + self.b, self.d_t)


def _masked_mean(x: Tensor, lens) -> Tensor:
    lens = np.asarray(lens)
    w = _pad_mask(lens, x.shape[1]) / np.maximum(lens, 1)[:, None]
    return K.sum(x * w[..., None], axis=1)


def tokenize_autosplit_baseline(e_ns: Tensor, g: Tensor, r: Tensor, g_len, r_len,
                                ns_tokenizer: NSTokenizer, autosplit: AutoSplitTokenizer) -> Tensor:
    return K.concat([autosplit(g, r, g_len, r_len), ns_tokenizer(e_ns)], axis=-2)
