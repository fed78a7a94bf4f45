"""Synthetic click logs with a planted, learnable labelling rule.

World model
-----------
Categories carry unit latent vectors; an item's latent is its category vector
plus noise (item ``i`` belongs to category ``i % n_categories``).  Users carry
a unit latent and browse categories with probability ``softmax(beta * <u, c>)``.

Per sample: a global history drawn from the user's preferences, a short
real-time session concentrated on one intent category, a request hour and a
candidate item (half preference-driven, half uniform).  The click logit is

    base + affinity * <u, v_cand>
         + interest * mean_j <v_hist_j, v_cand>
         + recency * frac(session items sharing the candidate category)
         + pattern * (frac(history in the hot categories) - hot_share)
         + noise * eps

The ``pattern`` term ignores the candidate entirely, so a candidate-agnostic
readout of the history carries signal.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tokenizer import (
    ConfigError,
    FeatureField,
    FeatureGroup,
    FeatureSchema,
    Sample,
    SampleBatch,
    validate_batch,
)

NS_FIELDS = ("user_id", "user_segment", "item_id", "item_category", "segment_x_category", "hour")
SEQ_FIELDS = ("item_id", "item_category")
N_HOURS = 24
CHUNK = 4096


@dataclass
class PlantedSpec:
    user_latent_dim: int = 8
    affinity_weight: float = 1.0
    interest_weight: float = 4.0
    recency_weight: float = 3.0
    pattern_weight: float = 6.0
    noise_scale: float = 0.3
    base_logit: float = -2.0
    preference_sharpness: float = 3.0
    session_focus: float = 0.8
    n_hot_categories: int = 4
    # conversion given click
    cvr_base_logit: float = -1.0
    cvr_affinity_weight: float = 2.0


@dataclass
class SyntheticSpec:
    n_users: int = 2000
    n_items: int = 5000
    n_categories: int = 20
    n_segments: int = 8
    n_train: int = 200_000
    n_test: int = 20_000
    mean_global_len: int = 50
    mean_rt_len: int = 5
    seed: int = 0
    planted: PlantedSpec = field(default_factory=PlantedSpec)
    schema: FeatureSchema | None = None
    # latent world (users, items, hot categories); defaults to ``seed``
    world_seed: int | None = None

    def __post_init__(self):
        if isinstance(self.planted, dict):
            self.planted = PlantedSpec(**self.planted)
        if isinstance(self.schema, dict):
            self.schema = FeatureSchema.from_dict(self.schema)
        if self.n_users < 1 or self.n_items < self.n_categories or self.n_categories < 1:
            raise ConfigError("need n_users >= 1 and n_items >= n_categories >= 1")
        if self.planted.n_hot_categories > self.n_categories:
            raise ConfigError("more hot categories than categories")
        if self.schema is not None:
            check_schema(self, self.schema)

    @property
    def n_samples(self) -> int:
        return self.n_train + self.n_test

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = None if self.schema is None else self.schema.to_dict()
        return d


def toy_schema(spec: SyntheticSpec, global_max_len: int = 100, realtime_max_len: int = 10,
               id_dim: int = 8, side_dim: int = 4) -> FeatureSchema:
    """Schema matching the generator's fields; item fields shared with sequences."""
    c, s = spec.n_categories, spec.n_segments
    return FeatureSchema(
        groups=[
            FeatureGroup("USER", [FeatureField("user_id", spec.n_users, id_dim),
                                  FeatureField("user_segment", s, side_dim)]),
            FeatureGroup("ITEM", [FeatureField("item_id", spec.n_items, id_dim),
                                  FeatureField("item_category", c, side_dim)]),
            FeatureGroup("CROSS", [FeatureField("segment_x_category", s * c, side_dim),
                                   FeatureField("hour", N_HOURS, side_dim)]),
        ],
        seq_fields=[FeatureField("item_id", spec.n_items, id_dim, shared_with="item_id"),
                    FeatureField("item_category", c, side_dim, shared_with="item_category")],
        global_max_len=global_max_len,
        realtime_max_len=realtime_max_len,
    )


def check_schema(spec: SyntheticSpec, schema: FeatureSchema) -> None:
    ns = [f.field_id for f in schema.ns_fields]
    if tuple(ns) != NS_FIELDS:
        raise ConfigError(f"generator needs non-sequential fields {NS_FIELDS}, schema has {tuple(ns)}")
    if tuple(f.field_id for f in schema.seq_fields) != SEQ_FIELDS:
        raise ConfigError(f"generator needs sequence fields {SEQ_FIELDS}")
    need = {"user_id": spec.n_users, "user_segment": spec.n_segments, "item_id": spec.n_items,
            "item_category": spec.n_categories, "segment_x_category": spec.n_segments * spec.n_categories,
            "hour": N_HOURS}
    for f in schema.ns_fields + schema.seq_fields:
        if f.vocab_size < need[f.field_id]:
            raise ConfigError(f"field {f.field_id!r}: vocab {f.vocab_size} < required {need[f.field_id]}")
    if spec.mean_global_len > schema.global_max_len or spec.mean_rt_len > schema.realtime_max_len:
        raise ConfigError("mean sequence lengths exceed schema max lengths")


# -- world ------------------------------------------------------------------------------

@dataclass
class World:
    cat_vec: np.ndarray  # (C, r)
    item_vec: np.ndarray  # (I, r)
    user_vec: np.ndarray  # (U, r)
    user_segment: np.ndarray  # (U,)
    user_cat_cdf: np.ndarray  # (U, C)
    hot: np.ndarray  # (C,) bool


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def build_world(spec: SyntheticSpec) -> World:
    p = spec.planted
    seed = spec.seed if spec.world_seed is None else spec.world_seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    r = p.user_latent_dim
    cat_vec = _unit(rng.normal(size=(spec.n_categories, r)))
    items = np.arange(spec.n_items)
    item_vec = _unit(cat_vec[items % spec.n_categories] + 0.3 * rng.normal(size=(spec.n_items, r)))
    user_vec = _unit(rng.normal(size=(spec.n_users, r)))
    segment = rng.integers(0, spec.n_segments, spec.n_users)
    logits = p.preference_sharpness * user_vec @ cat_vec.T
    prob = np.exp(logits - logits.max(axis=1, keepdims=True))
    prob /= prob.sum(axis=1, keepdims=True)
    hot = np.zeros(spec.n_categories, dtype=bool)
    hot[rng.choice(spec.n_categories, p.n_hot_categories, replace=False)] = True
    return World(cat_vec, item_vec, user_vec, segment, np.cumsum(prob, axis=1), hot)


def _draw_categories(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF categorical draw; cdf (..., C), u (...)."""
    return np.minimum((cdf < u[..., None]).sum(axis=-1), cdf.shape[-1] - 1)


def _items_in(cats: np.ndarray, u: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    c = spec.n_categories
    count = (spec.n_items - cats - 1) // c + 1
    return cats + c * np.floor(u * count).astype(np.int64)


def _chunk(spec: SyntheticSpec, world: World, schema: FeatureSchema, start: int, size: int,
           with_probability: bool = False):
    p = spec.planted
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, start]))
    lg, lr = schema.global_max_len, schema.realtime_max_len
    user = rng.integers(0, spec.n_users, size)
    cdf = world.user_cat_cdf[user]

    g_len = np.minimum(rng.poisson(spec.mean_global_len, size), lg)
    g_cat = _draw_categories(cdf[:, None, :], rng.random((size, lg)))
    g_item = _items_in(g_cat, rng.random((size, lg)), spec)

    r_len = np.minimum(rng.poisson(spec.mean_rt_len, size), lr)
    intent = _draw_categories(cdf, rng.random(size))
    r_other = _draw_categories(cdf[:, None, :], rng.random((size, lr)))
    r_cat = np.where(rng.random((size, lr)) < p.session_focus, intent[:, None], r_other)
    r_item = _items_in(r_cat, rng.random((size, lr)), spec)

    pref_cand = rng.random(size) < 0.5
    cand_cat = np.where(pref_cand, _draw_categories(cdf, rng.random(size)),
                        rng.integers(0, spec.n_categories, size))
    cand = _items_in(cand_cat, rng.random(size), spec)
    hour = rng.integers(0, N_HOURS, size)
    seg = world.user_segment[user]

    g_live = np.arange(lg)[None, :] < g_len[:, None]
    r_live = np.arange(lr)[None, :] < r_len[:, None]
    v_cand = world.item_vec[cand]
    affinity = np.einsum("br,br->b", world.user_vec[user], v_cand)
    sims = np.einsum("blr,br->bl", world.item_vec[g_item], v_cand)
    interest = (sims * g_live).sum(1) / np.maximum(g_len, 1)
    recency = ((r_cat == cand_cat[:, None]) & r_live).sum(1) / np.maximum(r_len, 1)
    hot_share = p.n_hot_categories / spec.n_categories
    pattern = np.where(g_len > 0, (world.hot[g_cat] & g_live).sum(1) / np.maximum(g_len, 1) - hot_share, 0.0)
    logit = (p.base_logit + p.affinity_weight * affinity + p.interest_weight * interest
             + p.recency_weight * recency + p.pattern_weight * pattern
             + p.noise_scale * rng.normal(size=size))
    prob = 1.0 / (1.0 + np.exp(-np.clip(logit, -500, 500)))
    label = (rng.random(size) < prob).astype(np.int64)
    cvr_logit = p.cvr_base_logit + p.cvr_affinity_weight * affinity
    label_cvr = label * (rng.random(size) < 1.0 / (1.0 + np.exp(-cvr_logit)))

    c = spec.n_categories
    ns = np.stack([user, seg, cand, cand_cat, seg * c + cand_cat, hour], axis=1).astype(np.int32)
    g_ids = (np.stack([g_item, g_cat], axis=-1) * g_live[..., None]).astype(np.int32)
    r_ids = (np.stack([r_item, r_cat], axis=-1) * r_live[..., None]).astype(np.int32)
    batch = SampleBatch(ns, g_ids, g_len.astype(np.int32), r_ids, r_len.astype(np.int32),
                        label.astype(np.int8), label_cvr.astype(np.int8))
    return (batch, prob) if with_probability else batch


def concat_batches(parts: list[SampleBatch]) -> SampleBatch:
    cat = lambda name: np.concatenate([getattr(b, name) for b in parts])  # noqa: E731
    return SampleBatch(cat("ns_ids"), cat("g_ids"), cat("g_len"), cat("r_ids"), cat("r_len"),
                       cat("labels"), cat("labels_cvr"))


def _slices(spec: SyntheticSpec, n: int, offset: int, with_probability: bool = False):
    """Yield the requested window chunk by chunk.

    Chunks sit at global multiples of ``CHUNK`` and are always drawn whole from
    a stream keyed by (seed, chunk start), so a sample's content depends only
    on its index, never on how a request is split.
    """
    schema = spec.schema or toy_schema(spec)
    world = build_world(spec)
    for start in range(offset - offset % CHUNK, offset + n, CHUNK):
        lo, hi = max(offset, start) - start, min(offset + n, start + CHUNK) - start
        out = _chunk(spec, world, schema, start, CHUNK, with_probability)
        if with_probability:
            yield out[0].take(slice(lo, hi)), out[1][lo:hi]
        else:
            yield out.take(slice(lo, hi))


def generate_batch(spec: SyntheticSpec, n: int | None = None, offset: int = 0) -> SampleBatch:
    """Generate samples ``offset .. offset + n`` (default: the whole spec) as one batch."""
    n = spec.n_samples if n is None else n
    out = concat_batches(list(_slices(spec, n, offset)))
    validate_batch(out, spec.schema or toy_schema(spec))
    return out


def expected_click_rate(spec: SyntheticSpec, n: int, offset: int) -> float:
    """Mean click probability (no Bernoulli draw) over ``n`` fresh contexts."""
    return sum(prob.sum() for _, prob in _slices(spec, n, offset, with_probability=True)) / n


@dataclass
class Dataset:
    schema: FeatureSchema
    data: SampleBatch
    n_train: int
    spec: dict | None = None

    @property
    def train(self) -> SampleBatch:
        return self.data.take(slice(0, self.n_train))

    @property
    def test(self) -> SampleBatch:
        return self.data.take(slice(self.n_train, len(self.data)))

    def samples(self):
        d = self.data
        for i in range(len(d)):
            yield Sample(tuple(int(x) for x in d.ns_ids[i]),
                         [tuple(int(x) for x in row) for row in d.g_ids[i, : d.g_len[i]]],
                         [tuple(int(x) for x in row) for row in d.r_ids[i, : d.r_len[i]]],
                         int(d.labels[i]), int(d.labels_cvr[i]) if d.labels_cvr is not None else 0)


def generate(spec: SyntheticSpec) -> Dataset:
    schema = spec.schema or toy_schema(spec)
    batch = generate_batch(spec)
    rate = batch.labels.mean()
    if not 0.02 < rate < 0.5 and spec.planted.noise_scale < 1e3:
        raise ConfigError(f"planted click rate {rate:.4f} outside (0.02, 0.5); adjust base_logit")
    return Dataset(schema, batch, spec.n_train, spec.to_dict())


# -- file format --------------------------------------------------------------------------
#
# magic "HMXD" | u8 version | u32 header length | header JSON (utf-8)
# header: {"schema", "n_samples", "n_train", "spec"}
# then n_samples records, each: u32 payload length | payload
# payload (little-endian): u8 label | u8 label_cvr | F * u32 ns ids
#   | u16 global length | global length * A * u32 ids
#   | u16 realtime length | realtime length * A * u32 ids

DATA_MAGIC = b"HMXD"
DATA_VERSION = 1


def write_dataset(path, ds: Dataset) -> None:
    d = ds.data
    header = json.dumps({"schema": ds.schema.to_dict(), "n_samples": len(d), "n_train": ds.n_train,
                         "spec": ds.spec}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(DATA_MAGIC + struct.pack("<BI", DATA_VERSION, len(header)) + header)
    cvr = d.labels_cvr if d.labels_cvr is not None else np.zeros_like(d.labels)
    for i in range(len(d)):
        gl, rl = int(d.g_len[i]), int(d.r_len[i])
        payload = b"".join((
            struct.pack("<BB", int(d.labels[i]), int(cvr[i])),
            d.ns_ids[i].astype("<u4").tobytes(),
            struct.pack("<H", gl), d.g_ids[i, :gl].astype("<u4").tobytes(),
            struct.pack("<H", rl), d.r_ids[i, :rl].astype("<u4").tobytes(),
        ))
        buf.write(struct.pack("<I", len(payload)))
        buf.write(payload)
    Path(path).write_bytes(buf.getvalue())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(9)
        if head[:4] != DATA_MAGIC:
            raise ConfigError(f"{path}: not a dataset file")
        version, n = struct.unpack_from("<BI", head, 4)
        if version != DATA_VERSION:
            raise ConfigError(f"{path}: unsupported dataset version {version}")
        return json.loads(fh.read(n))


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATA_MAGIC:
        raise ConfigError(f"{path}: not a dataset file")
    version, hlen = struct.unpack_from("<BI", raw, 4)
    if version != DATA_VERSION:
        raise ConfigError(f"{path}: unsupported dataset version {version}")
    header = json.loads(raw[9: 9 + hlen])
    schema = FeatureSchema.from_dict(header["schema"])
    n, f, a = header["n_samples"], len(schema.ns_fields), len(schema.seq_fields)
    lg, lr = schema.global_max_len, schema.realtime_max_len
    ns = np.zeros((n, f), dtype=np.int32)
    g = np.zeros((n, lg, a), dtype=np.int32)
    r = np.zeros((n, lr, a), dtype=np.int32)
    gl = np.zeros(n, dtype=np.int32)
    rl = np.zeros(n, dtype=np.int32)
    y = np.zeros(n, dtype=np.int8)
    yc = np.zeros(n, dtype=np.int8)
    pos = 9 + hlen
    for i in range(n):
        (size,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        end = pos + size
        y[i], yc[i] = raw[pos], raw[pos + 1]
        pos += 2
        ns[i] = np.frombuffer(raw, "<u4", f, pos)
        pos += 4 * f
        (gl[i],) = struct.unpack_from("<H", raw, pos)
        pos += 2
        g[i, : gl[i]] = np.frombuffer(raw, "<u4", gl[i] * a, pos).reshape(-1, a)
        pos += 4 * gl[i] * a
        (rl[i],) = struct.unpack_from("<H", raw, pos)
        pos += 2
        r[i, : rl[i]] = np.frombuffer(raw, "<u4", rl[i] * a, pos).reshape(-1, a)
        pos += 4 * rl[i] * a
        if pos != end:
            raise ConfigError(f"{path}: corrupt record {i}")
    return Dataset(schema, SampleBatch(ns, g, gl, r, rl, y, yc), header["n_train"], header.get("spec"))
