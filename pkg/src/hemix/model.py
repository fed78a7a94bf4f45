"""Model assembly, loss, optimizer, training loop, parameter/FLOP accounting."""
from __future__ import annotations

import contextlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import kernel as K
from .heteromixer import (
    HETEROMIXER,
    SELF_ATTENTION,
    InteractionStack,
    InteractionStackConfig,
    block_flops,
    block_param_count,
)
from .kernel import Module, NumericError, Parameter, Rng, Tensor
from .tokenizer import (
    MLP,
    AutoSplitTokenizer,
    ConfigError,
    EmbeddingTables,
    FeatureSchema,
    NSTokenizer,
    SampleBatch,
    SequenceTokenizer,
    assemble_tokens,
    embed_batch,
    split_ns_queries,
    split_sizes,
)

PROB_EPS = 1e-7


class NumericFault(RuntimeError):
    pass


@dataclass
class AblationFlags:
    no_fixed_query: bool = False
    autosplit_tokenizer: bool = False
    self_attention_blocks: bool = False


@dataclass
class TrainingConfig:
    batch_size: int = 256
    learning_rate: float = 1e-4
    steps: int = 1000
    seed: int = 0
    target: str = "ctr"
    eval_batch_size: int = 4096
    log_every: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")


@dataclass
class ModelConfig:
    schema: FeatureSchema
    n_ns_tokens: int = 20
    token_dim: int = 256
    attn_dim: int | None = None  # defaults to token_dim
    attn_heads: int = 1
    mix_heads: int = 8
    n_blocks: int = 2
    ffn_expansion: int = 4
    low_rank: int | None = None  # defaults to token_dim // 4
    fixed_global_queries: int | None = None  # defaults to the routed global count
    fixed_realtime_queries: int | None = None
    ns_hidden: list[int] | None = None  # defaults to two layers of 2 * N_NS * d_T
    head_hidden: list[int] | None = None  # defaults to [d_T // 2]
    ln_eps: float = 1e-5
    ablation: AblationFlags = field(default_factory=AblationFlags)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        split_sizes(self.n_ns_tokens)
        if self.token_dim < 1:
            raise ConfigError("token_dim must be >= 1")
        if self.d % self.attn_heads:
            raise ConfigError(f"attn_dim {self.d} not divisible by {self.attn_heads} heads")
        self.stack_config()  # validates M, d_r, L, k

    # resolved sizes
    @property
    def d(self) -> int:
        return self.attn_dim or self.token_dim

    @property
    def d_r(self) -> int:
        return self.low_rank or max(1, self.token_dim // 4)

    @property
    def routed(self) -> tuple[int, int]:
        return split_sizes(self.n_ns_tokens)

    @property
    def fixed(self) -> tuple[int, int]:
        if self.ablation.no_fixed_query:
            return 0, 0
        g, r = self.routed
        return (g if self.fixed_global_queries is None else self.fixed_global_queries,
                r if self.fixed_realtime_queries is None else self.fixed_realtime_queries)

    @property
    def queries(self) -> tuple[int, int]:
        (g, r), (fg, fr) = self.routed, self.fixed
        return g + fg, r + fr

    @property
    def n_seq_tokens(self) -> int:
        return sum(self.queries)

    @property
    def n_tokens(self) -> int:
        return self.n_seq_tokens + self.n_ns_tokens

    @property
    def ns_dims(self) -> list[int]:
        hidden = self.ns_hidden if self.ns_hidden is not None else [2 * self.n_ns_tokens * self.token_dim] * 2
        return [self.schema.d_ns, *hidden, self.n_ns_tokens * self.token_dim]

    @property
    def head_dims(self) -> list[int]:
        hidden = self.head_hidden if self.head_hidden is not None else [max(1, self.token_dim // 2)]
        return [self.token_dim, *hidden, 1]

    def stack_config(self) -> InteractionStackConfig:
        return InteractionStackConfig(
            n_tokens=self.n_tokens, d_t=self.token_dim, layers=self.n_blocks, heads=self.mix_heads,
            d_r=self.d_r, k=self.ffn_expansion,
            block_kind=SELF_ATTENTION if self.ablation.self_attention_blocks else HETEROMIXER,
            ln_eps=self.ln_eps,
        )

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["schema"] = self.schema.to_dict()
        d["ablation"] = asdict(self.ablation)
        d["training"] = asdict(self.training)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if "schema" not in d:
            raise ConfigError("model config needs a feature schema")
        schema = d.pop("schema")
        schema = schema if isinstance(schema, FeatureSchema) else FeatureSchema.from_dict(schema)
        try:
            ablation = AblationFlags(**d.pop("ablation", {}) or {})
            training = TrainingConfig(**d.pop("training", {}) or {})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(schema=schema, ablation=ablation, training=training, **d)

    def with_ablation(self, **flags) -> "ModelConfig":
        return replace(self, ablation=replace(self.ablation, **flags))


# -- model ----------------------------------------------------------------------------

@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except NumericError as exc:
        raise NumericFault(f"non-finite values in {name}: {exc}") from exc


class HeMix(Module):
    def __init__(self, config: ModelConfig, seed: int | None = None):
        self.config = config
        rng = Rng(config.training.seed if seed is None else seed)
        schema = config.schema
        self.embeddings = EmbeddingTables(schema, rng)
        self.ns_tokenizer = NSTokenizer(schema.d_ns, config.n_ns_tokens, config.token_dim,
                                        config.ns_dims[1:-1], rng)
        if config.ablation.autosplit_tokenizer:
            self.seq_tokenizer = AutoSplitTokenizer(schema.d_item, config.n_seq_tokens, config.token_dim, rng)
        else:
            (g, r), (fg, fr) = config.routed, config.fixed
            self.seq_tokenizer = SequenceTokenizer(g, r, fg, fr, config.token_dim, schema.d_item,
                                                   config.d, config.attn_heads, rng)
        self.stack = InteractionStack(config.stack_config(), rng)
        self.head = MLP(config.head_dims, rng, "head", zero_last=True)

    def tokens(self, batch: SampleBatch) -> Tensor:
        """Token matrix (B, N, d_T) feeding the interaction stack."""
        cfg = self.config
        with _stage("embedding"):
            e_ns, g, r = embed_batch(batch, self.embeddings)
        with _stage("ns_tokenizer"):
            ns_tokens = self.ns_tokenizer(e_ns)
        with _stage("sequence_tokenizer"):
            if cfg.ablation.autosplit_tokenizer:
                seq = self.seq_tokenizer(g, r, batch.g_len, batch.r_len)
                return K.concat([seq, ns_tokens], axis=1)
            t_g, t_r = split_ns_queries(ns_tokens)
            o_g, o_r = self.seq_tokenizer(t_g, t_r, g, r, batch.g_len, batch.r_len)
        return assemble_tokens(o_g, o_r, ns_tokens, cfg.n_tokens)

    def logits(self, batch: SampleBatch) -> Tensor:
        t = self.tokens(batch)
        for i, block in enumerate(self.stack.blocks):
            with _stage(f"interaction block {i}"):
                t = block(t)
        with _stage("prediction head"):
            pooled = K.mean(t, axis=1)
            return K.reshape(self.head(pooled), (t.shape[0],))

    def forward(self, batch: SampleBatch) -> Tensor:
        z = self.logits(batch)
        with _stage("sigmoid"):
            # float64 sigmoid rounds to exactly 0 or 1 for |z| > ~37; keep it open
            lo = np.finfo(z.data.dtype).tiny
            return K.clip(K.sigmoid(z), lo, 1.0 - np.finfo(z.data.dtype).epsneg)

    __call__ = forward

    def predict(self, batch: SampleBatch, batch_size: int = 4096) -> np.ndarray:
        out = [self.forward(batch.take(slice(i, i + batch_size)).trimmed()).data
               for i in range(0, len(batch), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing, extra = set(own) - set(state), set(state) - set(own)
            raise ConfigError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            if p.data.shape != state[name].shape:
                raise ConfigError(f"shape mismatch for {name}: {p.data.shape} vs {state[name].shape}")
            p.data[...] = state[name]


# -- loss / optimizer -------------------------------------------------------------------

def bce_loss(probs: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(labels, dtype=K.get_default_dtype())
    p = K.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    per = -(K.log(p) * y + K.log(1.0 - p) * (1.0 - y))
    return K.mean(per)


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params, self.lr, self.beta1, self.beta2, self.eps = params, lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericFault(f"non-finite gradient for parameter {p.name}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        K.zero_grad(self.params)


def train_step(model: HeMix, batch: SampleBatch, opt: Adam, target: str = "ctr") -> float:
    opt.zero_grad()
    loss = bce_loss(model(batch), batch.target(target))
    K.backward(loss)
    opt.step()
    return loss.item()


def iterate_batches(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless shuffled index batches; epoch e uses a stream derived from (seed, e)."""
    rng = Rng(seed)
    epoch = 0
    while True:
        order = rng.child(epoch).permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[i: i + batch_size]
        epoch += 1


def train(model: HeMix, data: SampleBatch, steps: int | None = None,
          callback: Callable[[int, float], None] | None = None) -> list[float]:
    """Run Adam for ``steps`` minibatches; returns the per-step loss curve."""
    tc = model.config.training
    steps = tc.steps if steps is None else steps
    opt = Adam(model.parameters(), lr=tc.learning_rate)
    losses = []
    batches = iterate_batches(len(data), tc.batch_size, tc.seed)
    for step in range(steps):
        loss = train_step(model, data.take(next(batches)).trimmed(), opt, tc.target)
        losses.append(loss)
        if callback is not None:
            callback(step, loss)
    return losses


# -- accounting -------------------------------------------------------------------------

def _mlp_params(dims: list[int]) -> int:
    return sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))


def _mlp_flops(dims: list[int]) -> int:
    return sum(2 * i * o for i, o in zip(dims[:-1], dims[1:]))


def count_params(config: ModelConfig) -> dict[str, float]:
    """Exact parameter counts per component plus the 2kLN d_T^2 approximation."""
    schema, d_t = config.schema, config.token_dim
    embeddings = sum(f.vocab_size * f.embed_dim for f in schema.ns_fields)
    embeddings += sum(f.vocab_size * f.embed_dim for f in schema.seq_fields if f.shared_with is None)
    tokenizer = _mlp_params(config.ns_dims)
    if config.ablation.autosplit_tokenizer:
        tokenizer += 2 * schema.d_item * config.n_seq_tokens * d_t + config.n_seq_tokens * d_t
    else:
        for n_q, n_fixed in zip(config.queries, config.fixed):
            tokenizer += n_fixed * d_t + n_q * d_t * config.d + 2 * schema.d_item * config.d + config.d * d_t
    stack_cfg = config.stack_config()
    blk = block_param_count(stack_cfg)
    depth = config.n_blocks
    stack = depth * sum(blk.values())
    head = _mlp_params(config.head_dims)
    approx = 2 * config.ffn_expansion * depth * config.n_tokens * d_t ** 2
    weights = depth * (blk["mixing"] + blk["ffn_weights"])
    is_hm = stack_cfg.block_kind == HETEROMIXER
    return {
        "total": embeddings + tokenizer + stack + head,
        "embeddings": embeddings,
        "tokenizer": tokenizer,
        "interaction_stack": stack,
        "interaction_weights": weights,
        "heteroffn_weights": depth * blk["ffn_weights"] if is_hm else 0,
        "heteromixing_extra": depth * blk["mixing"] if is_hm else 0,
        "head": head,
        "approx": approx,
        "approx_ratio": weights / approx,
        "approx_gap": weights / approx - 1.0,
    }


def estimate_flops(config: ModelConfig) -> dict[str, int]:
    """Analytic forward FLOPs for one sample, 2 per multiply-accumulate.

    Sequence attention is costed over the padded lengths L_G / L_R, matching
    what the forward pass actually executes.  ``shared_fixed_queries`` is the
    part of the attention cost that a batched forward pays once per batch
    rather than once per sample (it is included in ``total``).
    """
    schema, d_t, d = config.schema, config.token_dim, config.d
    out = {"ns_mlp": _mlp_flops(config.ns_dims)}
    if config.ablation.autosplit_tokenizer:
        out["autosplit"] = 2 * (2 * schema.d_item) * config.n_seq_tokens * d_t
    else:
        for name, n_q, l_s in (("attention_global", config.queries[0], schema.global_max_len),
                               ("attention_realtime", config.queries[1], schema.realtime_max_len)):
            proj = 2 * n_q * d_t * d + 2 * 2 * l_s * schema.d_item * d
            core = 2 * n_q * l_s * d * 2 if l_s else 0
            out[name] = proj + core + 2 * n_q * d * d_t
        out_shared = 2 * sum(config.fixed) * d_t * d
    per_block = block_flops(config.stack_config())
    for key, val in per_block.items():
        out[f"stack_{key}"] = config.n_blocks * val
    out["interaction_stack"] = config.n_blocks * sum(per_block.values())
    out["head"] = _mlp_flops(config.head_dims)
    out["total"] = sum(v for k, v in out.items() if not k.startswith("stack_"))
    out["shared_fixed_queries"] = 0 if config.ablation.autosplit_tokenizer else out_shared
    return out


# -- checkpoints ----------------------------------------------------------------------------
#
# magic "HMXC" | u8 format version | u32 config-json length | config json (utf-8)
# u32 parameter count, then per parameter:
#   u16 name length | name (utf-8) | u8 ndim | ndim * u32 dims | float64 little-endian data

CKPT_MAGIC = b"HMXC"
CKPT_VERSION = 1


def save_checkpoint(path, model: HeMix) -> None:
    buf = io.BytesIO()
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(cfg)) + cfg)
    named = model.named_parameters()
    buf.write(struct.pack("<I", len(named)))
    for name, p in named:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> HeMix:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<BI", raw, 4)
    if version != CKPT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    pos = 9
    config = ModelConfig.from_dict(json.loads(raw[pos: pos + n]))
    pos += n
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos: pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
    model = HeMix(config)
    model.load_state_dict(state)
    return model
