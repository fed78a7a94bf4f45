"""Token interaction blocks.

A HeteroMixer block is two Add & Norm sub-layers:

    mixed = norm(reconstruct(interact(fuse(tokens))) + tokens)
    out   = norm(hetero_ffn(mixed) + mixed)

``fuse`` regroups the i-th sub-token of every token into mixed token i,
``interact`` sends each mixed token through its own bias-free low-rank MLP,
``reconstruct`` undoes the regrouping.  The self-attention block is the
ablation baseline with the same Add & Norm placement.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernel as K
from .kernel import Module, Rng, Tensor
from .tokenizer import ConfigError

HETEROMIXER = "heteromixer"
SELF_ATTENTION = "self_attention"


@dataclass
class InteractionStackConfig:
    n_tokens: int
    d_t: int
    layers: int = 2
    heads: int = 8  # M, fusion heads (also the self-attention head count)
    d_r: int = 64
    k: int = 4
    block_kind: str = HETEROMIXER
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("interaction stack needs L >= 1")
        if self.k < 1:
            raise ConfigError("FFN expansion k must be >= 1")
        if self.block_kind not in (HETEROMIXER, SELF_ATTENTION):
            raise ConfigError(f"unknown block kind {self.block_kind!r}")
        if self.d_t % self.heads:
            raise ConfigError(f"M={self.heads} does not divide d_T={self.d_t}")
        if self.block_kind == HETEROMIXER and not 1 <= self.d_r < self.n_tokens * self.d_h:
            raise ConfigError(f"d_r={self.d_r} must satisfy 1 <= d_r < N*d_h={self.n_tokens * self.d_h}")

    @property
    def d_h(self) -> int:
        return self.d_t // self.heads


# -- fusion / reconstruction -------------------------------------------------------

def fuse_tokens(t: Tensor, m: int) -> Tensor:
    """(..., N, d_T) -> (..., M, N*d_h)."""
    *lead, n, d_t = t.shape
    if d_t % m:
        raise ConfigError(f"M={m} does not divide d_T={d_t}")
    d_h = d_t // m
    b = len(lead)
    x = K.reshape(t, (*lead, n, m, d_h))
    x = K.transpose(x, (*range(b), b + 1, b, b + 2))
    return K.reshape(x, (*lead, m, n * d_h))


def reconstruct_tokens(g: Tensor, n: int, d_t: int) -> Tensor:
    """Exact inverse of :func:`fuse_tokens`: (..., M, N*d_h) -> (..., N, d_T)."""
    *lead, m, width = g.shape
    if m * width != n * d_t or d_t % m:
        raise K.DimensionError(f"cannot reconstruct {g.shape} into ({n}, {d_t})")
    d_h = d_t // m
    b = len(lead)
    x = K.reshape(g, (*lead, m, n, d_h))
    x = K.transpose(x, (*range(b), b + 1, b, b + 2))
    return K.reshape(x, (*lead, n, d_t))


# -- HeteroMixing ---------------------------------------------------------------------

class HeteroMixing(Module):
    def __init__(self, n: int, d_t: int, m: int, d_r: int, rng: Rng, name: str):
        self.n, self.d_t, self.m = n, d_t, m
        width = n * (d_t // m)
        # W_low[m]: d_r x (N d_h), W_high[m]: (N d_h) x d_r
        self.W_low = K.glorot(rng, (m, d_r, width), f"{name}.W_low", fan_in=width, fan_out=d_r)
        self.W_high = K.glorot(rng, (m, width, d_r), f"{name}.W_high", fan_in=d_r, fan_out=width)

    def interact(self, g: Tensor) -> Tensor:
        """Row m -> W_high[m] relu(W_low[m] g_m); g is (B, M, N*d_h)."""
        x = K.transpose(g, (1, 0, 2))  # (M, B, width)
        h = K.relu(K.matmul(x, K.transpose(self.W_low)))
        y = K.matmul(h, K.transpose(self.W_high))
        return K.transpose(y, (1, 0, 2))

    def branch(self, t: Tensor) -> Tensor:
        return reconstruct_tokens(self.interact(fuse_tokens(t, self.m)), self.n, self.d_t)


def interact_mixed(g: Tensor, params: HeteroMixing) -> Tensor:
    """Accepts an unbatched (M, N*d_h) matrix or a (B, M, N*d_h) stack."""
    if g.ndim == 2:
        out = params.interact(K.reshape(g, (1,) + g.shape))
        return K.reshape(out, out.shape[1:])
    return params.interact(g)


class LayerNorm(Module):
    def __init__(self, d: int, name: str, eps: float = 1e-5):
        self.gain = K.ones((d,), f"{name}.gain")
        self.bias = K.zeros((d,), f"{name}.bias")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return K.layer_norm(x, self.gain, self.bias, self.eps)


def heteromixing(t: Tensor, mixing: HeteroMixing, ln: LayerNorm) -> Tensor:
    # one residual + LN for the whole sub-layer
    return ln(mixing.branch(t) + t)


# -- HeteroFFN ------------------------------------------------------------------------

class HeteroFFN(Module):
    """Per-token feed-forward network; token i has its own W1, b1, W2, b2."""

    def __init__(self, n: int, d_t: int, k: int, rng: Rng, name: str):
        self.W1 = K.glorot(rng, (n, d_t, k * d_t), f"{name}.W1")
        self.b1 = K.zeros((n, 1, k * d_t), f"{name}.b1")
        self.W2 = K.glorot(rng, (n, k * d_t, d_t), f"{name}.W2")
        self.b2 = K.zeros((n, 1, d_t), f"{name}.b2")

    def branch(self, s: Tensor) -> Tensor:
        """(B, N, d_T) -> (B, N, d_T), pre-residual."""
        x = K.transpose(s, (1, 0, 2))  # (N, B, d_T)
        h = K.relu(K.matmul(x, self.W1) + self.b1)
        y = K.matmul(h, self.W2) + self.b2
        return K.transpose(y, (1, 0, 2))


def hetero_ffn(s: Tensor, ffn: HeteroFFN, ln: LayerNorm) -> Tensor:
    return ln(ffn.branch(s) + s)


# -- blocks ---------------------------------------------------------------------------

class HeteroMixerBlock(Module):
    def __init__(self, cfg: InteractionStackConfig, rng: Rng, name: str):
        self.mixing = HeteroMixing(cfg.n_tokens, cfg.d_t, cfg.heads, cfg.d_r, rng, f"{name}.mix")
        self.ln1 = LayerNorm(cfg.d_t, f"{name}.ln1", cfg.ln_eps)
        self.ffn = HeteroFFN(cfg.n_tokens, cfg.d_t, cfg.k, rng, f"{name}.ffn")
        self.ln2 = LayerNorm(cfg.d_t, f"{name}.ln2", cfg.ln_eps)

    def __call__(self, t: Tensor) -> Tensor:
        return hetero_ffn(heteromixing(t, self.mixing, self.ln1), self.ffn, self.ln2)


class SelfAttentionBlock(Module):
    """Multi-head self-attention + one FFN shared by all tokens, no positional encoding."""

    def __init__(self, cfg: InteractionStackConfig, rng: Rng, name: str):
        d, kd = cfg.d_t, cfg.k * cfg.d_t
        self.heads = cfg.heads
        self.W_q = K.glorot(rng, (d, d), f"{name}.W_q")
        self.W_k = K.glorot(rng, (d, d), f"{name}.W_k")
        self.W_v = K.glorot(rng, (d, d), f"{name}.W_v")
        self.W_o = K.glorot(rng, (d, d), f"{name}.W_o")
        self.b_q = K.zeros((d,), f"{name}.b_q")
        self.b_k = K.zeros((d,), f"{name}.b_k")
        self.b_v = K.zeros((d,), f"{name}.b_v")
        self.b_o = K.zeros((d,), f"{name}.b_o")
        self.ln1 = LayerNorm(d, f"{name}.ln1", cfg.ln_eps)
        self.W1 = K.glorot(rng, (d, kd), f"{name}.W1")
        self.b1 = K.zeros((kd,), f"{name}.b1")
        self.W2 = K.glorot(rng, (kd, d), f"{name}.W2")
        self.b2 = K.zeros((d,), f"{name}.b2")
        self.ln2 = LayerNorm(d, f"{name}.ln2", cfg.ln_eps)

    def attention(self, t: Tensor) -> Tensor:
        b, n, d = t.shape
        h = self.heads
        dh = d // h

        def heads_first(x):
            return K.transpose(K.reshape(x, (b, n, h, dh)), (0, 2, 1, 3))

        q = heads_first(K.matmul(t, self.W_q) + self.b_q)
        k = heads_first(K.matmul(t, self.W_k) + self.b_k)
        v = heads_first(K.matmul(t, self.W_v) + self.b_v)
        att = K.softmax_rows(K.matmul(q, K.transpose(k)) * (1.0 / math.sqrt(dh)))
        o = K.reshape(K.transpose(K.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
        return K.matmul(o, self.W_o) + self.b_o

    def ffn(self, s: Tensor) -> Tensor:
        return K.matmul(K.relu(K.matmul(s, self.W1) + self.b1), self.W2) + self.b2

    def __call__(self, t: Tensor) -> Tensor:
        s = self.ln1(self.attention(t) + t)
        return self.ln2(self.ffn(s) + s)


def self_attention_block_baseline(t: Tensor, block: SelfAttentionBlock) -> Tensor:
    if t.ndim == 2:
        out = block(K.reshape(t, (1,) + t.shape))
        return K.reshape(out, out.shape[1:])
    return block(t)


class InteractionStack(Module):
    def __init__(self, cfg: InteractionStackConfig, rng: Rng):
        self.cfg = cfg
        kind = HeteroMixerBlock if cfg.block_kind == HETEROMIXER else SelfAttentionBlock
        self.blocks = [kind(cfg, rng, f"block{i}") for i in range(cfg.layers)]

    def __call__(self, t: Tensor) -> Tensor:
        return run_stack(t, self.blocks)


def run_stack(t0: Tensor, blocks) -> Tensor:
    t = t0
    for block in blocks:
        t = block(t)
    return t


# -- counting -------------------------------------------------------------------------

def block_param_count(cfg: InteractionStackConfig) -> dict[str, int]:
    """Exact per-block parameter count split by role."""
    n, d, k = cfg.n_tokens, cfg.d_t, cfg.k
    if cfg.block_kind == HETEROMIXER:
        mixing = 2 * cfg.heads * cfg.d_r * n * cfg.d_h
        ffn_w = 2 * n * k * d * d
        ffn_b = n * (k * d + d)
    else:
        mixing = 4 * d * d + 4 * d
        ffn_w = 2 * k * d * d
        ffn_b = k * d + d
    return {"mixing": mixing, "ffn_weights": ffn_w, "ffn_biases": ffn_b, "layer_norm": 4 * d}


def block_flops(cfg: InteractionStackConfig) -> dict[str, int]:
    """Forward FLOPs (2 per multiply-accumulate) of one block for one sample."""
    n, d, k = cfg.n_tokens, cfg.d_t, cfg.k
    ffn = n * 2 * (2 * d * k * d)
    if cfg.block_kind == HETEROMIXER:
        return {"mixing": cfg.heads * 2 * (2 * cfg.d_r * n * cfg.d_h), "ffn": ffn}
    return {"projections": 4 * 2 * n * d * d, "pairwise": 2 * (2 * n * n * d), "ffn": ffn}
