"""Learned layers shared by every model: embeddings, positions, causal
convolution, input gate, linear projections, and the baseline's
multi-head self-attention block.

Causality is structural, not masked-after-the-fact: the convolution only
ever reads positions <= t, so perturbing a future token leaves earlier
outputs bitwise unchanged.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


class LinearLayer:
    """Affine map x @ weight (+ bias), weight stored [d_in, d_out]."""

    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = T.Tensor(_uniform(rng, d_in, (d_in, d_out)), requires_grad=True)
        self.bias = T.Tensor(np.zeros(d_out, np.float32), requires_grad=True) if bias else None

    def __call__(self, x: T.Tensor) -> T.Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out

    def params(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias


class EmbeddingTable:
    def __init__(self, vocab_size, dim, rng):
        self.weights = T.Tensor(
            (0.02 * rng.standard_normal((vocab_size, dim))).astype(np.float32),
            requires_grad=True)

    def params(self):
        yield "weights", self.weights


class PositionalTable:
    """Learned position rows, added (never concatenated) to embeddings."""

    def __init__(self, n_max, dim, rng, trainable=True):
        self.n_max = n_max
        self.weights = T.Tensor(
            (0.02 * rng.standard_normal((n_max, dim))).astype(np.float32),
            requires_grad=trainable)

    def params(self):
        if self.weights.requires_grad:
            yield "weights", self.weights


class CausalConv:
    """1-D convolution over time, kernel size 3.

    ``mode='causal'`` pads k-1 zeros on the left only, so output t sees
    inputs t-2, t-1, t. ``mode='symmetric'`` pads one zero on each side
    (output t sees t-1, t, t+1); kept behind a flag for the one-to-one
    variant whose prediction target lies outside the window anyway.
    """

    KERNEL_SIZE = 3

    def __init__(self, dim, rng, mode="causal"):
        if mode not in ("causal", "symmetric"):
            raise ConfigError(f"unknown conv mode {mode!r}")
        k = self.KERNEL_SIZE
        self.mode = mode
        self.kernel = T.Tensor(_uniform(rng, dim * k, (dim, dim, k)), requires_grad=True)
        self.bias = T.Tensor(np.zeros(dim, np.float32), requires_grad=True)

    def params(self):
        yield "kernel", self.kernel
        yield "bias", self.bias


def _shift_time(x: T.Tensor, offset: int) -> T.Tensor:
    """Realign the time axis so position t reads x[t + offset], zero padded."""
    if offset == 0:
        return x
    B, n = x.shape[0], x.shape[1]
    width = min(abs(offset), n)
    pad = T.Tensor(np.zeros((B, width) + x.shape[2:], dtype=x.data.dtype))
    if width == n:
        return pad
    if offset < 0:
        return T.concat_time(pad, T.slice_time(x, 0, n + offset))
    return T.concat_time(T.slice_time(x, offset, n), pad)


def causal_conv(e: T.Tensor, layer: CausalConv) -> T.Tensor:
    """Convolve along time as a sum of shifted tap matmuls."""
    k = layer.KERNEL_SIZE
    out = None
    for j in range(k):
        # causal: tap j reads position t - (k-1-j); symmetric: t - 1 + j
        offset = (j - k + 1) if layer.mode == "causal" else (j - 1)
        term = T.matmul(_shift_time(e, offset), T.index_last(layer.kernel, j))
        out = term if out is None else T.add(out, term)
    return T.add(out, layer.bias)


def embed_positions(tokens: np.ndarray, embed: EmbeddingTable,
                    pos: PositionalTable) -> T.Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[1]
    if n > pos.n_max:
        raise ConfigError(f"sequence length {n} exceeds position table size {pos.n_max}")
    rows = T.embedding_lookup(embed.weights, tokens)
    prows = T.embedding_lookup(pos.weights, np.arange(n))
    return T.add(rows, prows)


def input_gate(c: T.Tensor, gate: LinearLayer) -> T.Tensor:
    return T.mul(c, T.sigmoid(gate(c)))


class InputEncoder:
    """Shared pipeline: embedding + positions -> causal conv -> input gate."""

    def __init__(self, vocab_size, dim, n_max, rng, conv_mode="causal",
                 gate_bias=False):
        self.embed = EmbeddingTable(vocab_size, dim, rng)
        self.pos = PositionalTable(n_max, dim, rng)
        self.conv = CausalConv(dim, rng, mode=conv_mode)
        self.gate = LinearLayer(dim, dim, rng, bias=gate_bias)

    def __call__(self, tokens: np.ndarray) -> T.Tensor:
        e = embed_positions(tokens, self.embed, self.pos)
        c = causal_conv(e, self.conv)
        return input_gate(c, self.gate)

    def params(self):
        for name, p in self.embed.params():
            yield f"embed.{name}", p
        for name, p in self.pos.params():
            yield f"pos.{name}", p
        for name, p in self.conv.params():
            yield f"conv.{name}", p
        for name, p in self.gate.params():
            yield f"gate.{name}", p


def encode(tokens: np.ndarray, encoder: InputEncoder) -> T.Tensor:
    return encoder(tokens)


class AttentionBlock:
    """Pre-mask scaled dot-product attention + feed-forward, post-norm."""

    def __init__(self, dim, heads, rng, ff_mult=4):
        if dim % heads != 0:
            raise ConfigError(f"embed dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.wq = LinearLayer(dim, dim, rng)
        self.wk = LinearLayer(dim, dim, rng)
        self.wv = LinearLayer(dim, dim, rng)
        self.wo = LinearLayer(dim, dim, rng)
        self.ff1 = LinearLayer(dim, ff_mult * dim, rng)
        self.ff2 = LinearLayer(ff_mult * dim, dim, rng)
        self.ln1_gain = T.Tensor(np.ones(dim, np.float32), requires_grad=True)
        self.ln1_bias = T.Tensor(np.zeros(dim, np.float32), requires_grad=True)
        self.ln2_gain = T.Tensor(np.ones(dim, np.float32), requires_grad=True)
        self.ln2_bias = T.Tensor(np.zeros(dim, np.float32), requires_grad=True)
        self.score_count = 0  # pairwise attention scores computed, for benchmarks

    def params(self):
        for sub in ("wq", "wk", "wv", "wo", "ff1", "ff2"):
            for name, p in getattr(self, sub).params():
                yield f"{sub}.{name}", p
        for name in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            yield name, getattr(self, name)


def _split_heads(x: T.Tensor, heads: int) -> T.Tensor:
    B, n, d = x.shape
    return T.transpose(T.reshape(x, (B, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: T.Tensor) -> T.Tensor:
    B, H, n, hd = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, n, H * hd))


def causal_self_attention(x: T.Tensor, block: AttentionBlock, causal=True,
                          key_pad_mask=None, return_weights=False):
    """One encoder block: attention sublayer then feed-forward, each with
    residual and layer norm. ``key_pad_mask`` (bool [B, n], True = real
    token) removes padded keys; ``causal`` adds the strict upper-triangular
    mask."""
    B, n, d = x.shape
    H = block.heads
    q = _split_heads(block.wq(x), H)
    k = _split_heads(block.wk(x), H)
    v = _split_heads(block.wv(x), H)
    scores = T.scale(T.batched_matmul(q, T.transpose(k, (0, 1, 3, 2))),
                     1.0 / math.sqrt(d // H))
    block.score_count += B * H * n * n
    if causal:
        cm = np.zeros((n, n), np.float32)
        cm[np.triu_indices(n, k=1)] = -np.inf
        scores = T.add_const(scores, cm)
    if key_pad_mask is not None:
        kp = np.where(np.asarray(key_pad_mask, bool), 0.0, -np.inf).astype(np.float32)
        scores = T.add_const(scores, kp[:, None, None, :])
    attn = T.softmax_last(scores)
    ctx = _merge_heads(T.batched_matmul(attn, v))
    x = T.layer_norm(T.add(x, block.wo(ctx)), block.ln1_gain, block.ln1_bias)
    ff = block.ff2(T.relu(block.ff1(x)))
    x = T.layer_norm(T.add(x, ff), block.ln2_gain, block.ln2_bias)
    if return_weights:
        return x, attn
    return x
