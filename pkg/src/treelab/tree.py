"""Gated pairwise merging and the three aggregation schedules built on it:
full binary tree reduction, causal doubling scan, and chunk-parallel
reduction with exclusive-prefix context injection.

One MergeCell is reused at every level and every step, so its parameter
count stays independent of sequence length and its gradient accumulates
over every site it appears in.

The merge is not associative: regrouping operands changes the result, so
nothing here may assume scan/reduce interchangeability.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import LinearLayer


class MergeStats:
    """Counts pair merges and levels; reset at the start of each forward."""

    def __init__(self):
        self.merges_performed = 0
        self.levels = 0

    def reset(self):
        self.merges_performed = 0
        self.levels = 0


class MergeCell:
    """Parameters of the pairwise merge: three 2d->d projections, their
    optional biases, and the norm gain.

    ``res_gate_override`` pins the residual gate to a constant (used to
    collapse the cell into plain averaging); None means learned gating.
    """

    def __init__(self, dim, rng, bias=True, eps=1e-6):
        self.dim = dim
        self.eps = eps
        self.value = LinearLayer(2 * dim, dim, rng, bias=bias)
        self.gate = LinearLayer(2 * dim, dim, rng, bias=bias)
        self.residual_gate = LinearLayer(2 * dim, dim, rng, bias=bias)
        self.norm_gain = T.Tensor(np.ones(dim, np.float32), requires_grad=True)
        self.res_gate_override = None
        self.stats = MergeStats()

    def params(self):
        for sub in ("value", "gate", "residual_gate"):
            for name, p in getattr(self, sub).params():
                yield f"{sub}.{name}", p
        yield "norm_gain", self.norm_gain


def glu_merge(left: T.Tensor, right: T.Tensor, cell: MergeCell,
              stats: MergeStats | None = None) -> T.Tensor:
    """Merge sibling vectors: gated projection of their concatenation,
    normalized, then blended with their arithmetic mean by a learned gate.
    """
    if left.shape != right.shape:
        raise ShapeError(f"glu_merge: shapes differ, {tuple(left.shape)} vs {tuple(right.shape)}")
    stats = stats if stats is not None else cell.stats
    stats.merges_performed += left.size // left.shape[-1]

    mean = T.scale(T.add(left, right), 0.5)
    if cell.res_gate_override == 0.0:
        return mean
    combined = T.concat_last(left, right)
    merged = T.rmsnorm(T.mul(cell.value(combined), T.sigmoid(cell.gate(combined))),
                       cell.norm_gain, cell.eps)
    if cell.res_gate_override is not None:
        rg = float(cell.res_gate_override)
        return T.add(T.scale(merged, rg), T.scale(mean, 1.0 - rg))
    res_gate = T.sigmoid(cell.residual_gate(combined))
    ones = T.Tensor(np.ones((), dtype=res_gate.data.dtype))
    return T.add(T.mul(res_gate, merged), T.mul(T.sub(ones, res_gate), mean))


def tree_reduce(h: T.Tensor, cell: MergeCell,
                stats: MergeStats | None = None) -> T.Tensor:
    """Merge adjacent pairs level by level until one root vector remains.

    [B, n, d] -> [B, 1, d]. Odd level sizes carry the unpaired trailing
    node up unchanged, so any n terminates with exactly n-1 merges.
    """
    stats = stats if stats is not None else cell.stats
    while h.shape[1] > 1:
        left, right, carry = T.stride_split(h)
        merged = glu_merge(left, right, cell, stats)
        h = merged if carry is None else T.concat_time(merged, carry)
        stats.levels += 1
    return h


def causal_scan(nodes: T.Tensor, cell: MergeCell,
                stats: MergeStats | None = None) -> T.Tensor:
    """Doubling-stride prefix aggregation.

    After steps 1, 2, 4, ... position t holds a summary of positions
    0..t. Each step reads only the previous iteration's state (functional
    double buffering), and position 0 is never rewritten.
    """
    stats = stats if stats is not None else cell.stats
    n = nodes.shape[1]
    curr = nodes
    step = 1
    while step < n:
        left = T.slice_time(curr, 0, n - step)
        right = T.slice_time(curr, step, n)
        merged = glu_merge(left, right, cell, stats)
        curr = T.concat_time(T.slice_time(curr, 0, step), merged)
        stats.levels += 1
        step *= 2
    return curr


def scan_steps(n: int) -> int:
    """Number of doubling iterations the scan performs for length n."""
    return max(0, math.ceil(math.log2(n))) if n > 1 else 0


def chunk_partition(nodes: T.Tensor, chunk: int) -> T.Tensor:
    """Regroup [B, n, d] into [B, C, K, d] with chunk i holding positions
    i*K .. (i+1)*K-1. Requires n % K == 0."""
    B, n, d = nodes.shape
    if chunk < 1:
        raise ConfigError(f"chunk size must be >= 1, got {chunk}")
    if n % chunk != 0:
        raise ConfigError(
            f"sequence length {n} is not a multiple of chunk size {chunk}; "
            "pad the sequence or truncate it to a multiple first")
    return T.reshape(nodes, (B, n // chunk, chunk, d))


def chunk_summaries(chunks: T.Tensor, cell: MergeCell,
                    stats: MergeStats | None = None) -> T.Tensor:
    """Reduce every chunk to its root in one batched pass.

    [B, C, K, d] -> [B, C, d]. The B*C product is treated as the batch
    axis, so each chunk's root is identical to reducing that chunk alone.
    """
    B, C, K, d = chunks.shape
    flat = T.reshape(chunks, (B * C, K, d))
    roots = tree_reduce(flat, cell, stats)
    return T.reshape(roots, (B, C, d))


def inject_global_context(nodes: T.Tensor, summaries: T.Tensor,
                          w_global: LinearLayer, chunk: int) -> T.Tensor:
    """Add the projected exclusive running mean of earlier chunk summaries
    to every position of each chunk. Chunk 0 receives a zero prefix, so a
    bias-free projection leaves it untouched."""
    B, n, d = nodes.shape
    C = summaries.shape[1]
    if C * chunk != n:
        raise ShapeError(f"{C} chunks of {chunk} do not cover length {n}")
    ctx = w_global(T.cumulative_mean_shifted(summaries))
    grouped = T.reshape(nodes, (B, C, chunk, d))
    injected = T.add(grouped, T.reshape(ctx, (B, C, 1, d)))
    return T.reshape(injected, (B, n, d))
