"""Forward-only scaling benchmark.

Times the full tree reduction, the chunk pipeline, and the attention
baseline at doubling sequence lengths with a fixed feature width, and
records the exact operation counters next to the wall times. The counters
are the load-bearing measurement; wall times are reported with
min/median/max over warm repetitions because desktop timing is noisy.
"""

from __future__ import annotations

import dataclasses
import json
import time
import tracemalloc

import numpy as np

from . import tensor as T
from . import tree
from .layers import AttentionBlock, LinearLayer, causal_self_attention

DEFAULT_SIZES = (128, 256, 512, 1024, 2048)
DEFAULT_DIM = 48
DEFAULT_BATCH = 8
DEFAULT_REPS = 5
CHUNK = 32


@dataclasses.dataclass
class BenchRow:
    model: str
    n: int
    reps: int
    time_min: float
    time_median: float
    time_max: float
    ops: int          # pair merges, or attention scores
    peak_bytes: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def _time_forward(forward, reps: int):
    forward()  # warm up allocator and caches
    times = []
    tracemalloc.start()
    tracemalloc.reset_peak()
    forward()
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    for _ in range(reps):
        start = time.perf_counter()
        forward()
        times.append(time.perf_counter() - start)
    times.sort()
    return times, peak


def _bench_tree(n, dim, batch, reps, rng):
    nodes = T.Tensor(rng.uniform(-1, 1, (batch, n, dim)).astype(np.float32))
    cell = tree.MergeCell(dim, np.random.default_rng(0))

    def forward():
        cell.stats.reset()
        with T.no_grad():
            tree.tree_reduce(nodes, cell)

    times, peak = _time_forward(forward, reps)
    return times, peak, cell.stats.merges_performed


def _bench_chunk(n, dim, batch, reps, rng):
    nodes = T.Tensor(rng.uniform(-1, 1, (batch, n, dim)).astype(np.float32))
    cell = tree.MergeCell(dim, np.random.default_rng(0))
    w_global = LinearLayer(dim, dim, np.random.default_rng(1))

    def forward():
        cell.stats.reset()
        with T.no_grad():
            chunks = tree.chunk_partition(nodes, CHUNK)
            summaries = tree.chunk_summaries(chunks, cell)
            tree.inject_global_context(nodes, summaries, w_global, CHUNK)

    times, peak = _time_forward(forward, reps)
    return times, peak, cell.stats.merges_performed


def _bench_attention(n, dim, batch, reps, rng):
    x = T.Tensor(rng.uniform(-1, 1, (batch, n, dim)).astype(np.float32))
    blocks = [AttentionBlock(dim, 4, np.random.default_rng(i)) for i in range(2)]

    def forward():
        for b in blocks:
            b.score_count = 0
        with T.no_grad():
            h = x
            for b in blocks:
                h = causal_self_attention(h, b, causal=True)

    times, peak = _time_forward(forward, reps)
    return times, peak, sum(b.score_count for b in blocks)


_RUNNERS = {
    "tree": _bench_tree,
    "tree-chunk": _bench_chunk,
    "attention": _bench_attention,
}


def run_benchmark(sizes=None, dim=DEFAULT_DIM, batch=DEFAULT_BATCH,
                  reps=DEFAULT_REPS, log=None):
    sizes = tuple(sizes) if sizes else DEFAULT_SIZES
    rng = np.random.default_rng(123)
    rows = []
    for name, runner in _RUNNERS.items():
        for n in sizes:
            times, peak, ops = runner(n, dim, batch, reps, rng)
            row = BenchRow(model=name, n=n, reps=reps,
                           time_min=times[0], time_median=times[len(times) // 2],
                           time_max=times[-1], ops=ops, peak_bytes=peak)
            rows.append(row)
            if log:
                log(f"{name:12s} n={n:5d}  median {row.time_median * 1e3:9.2f} ms  "
                    f"ops {row.ops:12d}  peak {row.peak_bytes / 1e6:8.1f} MB")
    return rows


def write_report(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(row.to_json() + "\n")


def read_report(path):
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            rows.append(BenchRow(**json.loads(line)))
    return rows
