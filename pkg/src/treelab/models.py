"""Model assembly: the three tree-based language models, the Transformer
baseline, and the bracket classifiers, plus checkpoint serialization.

Every model enumerates its parameters in a stable construction order;
checkpoints and the optimizer both depend on that ordering.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from . import tensor as T
from . import tree
from .errors import ConfigError, DataError, ShapeError
from .layers import (AttentionBlock, CausalConv, EmbeddingTable, InputEncoder,
                     LinearLayer, PositionalTable, causal_self_attention,
                     embed_positions)

VARIANTS = ("tree", "tree-scan", "tree-chunk", "transformer")
TASKS = ("lm-one", "lm-seq", "classify")

# shorthand accepted in configs and presets for the three tree variants
VARIANT_ALIASES = {"v1": "tree", "v2": "tree-scan", "v3": "tree-chunk"}

_VALID_COMBOS = {
    ("tree", "lm-one"), ("tree", "classify"),
    ("tree-scan", "lm-seq"),
    ("tree-chunk", "lm-seq"), ("tree-chunk", "classify"),
    ("transformer", "lm-one"), ("transformer", "lm-seq"),
    ("transformer", "classify"),
}


@dataclasses.dataclass
class ModelConfig:
    variant: str
    task: str
    embed_dim: int
    vocab_size: int
    seq_len: int
    chunk_size: int = 32
    n_max: int = 0
    layers: int = 2
    heads: int = 4
    ff_mult: int = 4
    v1_symmetric_conv: bool = False
    input_gate_bias: bool = False
    merge_bias: bool = True
    rms_eps: float = 1e-6
    pad_id: int = -1

    def __post_init__(self):
        self.variant = VARIANT_ALIASES.get(self.variant, self.variant)
        if self.n_max <= 0:
            self.n_max = self.seq_len

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if (self.variant, self.task) not in _VALID_COMBOS:
            raise ConfigError(f"variant {self.variant!r} does not support task {self.task!r}")
        if self.embed_dim < 1 or self.vocab_size < 1 or self.seq_len < 1:
            raise ConfigError("embed_dim, vocab_size and seq_len must be positive")
        if self.variant == "tree" and self.task == "lm-one" and self.seq_len < 2:
            raise ConfigError("one-to-one tree model needs a context of at least 2 tokens")
        if self.variant == "tree-chunk":
            if self.chunk_size < 1:
                raise ConfigError("chunk_size must be >= 1")
            if self.task == "lm-seq" and self.seq_len % self.chunk_size != 0:
                raise ConfigError(
                    f"seq_len {self.seq_len} must be a multiple of chunk_size "
                    f"{self.chunk_size}; pad or truncate the window")
        if self.variant == "transformer" and self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.task == "classify" and self.pad_id < 0:
            raise ConfigError("classification needs pad_id set")
        return self


def config_to_text(cfg: ModelConfig) -> str:
    """Canonical key-sorted ``key = value`` text form."""
    items = sorted(dataclasses.asdict(cfg).items())
    return "".join(f"{k} = {v}\n" for k, v in items)


def config_from_text(text: str) -> ModelConfig:
    fields = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    kwargs = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in fields:
            raise ConfigError(f"unknown model config key {key!r}")
        typ = fields[key]
        if typ == "bool" or typ is bool:
            kwargs[key] = value == "True"
        elif typ == "float" or typ is float:
            kwargs[key] = float(value)
        elif typ == "str" or typ is str:
            kwargs[key] = value
        else:
            kwargs[key] = int(value)
    return ModelConfig(**kwargs)


def masked_mean(nodes: T.Tensor, pad_mask: np.ndarray) -> T.Tensor:
    """Average node vectors over real (non-pad) positions, per row."""
    mask = np.asarray(pad_mask, bool)
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise DataError("masked_mean: a row contains no real tokens")
    weighted = T.mul_const(nodes, mask[:, :, None].astype(nodes.data.dtype))
    total = T.sum_axis(weighted, axis=1)
    return T.mul_const(total, (1.0 / counts)[:, None].astype(nodes.data.dtype))


class SequenceModel:
    """Base: stable parameter registry plus counter plumbing."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._components = []  # (prefix, object with .params())

    def _register(self, prefix, component):
        self._components.append((prefix, component))
        return component

    def named_params(self):
        out = []
        for prefix, comp in self._components:
            for name, p in comp.params():
                out.append((f"{prefix}.{name}", p))
        return out

    def parameters(self):
        return [p for _, p in self.named_params()]

    def zero_grads(self):
        T.zero_grads(self.parameters())

    def reset_counters(self):
        pass

    @property
    def merge_count(self) -> int:
        return 0

    @property
    def attention_score_count(self) -> int:
        return 0


class _Bare:
    """Adapter exposing a single tensor through the .params() protocol."""

    def __init__(self, name, tensor):
        self._name = name
        self._tensor = tensor

    def params(self):
        yield self._name, self._tensor


class _TreeModelBase(SequenceModel):
    def __init__(self, config, rng):
        super().__init__(config)
        d = config.embed_dim
        conv_mode = "symmetric" if (config.v1_symmetric_conv
                                    and config.variant == "tree") else "causal"
        self.encoder = self._register("encoder", InputEncoder(
            config.vocab_size, d, config.n_max, rng, conv_mode=conv_mode,
            gate_bias=config.input_gate_bias))
        self.cell = self._register("cell", tree.MergeCell(
            d, rng, bias=config.merge_bias, eps=config.rms_eps))

    def reset_counters(self):
        self.cell.stats.reset()

    @property
    def merge_count(self):
        return self.cell.stats.merges_performed


class TreeRootLM(_TreeModelBase):
    """One prediction per window: tree root over the past plus the most
    recent node, concatenated and projected to the vocabulary."""

    def __init__(self, config, rng):
        super().__init__(config, rng)
        self.predict = self._register("predict", LinearLayer(
            2 * config.embed_dim, config.vocab_size, rng))

    def next_logits(self, tokens: np.ndarray) -> T.Tensor:
        """Logits for the token following the given context."""
        tokens = np.asarray(tokens, dtype=np.int64)
        n = tokens.shape[1]
        if n < 2:
            raise ConfigError(f"context must hold at least 2 tokens, got {n}")
        self.reset_counters()
        nodes = self.encoder(tokens)
        past = T.slice_time(nodes, 0, n - 1)
        root = tree.tree_reduce(past, self.cell)
        last = T.slice_time(nodes, n - 1, n)
        context = T.reshape(T.concat_last(root, last), (tokens.shape[0], -1))
        return self.predict(context)

    def forward(self, window: np.ndarray) -> T.Tensor:
        """Window is [B, n+1]: the first n tokens are the context, the last
        column is the target and never enters the computation."""
        window = np.asarray(window, dtype=np.int64)
        return self.next_logits(window[:, :-1])


class TreeScanLM(_TreeModelBase):
    """Dense predictions from the causal doubling scan."""

    def __init__(self, config, rng):
        super().__init__(config, rng)
        self.predict = self._register("predict", LinearLayer(
            config.embed_dim, config.vocab_size, rng))

    def logits_all(self, tokens: np.ndarray) -> T.Tensor:
        self.reset_counters()
        curr = tree.causal_scan(self.encoder(np.asarray(tokens, np.int64)), self.cell)
        return self.predict(curr)

    def forward(self, tokens: np.ndarray) -> T.Tensor:
        """[B, n] -> [B, n-1, V]; position t predicts token t+1."""
        n = np.asarray(tokens).shape[1]
        return T.slice_time(self.logits_all(tokens), 0, n - 1)

    def next_logits(self, tokens: np.ndarray) -> T.Tensor:
        n = np.asarray(tokens).shape[1]
        out = T.slice_time(self.logits_all(tokens), n - 1, n)
        return T.reshape(out, (out.shape[0], -1))


class TreeChunkLM(_TreeModelBase):
    """Dense predictions from chunk roots plus exclusive-mean context."""

    def __init__(self, config, rng):
        super().__init__(config, rng)
        d = config.embed_dim
        self.global_proj = self._register("global_proj", LinearLayer(d, d, rng))
        self.predict = self._register("predict", LinearLayer(d, config.vocab_size, rng))

    def _contextualize(self, tokens: np.ndarray) -> T.Tensor:
        self.reset_counters()
        nodes = self.encoder(tokens)
        chunks = tree.chunk_partition(nodes, self.config.chunk_size)
        summaries = tree.chunk_summaries(chunks, self.cell)
        return tree.inject_global_context(nodes, summaries, self.global_proj,
                                          self.config.chunk_size)

    def logits_all(self, tokens: np.ndarray) -> T.Tensor:
        return self.predict(self._contextualize(np.asarray(tokens, np.int64)))

    def forward(self, tokens: np.ndarray) -> T.Tensor:
        n = np.asarray(tokens).shape[1]
        return T.slice_time(self.logits_all(tokens), 0, n - 1)

    def next_logits(self, tokens: np.ndarray) -> T.Tensor:
        """Context of any length: right-pad to a chunk multiple (future pads
        cannot reach earlier logits), then read the true final position."""
        tokens = np.asarray(tokens, dtype=np.int64)
        K = self.config.chunk_size
        n = tokens.shape[1]
        padded_n = ((n + K - 1) // K) * K
        if padded_n != n:
            pad = np.zeros((tokens.shape[0], padded_n - n), np.int64)
            tokens = np.concatenate([tokens, pad], axis=1)
        out = T.slice_time(self.logits_all(tokens), n - 1, n)
        return T.reshape(out, (out.shape[0], -1))


class TransformerLM(SequenceModel):
    def __init__(self, config, rng):
        super().__init__(config)
        d = config.embed_dim
        self.embed = self._register("embed", EmbeddingTable(config.vocab_size, d, rng))
        self.pos = self._register("pos", PositionalTable(config.n_max, d, rng))
        self.blocks = [
            self._register(f"block{i}", AttentionBlock(d, config.heads, rng,
                                                       ff_mult=config.ff_mult))
            for i in range(config.layers)
        ]
        self.predict = self._register("predict", LinearLayer(d, config.vocab_size, rng))

    def reset_counters(self):
        for b in self.blocks:
            b.score_count = 0

    @property
    def attention_score_count(self):
        return sum(b.score_count for b in self.blocks)

    def _encode(self, tokens: np.ndarray) -> T.Tensor:
        self.reset_counters()
        x = embed_positions(tokens, self.embed, self.pos)
        for b in self.blocks:
            x = causal_self_attention(x, b, causal=True)
        return x

    def logits_all(self, tokens: np.ndarray) -> T.Tensor:
        return self.predict(self._encode(np.asarray(tokens, np.int64)))

    def next_logits(self, tokens: np.ndarray) -> T.Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        n = tokens.shape[1]
        out = T.slice_time(self.logits_all(tokens), n - 1, n)
        return T.reshape(out, (out.shape[0], -1))

    def forward(self, tokens: np.ndarray) -> T.Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if self.config.task == "lm-one":
            return self.next_logits(tokens[:, :-1])
        n = tokens.shape[1]
        return T.slice_time(self.logits_all(tokens), 0, n - 1)


def _grouped_tree_roots(nodes: T.Tensor, lengths: np.ndarray,
                        cell: tree.MergeCell) -> T.Tensor:
    """Tree root per row over its real-length prefix only.

    Rows with equal lengths are reduced together; the padded tail never
    enters the tree, which is what keeps classification pad-invariant.
    """
    B, _, d = nodes.shape
    order = []
    roots = []
    for L in np.unique(lengths):
        idx = np.nonzero(lengths == L)[0]
        group = T.slice_time(T.take_batch(nodes, idx), 0, int(L))
        roots.append(tree.tree_reduce(group, cell))
        order.extend(idx.tolist())
    stacked = roots[0]
    for part in roots[1:]:
        stacked = T.concat_batch(stacked, part)
    inverse = np.argsort(np.asarray(order))
    return T.take_batch(stacked, inverse)


class TreeClassifier(_TreeModelBase):
    """Pooled mean over real tokens concatenated with the full-tree root."""

    def __init__(self, config, rng):
        super().__init__(config, rng)
        self.head = self._register("head", LinearLayer(2 * config.embed_dim, 2, rng))

    def forward(self, tokens: np.ndarray, pad_mask: np.ndarray) -> T.Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        mask = np.asarray(pad_mask, bool)
        lengths = mask.sum(axis=1)
        if (lengths == 0).any():
            raise DataError("classification row contains only padding")
        self.reset_counters()
        nodes = self.encoder(tokens)
        pooled = masked_mean(nodes, mask)
        roots = _grouped_tree_roots(nodes, lengths, self.cell)
        root = T.reshape(roots, (tokens.shape[0], -1))
        return self.head(T.concat_last(pooled, root))


class ChunkClassifier(_TreeModelBase):
    """Chunk pipeline with mean pooling over real positions."""

    def __init__(self, config, rng):
        super().__init__(config, rng)
        d = config.embed_dim
        self.global_proj = self._register("global_proj", LinearLayer(d, d, rng))
        self.head = self._register("head", LinearLayer(d, 2, rng))

    def forward(self, tokens: np.ndarray, pad_mask: np.ndarray) -> T.Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        mask = np.asarray(pad_mask, bool)
        if (mask.sum(axis=1) == 0).any():
            raise DataError("classification row contains only padding")
        K = self.config.chunk_size
        B, n = tokens.shape
        padded_n = ((n + K - 1) // K) * K
        if padded_n != n:
            fill = np.full((B, padded_n - n), self.config.pad_id, np.int64)
            tokens = np.concatenate([tokens, fill], axis=1)
            mask = np.concatenate([mask, np.zeros((B, padded_n - n), bool)], axis=1)
        self.reset_counters()
        nodes = self.encoder(tokens)
        chunks = tree.chunk_partition(nodes, K)
        summaries = tree.chunk_summaries(chunks, self.cell)
        ctx = tree.inject_global_context(nodes, summaries, self.global_proj, K)
        return self.head(masked_mean(ctx, mask))


class TransformerClassifier(SequenceModel):
    """Bidirectional encoder with key-padding mask and mean pooling."""

    def __init__(self, config, rng):
        super().__init__(config)
        d = config.embed_dim
        self.embed = self._register("embed", EmbeddingTable(config.vocab_size, d, rng))
        self.pos = self._register("pos", PositionalTable(config.n_max, d, rng))
        self.blocks = [
            self._register(f"block{i}", AttentionBlock(d, config.heads, rng,
                                                       ff_mult=config.ff_mult))
            for i in range(config.layers)
        ]
        self.head = self._register("head", LinearLayer(d, 2, rng))

    def reset_counters(self):
        for b in self.blocks:
            b.score_count = 0

    @property
    def attention_score_count(self):
        return sum(b.score_count for b in self.blocks)

    def forward(self, tokens: np.ndarray, pad_mask: np.ndarray) -> T.Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        mask = np.asarray(pad_mask, bool)
        if (mask.sum(axis=1) == 0).any():
            raise DataError("classification row contains only padding")
        self.reset_counters()
        x = embed_positions(tokens, self.embed, self.pos)
        for b in self.blocks:
            x = causal_self_attention(x, b, causal=False, key_pad_mask=mask)
        return self.head(masked_mean(x, mask))


_MODEL_CLASSES = {
    ("tree", "lm-one"): TreeRootLM,
    ("tree-scan", "lm-seq"): TreeScanLM,
    ("tree-chunk", "lm-seq"): TreeChunkLM,
    ("transformer", "lm-one"): TransformerLM,
    ("transformer", "lm-seq"): TransformerLM,
    ("tree", "classify"): TreeClassifier,
    ("tree-chunk", "classify"): ChunkClassifier,
    ("transformer", "classify"): TransformerClassifier,
}


def build_model(config: ModelConfig, seed: int) -> SequenceModel:
    config.validate()
    rng = np.random.default_rng(seed)
    return _MODEL_CLASSES[(config.variant, config.task)](config, rng)


def param_count(model: SequenceModel) -> int:
    return sum(p.size for _, p in model.named_params())


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"TLCKPT01"


def save_checkpoint(path, model: SequenceModel):
    """Container: magic, header length, JSON header (format version, config
    text, manifest of name/shape/offset), then raw little-endian FP32
    payloads in manifest order."""
    named = model.named_params()
    manifest = []
    offset = 0
    blobs = []
    for name, p in named:
        blob = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps({
        "format_version": 1,
        "config": config_to_text(model.config),
        "manifest": manifest,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_checkpoint(path):
    """Returns (ModelConfig, {name: float32 array})."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("format_version") != 1:
            raise DataError(f"unsupported checkpoint version {header.get('format_version')}")
        payload = f.read()
    params = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        params[entry["name"]] = arr.reshape(shape).astype(np.float32)
    return config_from_text(header["config"]), params


def load_checkpoint(path, model: SequenceModel | None = None) -> SequenceModel:
    """Rebuild (or refill) a model from a checkpoint, bitwise exact."""
    config, params = read_checkpoint(path)
    if model is None:
        model = build_model(config, seed=0)
    for name, p in model.named_params():
        if name not in params:
            raise DataError(f"checkpoint missing parameter {name}")
        if params[name].shape != p.data.shape:
            raise ShapeError(
                f"checkpoint parameter {name} has shape {params[name].shape}, "
                f"model expects {p.data.shape}")
        p.data = params[name].copy()
    return model
