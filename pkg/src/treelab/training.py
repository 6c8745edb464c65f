"""Optimization protocol: decoupled-weight-decay Adam, cosine annealing,
global-norm gradient clipping, early stopping on validation accuracy, and
temperature/top-k sampling.

Determinism: with a fixed seed the shuffle order, every update, and hence
every checkpoint byte are reproducible; the NaN policy is to abort rather
than skip a batch, so a run is either clean or it stops.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time

import numpy as np

from . import tensor as T
from .errors import TrainingAbort

LOSS_KINDS = ("lm-one", "lm-seq", "classify")


@dataclasses.dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    batch_size: int = 64
    epochs: int = 30
    eta_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 42
    patience: int = 0          # 0 disables early stopping
    window_plus_one: bool = False

    def validate(self):
        if not (self.lr > self.eta_min >= 0):
            raise ValueError("need lr > eta_min >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        return self


@dataclasses.dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float
    wall_seconds: float
    merges_performed: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


class AdamW:
    """Adam with decoupled weight decay: the decay shrinks the parameter
    directly and never enters the moment estimates."""

    def __init__(self, named_params, cfg: TrainConfig):
        self.named_params = list(named_params)
        self.cfg = cfg
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self, lr_t: float):
        cfg = self.cfg
        for name, p in self.named_params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise TrainingAbort(f"non-finite gradient in parameter {name}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for (name, p), m, v in zip(self.named_params, self.m, self.v):
            g = p.grad if p.grad is not None else 0.0
            if cfg.weight_decay:
                p.data *= np.float32(1.0 - lr_t * cfg.weight_decay)
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_adam)
            p.data -= np.float32(lr_t) * update.astype(np.float32)

    def zero_grads(self):
        for _, p in self.named_params:
            p.zero_grad()


def cosine_lr(t: int, total: int, cfg: TrainConfig) -> float:
    """Annealed rate: cfg.lr at t=0 down to cfg.eta_min at t=total."""
    if total <= 0:
        return cfg.lr
    frac = min(max(t / total, 0.0), 1.0)
    return cfg.eta_min + (cfg.lr - cfg.eta_min) * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_grads(params, clip_norm: float) -> float:
    """Scale all grads so the global L2 norm is at most clip_norm; returns
    the applied scale factor."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.square(p.grad.astype(np.float64)).sum())
    norm = math.sqrt(total)
    if norm <= clip_norm or norm == 0.0:
        return 1.0
    factor = clip_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad *= np.float32(factor)
    return factor


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.square(p.grad.astype(np.float64)).sum())
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# losses per task

def batch_loss(model, batch, window_plus_one=False):
    """Forward one batch, returning (loss tensor, #correct, #terms)."""
    task = model.config.task
    if task == "classify":
        tokens, mask, labels = batch
        logits = model.forward(tokens, mask)
        loss = T.softmax_cross_entropy(logits, labels)
        correct = int((logits.data.argmax(axis=-1) == labels).sum())
        return loss, correct, len(labels)
    window = np.asarray(batch, dtype=np.int64)
    V = model.config.vocab_size
    if task == "lm-one":
        logits = model.forward(window)
        targets = window[:, -1]
        flat = logits
    else:
        n = model.config.seq_len
        if window_plus_one:
            logits = model.logits_all(window[:, :n])
            targets = window[:, 1:n + 1].reshape(-1)
        else:
            logits = model.forward(window)
            targets = window[:, 1:].reshape(-1)
        flat = T.reshape(logits, (-1, V))
    loss = T.softmax_cross_entropy(flat, targets)
    correct = int((flat.data.argmax(axis=-1) == targets).sum())
    return loss, correct, len(targets)


def evaluate(model, batches, window_plus_one=False):
    """Mean loss and argmax accuracy over an iterator of batches. Never
    touches parameters or gradients."""
    total_loss = 0.0
    total_correct = 0
    total_terms = 0
    with T.no_grad():
        for batch in batches:
            loss, correct, terms = batch_loss(model, batch, window_plus_one)
            total_loss += loss.item() * terms
            total_correct += correct
            total_terms += terms
    if total_terms == 0:
        return 0.0, 0.0
    return total_loss / total_terms, total_correct / total_terms


def train_epoch(model, batches, optimizer: AdamW, cfg: TrainConfig,
                lr_t: float):
    """One pass over the given batches: forward, loss, backward, clip,
    step, zero. Returns (mean loss, wall seconds, merges performed)."""
    start = time.perf_counter()
    total_loss = 0.0
    total_terms = 0
    merges = 0
    for index, batch in enumerate(batches):
        loss, _, terms = batch_loss(model, batch, cfg.window_plus_one)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingAbort(f"non-finite loss at batch {index}")
        T.backward(loss)
        clip_grads([p for _, p in optimizer.named_params], cfg.clip_norm)
        optimizer.step(lr_t)
        optimizer.zero_grads()
        total_loss += value * terms
        total_terms += terms
        merges += model.merge_count
    wall = time.perf_counter() - start
    return total_loss / max(total_terms, 1), wall, merges


def early_stop(history, patience: int) -> bool:
    """True when the best validation accuracy is more than ``patience``
    epochs in the past."""
    if not history or patience <= 0:
        return False
    best = int(np.argmax(history))
    return (len(history) - 1 - best) > patience


# ---------------------------------------------------------------------------
# sampling

def sample_text(model, vocab, prompt: str, length: int, temperature: float = 0.8,
                top_k: int = 40, rng: np.random.Generator | None = None,
                greedy: bool = False) -> str:
    """Autoregressive continuation of the prompt.

    The context slides over the last seq_len tokens. ``greedy`` (or
    top_k=1) takes the argmax; otherwise logits are divided by the
    temperature, truncated to the top k, renormalized and sampled.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    ids = list(vocab.encode(prompt))
    seq_len = model.config.seq_len
    with T.no_grad():
        for _ in range(length):
            context = np.array([ids[-seq_len:]], dtype=np.int64)
            logits = model.next_logits(context).data[0].astype(np.float64)
            if greedy or top_k <= 1:
                ids.append(int(np.argmax(logits)))
                continue
            scaled = logits / max(temperature, 1e-6)
            k = min(top_k, len(scaled))
            keep = np.sort(np.argpartition(scaled, -k)[-k:])
            probs = np.exp(scaled[keep] - scaled[keep].max())
            probs /= probs.sum()
            ids.append(int(rng.choice(keep, p=probs)))
    return vocab.decode(ids)
