"""Command implementations behind the CLI: training runs, generation,
evaluation, the gradient-check harness, and the scaling benchmark.

Every training run leaves behind exactly four files in its run directory:
``config.ini`` (snapshot), ``metrics.jsonl`` (one record per epoch),
``best.ckpt`` and ``final.ckpt``. That set is sufficient to resume
evaluation or generation with no other state.
"""

from __future__ import annotations

import os
import sys

import numpy as np

from . import data as D
from . import models as M
from . import training as tr
from .config import RunConfig, format_config
from .errors import ConfigError, DataError

CONFIG_SNAPSHOT = "config.ini"
METRICS_LOG = "metrics.jsonl"
BEST_CHECKPOINT = "best.ckpt"
FINAL_CHECKPOINT = "final.ckpt"


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(seed * 100_003 + epoch)


def _prepare_run_dir(cfg: RunConfig) -> str:
    if not cfg.run_dir:
        raise ConfigError("run_dir must be set for training commands")
    os.makedirs(cfg.run_dir, exist_ok=True)
    with open(os.path.join(cfg.run_dir, CONFIG_SNAPSHOT), "w", encoding="utf-8") as f:
        f.write(format_config(cfg))
    return cfg.run_dir


def _train(cfg: RunConfig, model, make_train_batches, make_eval_batches,
           log=print):
    tcfg = cfg.train
    run_dir = _prepare_run_dir(cfg)
    optimizer = tr.AdamW(model.named_params(), tcfg)
    metrics_path = os.path.join(run_dir, METRICS_LOG)
    history = []
    best_accuracy = -1.0
    with open(metrics_path, "w", encoding="utf-8") as metrics:
        for epoch in range(tcfg.epochs):
            lr_t = tr.cosine_lr(epoch, tcfg.epochs, tcfg)
            train_loss, wall, merges = tr.train_epoch(
                model, make_train_batches(_epoch_rng(tcfg.seed, epoch)),
                optimizer, tcfg, lr_t)
            val_loss, val_accuracy = tr.evaluate(
                model, make_eval_batches(), tcfg.window_plus_one)
            record = tr.MetricsRecord(
                epoch=epoch + 1,
                train_loss=float(train_loss),
                val_loss=float(val_loss),
                val_accuracy=float(val_accuracy),
                lr=float(lr_t),
                wall_seconds=0.0 if cfg.deterministic else float(wall),
                merges_performed=int(merges),
            )
            metrics.write(record.to_json() + "\n")
            metrics.flush()
            log(f"epoch {record.epoch:3d}  train {record.train_loss:.4f}  "
                f"val {record.val_loss:.4f}  acc {record.val_accuracy:.4f}  "
                f"lr {record.lr:.2e}")
            history.append(val_accuracy)
            if val_accuracy > best_accuracy:
                best_accuracy = val_accuracy
                M.save_checkpoint(os.path.join(run_dir, BEST_CHECKPOINT), model)
            if tr.early_stop(history, tcfg.patience):
                log(f"early stop: best accuracy {best_accuracy:.4f} was "
                    f"{len(history) - 1 - int(np.argmax(history))} epochs ago")
                break
    M.save_checkpoint(os.path.join(run_dir, FINAL_CHECKPOINT), model)
    return run_dir


def run_train_lm(cfg: RunConfig, log=print) -> str:
    cfg.command = "train-lm"
    cfg.validate()
    if cfg.model.task not in ("lm-one", "lm-seq"):
        raise ConfigError("train-lm needs an lm-one or lm-seq model config")
    corpus = D.load_corpus(cfg.data.corpus)
    if len(corpus.vocab) != cfg.model.vocab_size:
        raise ConfigError(
            f"corpus vocabulary has {len(corpus.vocab)} symbols but the model "
            f"expects {cfg.model.vocab_size}; set vocab_size = {len(corpus.vocab)}")
    n = cfg.model.seq_len
    extra = 1 if (cfg.model.task == "lm-one" or cfg.train.window_plus_one) else 0
    train_offsets, test_offsets = D.lm_splits(
        corpus, n, window_extra=extra,
        train_windows=cfg.data.train_windows, test_windows=cfg.data.test_windows)
    model = M.build_model(cfg.model, seed=cfg.seed)
    window = n + extra

    def train_batches(rng):
        return D.window_batches(corpus.ids, train_offsets, window,
                                cfg.train.batch_size, rng)

    def eval_batches():
        return D.window_batches(corpus.ids, test_offsets, window,
                                cfg.train.batch_size)

    return _train(cfg, model, train_batches, eval_batches, log)


def run_train_brackets(cfg: RunConfig, log=print) -> str:
    cfg.command = "train-brackets"
    cfg.validate()
    if cfg.model.task != "classify":
        raise ConfigError("train-brackets needs a classify model config")
    vocab = D.bracket_vocab()
    train_set, val_set = D.make_bracket_dataset(
        seed=cfg.seed, n_total=cfg.data.bracket_total,
        length_min=cfg.data.bracket_min_len, length_max=cfg.data.bracket_max_len)
    model = M.build_model(cfg.model, seed=cfg.seed)

    def train_batches(rng):
        return D.bracket_batches(train_set, vocab, cfg.train.batch_size, rng)

    def eval_batches():
        return D.bracket_batches(val_set, vocab, cfg.train.batch_size)

    return _train(cfg, model, train_batches, eval_batches, log)


def _resolve_checkpoint(cfg: RunConfig) -> str:
    if cfg.checkpoint:
        path = cfg.checkpoint
    elif cfg.run_dir:
        best = os.path.join(cfg.run_dir, BEST_CHECKPOINT)
        final = os.path.join(cfg.run_dir, FINAL_CHECKPOINT)
        path = best if os.path.exists(best) else final
    else:
        raise ConfigError("set checkpoint or run_dir to locate a model")
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return path


def run_generate(cfg: RunConfig, log=print) -> str:
    cfg.command = "generate"
    path = _resolve_checkpoint(cfg)
    model = M.load_checkpoint(path)
    if model.config.task == "classify":
        raise ConfigError("cannot generate text from a classifier checkpoint")
    corpus = D.load_corpus(cfg.data.corpus)
    if len(corpus.vocab) != model.config.vocab_size:
        raise DataError(
            f"corpus vocabulary ({len(corpus.vocab)}) does not match the "
            f"checkpoint vocabulary ({model.config.vocab_size})")
    rng = np.random.default_rng(cfg.seed)
    text = tr.sample_text(model, corpus.vocab, cfg.sample.prompt,
                          cfg.sample.length, temperature=cfg.sample.temperature,
                          top_k=cfg.sample.top_k, rng=rng,
                          greedy=cfg.sample.greedy)
    log(text)
    return text


def run_eval(cfg: RunConfig, log=print):
    cfg.command = "eval"
    path = _resolve_checkpoint(cfg)
    model = M.load_checkpoint(path)
    task = model.config.task
    if task == "classify":
        _, val_set = D.make_bracket_dataset(
            seed=cfg.seed, n_total=cfg.data.bracket_total,
            length_min=cfg.data.bracket_min_len,
            length_max=cfg.data.bracket_max_len)
        batches = D.bracket_batches(val_set, D.bracket_vocab(),
                                    cfg.train.batch_size)
    else:
        corpus = D.load_corpus(cfg.data.corpus)
        if len(corpus.vocab) != model.config.vocab_size:
            raise DataError("corpus vocabulary does not match the checkpoint")
        n = model.config.seq_len
        extra = 1 if (task == "lm-one" or cfg.train.window_plus_one) else 0
        _, test_offsets = D.lm_splits(corpus, n, window_extra=extra,
                                      test_windows=cfg.data.test_windows)
        batches = D.window_batches(corpus.ids, test_offsets, n + extra,
                                   cfg.train.batch_size)
    loss, accuracy = tr.evaluate(model, batches, cfg.train.window_plus_one)
    log(f"loss {loss:.4f}  accuracy {accuracy:.4f}  ({path})")
    return loss, accuracy


def run_gradcheck(log=print) -> int:
    from .gradcheck import run_full_suite

    rows = run_full_suite()
    failures = 0
    for name, err, tol, passed in rows:
        log(f"{'PASS' if passed else 'FAIL'}  {name:36s} "
            f"max rel err {err:.3e}  (tol {tol:g})")
        failures += 0 if passed else 1
    log(f"{len(rows) - failures}/{len(rows)} gradient checks passed")
    return 0 if failures == 0 else 2


def run_benchmark(cfg: RunConfig | None, out_path: str, sizes=None,
                  log=print) -> str:
    from . import bench

    rows = bench.run_benchmark(sizes=sizes, log=log)
    bench.write_report(out_path, rows)
    log(f"wrote {out_path}")
    return out_path
