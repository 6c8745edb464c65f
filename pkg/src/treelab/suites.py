"""The named gradient-check battery: every differentiable primitive at
tolerance 1e-3 and every full model at 1e-2 on tiny shapes (B=2, n=16,
K=4). Shared between the CLI command and the test suite."""

from __future__ import annotations

import numpy as np

from . import layers as L
from . import models as M
from . import tensor as T
from . import tree
from .gradcheck import max_relative_error

PRIMITIVE_TOL = 1e-3
MODEL_TOL = 1e-2

PRIMITIVE_H = 1e-3
# Deep compositions route through 1/sqrt(mean(x^2) + eps) and ReLU, whose
# curvature (or kink) makes an h=1e-3 secant miss the true slope by more
# than the tolerance under test; the float64 evaluation keeps h=1e-5 far
# above roundoff, so the smaller step measures the gradient, not the
# estimator's own truncation.
COMPOSED_H = 1e-5


def _t(rng, *shape, grad=True):
    return T.Tensor(rng.uniform(-1, 1, shape).astype(np.float32), requires_grad=grad)


def _primitive_checks():
    rng = np.random.default_rng(1234)
    checks = []

    a, b = _t(rng, 3, 4), _t(rng, 4, 2)
    checks.append(("matmul", [a, b], lambda: T.sum_all(T.matmul(a, b))))

    x, y = _t(rng, 2, 5), _t(rng, 2, 5)
    checks.append(("add", [x, y], lambda: T.sum_all(T.add(x, y))))
    checks.append(("sub", [x, y], lambda: T.sum_all(T.sub(x, y))))
    checks.append(("mul", [x, y], lambda: T.sum_all(T.mul(x, y))))
    checks.append(("scale", [x], lambda: T.sum_all(T.scale(x, 1.7))))
    checks.append(("sigmoid", [x], lambda: T.sum_all(T.sigmoid(x))))
    checks.append(("relu", [x], lambda: T.sum_all(T.mul(T.relu(x), y))))

    checks.append(("concat_last", [x, y],
                   lambda: T.sum_all(T.mul(T.concat_last(x, y),
                                           T.concat_last(y, x)))))

    h = _t(rng, 2, 5, 3)

    def stride_loss():
        left, right, carry = T.stride_split(h)
        out = T.sum_all(T.mul(left, right))
        return T.add(out, T.sum_all(carry)) if carry is not None else out
    checks.append(("stride_split", [h], stride_loss))

    xr, gain = _t(rng, 2, 8), _t(rng, 8)
    checks.append(("rmsnorm", [xr, gain],
                   lambda: T.sum_all(T.mul(T.rmsnorm(xr, gain, 1e-6), xr))))

    gain2, bias2 = _t(rng, 8), _t(rng, 8)
    checks.append(("layer_norm", [xr, gain2, bias2],
                   lambda: T.sum_all(T.mul(T.layer_norm(xr, gain2, bias2), xr))))

    sm = _t(rng, 3, 6)
    checks.append(("softmax", [sm],
                   lambda: T.sum_all(T.mul(T.softmax_last(sm), sm))))

    cm = _t(rng, 2, 5, 3)
    checks.append(("cumulative_mean_shifted", [cm],
                   lambda: T.sum_all(T.mul(T.cumulative_mean_shifted(cm), cm))))

    logits = _t(rng, 3, 5)
    checks.append(("softmax_cross_entropy", [logits],
                   lambda: T.softmax_cross_entropy(logits, [0, 2, 4])))

    table = _t(rng, 6, 4)
    ids = rng.integers(0, 6, (2, 3))
    checks.append(("embedding_lookup", [table],
                   lambda: T.sum_all(T.mul(T.embedding_lookup(table, ids),
                                           T.embedding_lookup(table, ids)))))

    conv = L.CausalConv(3, np.random.default_rng(2))
    e = _t(rng, 1, 5, 3)
    checks.append(("causal_conv", [e, conv.kernel, conv.bias],
                   lambda: T.sum_all(T.mul(L.causal_conv(e, conv), e))))

    gate = L.LinearLayer(4, 4, np.random.default_rng(3), bias=False)
    c = _t(rng, 1, 3, 4)
    checks.append(("input_gate", [c, gate.weight],
                   lambda: T.sum_all(L.input_gate(c, gate))))

    block = L.AttentionBlock(4, 2, np.random.default_rng(4))
    ax = _t(rng, 1, 3, 4)
    checks.append(("attention_block", [ax] + [p for _, p in block.params()],
                   lambda: T.sum_all(T.mul(L.causal_self_attention(ax, block), ax)),
                   COMPOSED_H))

    cell = tree.MergeCell(4, np.random.default_rng(5))
    ml, mr = _t(rng, 1, 2, 4), _t(rng, 1, 2, 4)
    checks.append(("glu_merge", [ml, mr] + [p for _, p in cell.params()],
                   lambda: T.sum_all(tree.glu_merge(ml, mr, cell))))

    th = _t(rng, 1, 6, 4)
    checks.append(("tree_reduce", [th] + [p for _, p in cell.params()],
                   lambda: T.sum_all(tree.tree_reduce(th, cell)), COMPOSED_H))

    sh = _t(rng, 1, 5, 4)
    checks.append(("causal_scan", [sh] + [p for _, p in cell.params()],
                   lambda: T.sum_all(tree.causal_scan(sh, cell)), COMPOSED_H))

    wg = L.LinearLayer(4, 4, np.random.default_rng(6))
    ch = _t(rng, 1, 8, 4)

    def chunk_loss():
        chunks = tree.chunk_partition(ch, 4)
        summaries = tree.chunk_summaries(chunks, cell)
        return T.sum_all(tree.inject_global_context(ch, summaries, wg, 4))
    checks.append(("chunk_pipeline",
                   [ch, wg.weight, wg.bias] + [p for _, p in cell.params()],
                   chunk_loss, COMPOSED_H))

    rows = []
    for entry in checks:
        name, params, fn = entry[0], entry[1], entry[2]
        step = entry[3] if len(entry) > 3 else PRIMITIVE_H
        rows.append((name, PRIMITIVE_TOL, step, params, fn))
    return rows


def _model_checks():
    rng = np.random.default_rng(77)
    checks = []
    B, n, K, d, vocab = 2, 16, 4, 8, 11

    def lm_cfg(variant, task):
        return M.ModelConfig(variant=variant, task=task, embed_dim=d,
                             vocab_size=vocab, seq_len=n, chunk_size=K, heads=2)

    window = rng.integers(0, vocab, (B, n + 1))
    tokens = rng.integers(0, vocab, (B, n))

    def lm_check(name, variant, task, batch):
        model = M.build_model(lm_cfg(variant, task), seed=8)
        from .training import batch_loss

        def loss():
            return batch_loss(model, batch)[0]
        checks.append((name, model.parameters(), loss))

    lm_check("model_tree_one_to_one", "tree", "lm-one", window)
    lm_check("model_tree_scan", "tree-scan", "lm-seq", tokens)
    lm_check("model_tree_chunk", "tree-chunk", "lm-seq", tokens)
    lm_check("model_transformer", "transformer", "lm-seq", tokens)

    cls_tokens = np.full((B, n), 6, np.int64)
    mask = np.zeros((B, n), bool)
    for i, real in enumerate((n, n - 3)):
        cls_tokens[i, :real] = rng.integers(0, 6, real)
        mask[i, :real] = True
    labels = np.array([0, 1])

    def cls_check(name, variant):
        cfg = M.ModelConfig(variant=variant, task="classify", embed_dim=d,
                            vocab_size=7, seq_len=n, n_max=n, chunk_size=K,
                            heads=2, pad_id=6)
        model = M.build_model(cfg, seed=9)

        def loss():
            return T.softmax_cross_entropy(model.forward(cls_tokens, mask), labels)
        checks.append((name, model.parameters(), loss))

    cls_check("model_tree_classifier", "tree")
    cls_check("model_chunk_classifier", "tree-chunk")
    cls_check("model_transformer_classifier", "transformer")

    return [(name, MODEL_TOL, COMPOSED_H, params, fn) for name, params, fn in checks]


def suite_checks():
    return _primitive_checks() + _model_checks()


def gradient_suite():
    """Run every check; returns (name, max_rel_err, tol, passed) rows."""
    rows = []
    for name, tol, h, params, loss_fn in suite_checks():
        err = max_relative_error(loss_fn, params, h=h)
        rows.append((name, err, tol, err < tol))
    return rows
