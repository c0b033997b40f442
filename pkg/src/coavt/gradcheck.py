"""Finite-difference verification: every primitive on at least two shapes,
plus the full multi-task loss on a micro model, against central differences.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .dataio import CorpusConfig, generate_corpus
from .encoders import ModelConfig
from .objectives import total_loss
from .trainer import TrainState, assemble_batch

TOLERANCE = 1e-4
EPS = 1e-5


def _rand(rng, shape, scale=1.0):
    return dc.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _weighted_sum(out, rng):
    # random fixed weights avoid cancellation hiding a wrong derivative
    w = dc.Tensor(rng.normal(size=out.shape))
    return dc.mean_pool(dc.mul(out, w), axis=None)


def primitive_cases(rng):
    """(name, case builder) pairs; each builder returns (f, leaves)."""

    def matmul_case(shape_a, shape_b):
        a, b = _rand(rng, shape_a), _rand(rng, shape_b)
        out_shape = dc.matmul(dc.Tensor(a.values), dc.Tensor(b.values)).shape
        w = dc.Tensor(rng.normal(size=out_shape))
        return (lambda: dc.mean_pool(dc.mul(dc.matmul(a, b), w), axis=None),
                {"a": a, "b": b})

    def unary_case(fn, shape, scale=1.0):
        x = _rand(rng, shape, scale)
        with dc.no_grad():
            out_shape = fn(dc.Tensor(x.values)).shape
        w = dc.Tensor(rng.normal(size=out_shape))
        return (lambda: dc.mean_pool(dc.mul(fn(x), w), axis=None), {"x": x})

    cases = []

    cases.append(("matmul", [lambda: matmul_case((3, 4), (4, 5)),
                             lambda: matmul_case((2, 3, 4), (4, 6)),
                             lambda: matmul_case((2, 2, 3, 4), (2, 2, 4, 3))]))

    def add_case(sa, sb):
        a, b = _rand(rng, sa), _rand(rng, sb)
        w = dc.Tensor(rng.normal(size=sa))
        return (lambda: dc.mean_pool(dc.mul(dc.add(a, b), w), axis=None), {"a": a, "b": b})
    cases.append(("add", [lambda: add_case((4, 5), (4, 5)),
                          lambda: add_case((3, 4, 5), (5,)),
                          lambda: add_case((2, 4, 5), (4, 5))]))

    def scale_case(shape, tensor_s):
        a = _rand(rng, shape)
        w = dc.Tensor(rng.normal(size=shape))
        if tensor_s:
            s = _rand(rng, ())
            return (lambda: dc.mean_pool(dc.mul(dc.scale(a, s), w), axis=None),
                    {"a": a, "s": s})
        return (lambda: dc.mean_pool(dc.mul(dc.scale(a, 0.731), w), axis=None), {"a": a})
    cases.append(("scale", [lambda: scale_case((3, 4), False),
                            lambda: scale_case((2, 3, 4), True)]))

    cases.append(("softmax-last-axis", [lambda: unary_case(dc.softmax_last, (3, 5)),
                                        lambda: unary_case(dc.softmax_last, (2, 3, 4))]))

    def ln_case(shape):
        x = _rand(rng, shape)
        g = dc.Tensor(rng.normal(1.0, 0.1, size=shape[-1]), requires_grad=True)
        b = _rand(rng, (shape[-1],), 0.1)
        w = dc.Tensor(rng.normal(size=shape))
        return (lambda: dc.mean_pool(dc.mul(dc.layer_norm(x, g, b), w), axis=None),
                {"x": x, "gain": g, "bias": b})
    cases.append(("layer-norm", [lambda: ln_case((2, 4)), lambda: ln_case((2, 3, 8))]))

    cases.append(("gelu", [lambda: unary_case(dc.gelu, (4, 4)),
                           lambda: unary_case(dc.gelu, (2, 3, 5), scale=2.0)]))

    def emb_case(rows, ids_shape):
        table = _rand(rng, (rows, 6))
        ids = rng.integers(0, rows, size=ids_shape)
        w = dc.Tensor(rng.normal(size=ids_shape + (6,)))
        return (lambda: dc.mean_pool(dc.mul(dc.embedding_lookup(table, ids), w), axis=None),
                {"table": table})
    cases.append(("embedding-lookup", [lambda: emb_case(7, (5,)),
                                       lambda: emb_case(5, (2, 4))]))

    def concat_case(shapes, axis):
        parts = [_rand(rng, s) for s in shapes]
        out_shape = np.concatenate([np.zeros(s) for s in shapes], axis=axis).shape
        w = dc.Tensor(rng.normal(size=out_shape))
        return (lambda: dc.mean_pool(dc.mul(dc.concat_seq(parts, axis=axis), w), axis=None),
                {f"p{i}": p for i, p in enumerate(parts)})
    cases.append(("concat-seq", [lambda: concat_case([(2, 3, 4), (2, 5, 4)], -2),
                                 lambda: concat_case([(2, 4), (3, 4)], 0)]))

    def full_mean_case(shape):
        x = _rand(rng, shape)
        return (lambda: dc.mean_pool(x, axis=None), {"x": x})
    cases.append(("mean-pool", [lambda: unary_case(lambda x: dc.mean_pool(x, axis=-2), (3, 4, 5)),
                                lambda: full_mean_case((4, 6))]))

    cases.append(("max-reduce", [lambda: unary_case(lambda x: dc.max_reduce(x, axis=-1), (4, 7)),
                                 lambda: unary_case(lambda x: dc.max_reduce(x, axis=1), (2, 5, 3))]))

    def mask_case(shape):
        x = _rand(rng, shape)
        keep = rng.random(shape) > 0.3
        keep.reshape(-1)[0] = True
        w = dc.Tensor(rng.normal(size=shape))
        return (lambda: dc.mean_pool(dc.mul(dc.softmax_last(dc.masked_fill(x, keep)), w),
                                     axis=None), {"x": x})
    cases.append(("masked-fill", [lambda: mask_case((3, 6)), lambda: mask_case((2, 4, 5))]))

    def ce_case(shape, v):
        x = _rand(rng, shape + (v,))
        t = rng.integers(0, v, size=shape)
        return (lambda: dc.mean_pool(dc.cross_entropy_from_logits(x, t), axis=None), {"logits": x})
    cases.append(("cross-entropy-from-logits", [lambda: ce_case((5,), 8),
                                                lambda: ce_case((2, 4), 6)]))

    cases.append(("sigmoid", [lambda: unary_case(dc.sigmoid, (4, 3)),
                              lambda: unary_case(dc.sigmoid, (2, 2, 5), scale=2.0)]))

    def log_case(shape):
        x = dc.Tensor(rng.random(shape) + 0.5, requires_grad=True)
        w = dc.Tensor(rng.normal(size=shape))
        return (lambda: dc.mean_pool(dc.mul(dc.log(x), w), axis=None), {"x": x})
    cases.append(("log", [lambda: log_case((4,)), lambda: log_case((3, 5))]))

    cases.append(("exp", [lambda: unary_case(dc.exp, (4, 3)),
                          lambda: unary_case(dc.exp, (6,), scale=0.5)]))

    def mul_case(shape):
        a, b = _rand(rng, shape), _rand(rng, shape)
        w = dc.Tensor(rng.normal(size=shape))
        return (lambda: dc.mean_pool(dc.mul(dc.mul(a, b), w), axis=None), {"a": a, "b": b})
    cases.append(("mul", [lambda: mul_case((3, 4)), lambda: mul_case((2, 3, 2))]))

    cases.append(("reshape", [lambda: unary_case(lambda x: dc.reshape(x, (12,)), (3, 4)),
                              lambda: unary_case(lambda x: dc.reshape(x, (2, 6, 2)), (4, 6))]))

    cases.append(("transpose", [lambda: unary_case(lambda x: dc.transpose(x, (1, 0)), (3, 4)),
                                lambda: unary_case(lambda x: dc.transpose(x, (0, 2, 1, 3)),
                                                   (2, 3, 4, 2))]))

    cases.append(("slice-seq", [lambda: unary_case(lambda x: dc.slice_seq(x, 1, 3, axis=-2), (5, 4)),
                                lambda: unary_case(lambda x: dc.slice_seq(x, 0, 2, axis=1),
                                                   (2, 5, 3))]))

    cases.append(("expand-batch", [lambda: unary_case(lambda x: dc.expand_batch(x, 3), (4, 5)),
                                   lambda: unary_case(lambda x: dc.expand_batch(x, 2), (2, 3))]))

    cases.append(("l2-normalize-last-axis",
                  [lambda: unary_case(dc.l2_normalize_last, (4, 6)),
                   lambda: unary_case(dc.l2_normalize_last, (2, 3, 5))]))

    return cases


def run_primitive_checks(eps=EPS, seed=0):
    """Worst relative error per primitive over all its shape cases."""
    rng = np.random.default_rng(seed)
    report = {}
    for name, builders in primitive_cases(rng):
        worst = 0.0
        for build in builders:
            f, leaves = build()
            errs = dc.finite_diff_gradcheck(f, leaves, eps=eps)
            worst = max(worst, max(errs.values()))
        report[name] = worst
    return report


# ---------------------------------------------------------------------------
# full-loss micro check (C=8, Nq=2, B=2, vocab 16)
# ---------------------------------------------------------------------------

def micro_configs():
    corpus_cfg = CorpusConfig(
        n_train=4, n_test=4, n_classes=2, latent_dim=4,
        noise_sigma_audio=0.3, noise_sigma_visual=0.3,
        attribute_tokens_per_item=1, attribute_bins=8, seed=11,
        audio_frames=8, audio_bins=8, frame_height=8, frame_width=8,
        frame_channels=1, n_video_frames=2, vocab_size=16, max_text_len=6)
    model_cfg = ModelConfig(
        hidden=8, heads=2, audio_layers=1, visual_layers=1, text_layers=1,
        n_queries=2, proj_dim=4, vocab_size=16, max_text_len=6, patch_edge=4,
        audio_frames=8, audio_bins=8, frame_height=8, frame_width=8,
        frame_channels=1)
    return corpus_cfg, model_cfg


def run_full_loss_check(eps=EPS, seed=0):
    """Gradcheck the total multi-task loss through every parameter tensor.

    The check runs at a generic O(0.3) parameter scale: derivative
    correctness is state-independent, and the training-time 0.02 init puts
    many attention gradients below what eps=1e-5 central differences can
    resolve to 1e-4 relative.
    """
    corpus_cfg, model_cfg = micro_configs()
    train, _ = generate_corpus(corpus_cfg)
    state = TrainState.fresh(model_cfg, seed=seed, init_std=0.3)
    batch_rng = np.random.default_rng(np.random.SeedSequence((seed, 5)))
    batch = assemble_batch(train[:2], model_cfg.patch_edge, batch_rng,
                           mask_a=0.5, mask_v=0.5)

    def f():
        loss_rng = np.random.default_rng(99)
        loss, _ = total_loss(state.model, state.heads, batch, loss_rng)
        return loss

    return dc.finite_diff_gradcheck(f, state.params(), eps=eps)


def run_suite(eps=EPS, seed=0, tolerance=TOLERANCE):
    """Primitive checks plus the full-loss check; returns a printable report."""
    prim = run_primitive_checks(eps=eps, seed=seed)
    full = run_full_loss_check(eps=eps, seed=seed)
    lines = []
    ok = True
    for name in sorted(prim):
        passed = prim[name] <= tolerance
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'}  primitive {name:<28s} "
                     f"max rel err {prim[name]:.3e}")
    worst_leaf = max(full, key=full.get)
    full_worst = full[worst_leaf]
    passed = full_worst <= tolerance
    ok &= passed
    lines.append(f"{'PASS' if passed else 'FAIL'}  full multi-task loss "
                 f"({len(full)} parameter tensors)  worst {full_worst:.3e} at {worst_leaf}")
    return {"ok": ok, "primitives": prim, "full_loss": full, "lines": lines,
            "tolerance": tolerance}
