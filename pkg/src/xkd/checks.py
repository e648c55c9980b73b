"""Canonical finite-difference verification suite.

Covers every tensor-operation kind and every loss surface (reconstruction,
cross-modal attention + refinement, kernel, MMD, alignment variants,
sharpening, distillation, weighted total) on small random instances.
``run_gradient_suite`` returns (name, max relative error) pairs; callers
decide the pass threshold (1e-4 everywhere in this project).
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import objectives as obj
from .autograd import Tensor, grad_check

THRESHOLD = 1e-4
DEFAULT_SEEDS = 20


def _weights(y):
    w = np.cos(np.arange(y.size, dtype=np.float64)).reshape(y.shape) + 0.1
    return Tensor(w)


def _reduce(y):
    return ag.tsum(ag.mul(y, _weights(y)))


def _op_cases(rng):
    pos = lambda shape: rng.uniform(0.5, 2.0, size=shape)
    anyv = lambda shape: rng.normal(size=shape)
    t = lambda a: Tensor(a, requires_grad=True)
    return [
        ("op.add", lambda a, b: _reduce(ag.add(a, b)), [t(anyv((3, 4))), t(anyv((3, 4)))]),
        ("op.sub", lambda a, b: _reduce(ag.sub(a, b)), [t(anyv((2, 3, 4))), t(anyv((3, 4)))]),
        ("op.mul", lambda a, b: _reduce(ag.mul(a, b)), [t(anyv((4, 4))), t(anyv((4, 1)))]),
        ("op.div", lambda a, b: _reduce(ag.div(a, b)), [t(anyv((3, 3))), t(pos((3, 3)))]),
        ("op.scalar-mul", lambda a: _reduce(ag.scalar_mul(a, -1.7)), [t(anyv((4, 2)))]),
        ("op.matmul", lambda a, b: _reduce(ag.matmul(a, b)), [t(anyv((3, 4))), t(anyv((4, 2)))]),
        ("op.transpose", lambda a: _reduce(ag.transpose(a, (1, 0, 2))), [t(anyv((2, 3, 2)))]),
        ("op.reshape", lambda a: _reduce(ag.reshape(a, (4, 3))), [t(anyv((2, 6)))]),
        ("op.slice", lambda a: _reduce(ag.slice_(a, (slice(1, 3), [0, 2, 2]))), [t(anyv((4, 4)))]),
        ("op.concat", lambda a, b: _reduce(ag.concat([a, b], axis=1)), [t(anyv((2, 3))), t(anyv((2, 2)))]),
        ("op.mean", lambda a: ag.mean(a), [t(anyv((3, 4, 2)))]),
        ("op.sum", lambda a: _reduce(ag.tsum(a, axis=(0, 2), keepdims=True)), [t(anyv((2, 3, 2)))]),
        ("op.square", lambda a: _reduce(ag.square(a)), [t(anyv((3, 3)))]),
        ("op.sqrt", lambda a: _reduce(ag.sqrt(a)), [t(pos((3, 3)))]),
        ("op.exp", lambda a: _reduce(ag.exp(a)), [t(anyv((3, 3)))]),
        ("op.log", lambda a: _reduce(ag.log(a)), [t(pos((3, 3)))]),
        ("op.gelu", lambda a: _reduce(ag.gelu(a)), [t(anyv((3, 3)))]),
        ("op.softmax-over-last-axis", lambda a: _reduce(ag.softmax(a)), [t(anyv((3, 5)))]),
        ("op.layer-norm-over-last-axis", lambda a: _reduce(ag.layer_norm(a)), [t(anyv((3, 6)))]),
        ("op.l2-norm", lambda a: _reduce(ag.l2_normalize(a)), [t(anyv((3, 5)))]),
    ]


def _loss_cases(rng):
    t = lambda a: Tensor(a, requires_grad=True)
    target_v = rng.normal(size=(3, 4))
    target_a = rng.normal(size=(2, 4))
    teacher = obj.sharpen(rng.normal(size=(2, 8)), 0.5).data
    kernel = obj.KernelConfig(sigma=1.0)

    def recon_case(pred):
        return obj.recon_loss(pred, target_v)

    def joint_case(pv, pa):
        return obj.joint_recon_loss(pv, target_v, pa, target_a)

    def cma_refine_case(feats, av, aa):
        weights = obj.cross_modal_attention(av, aa)
        return ag.mean(ag.square(obj.refine(feats, weights.video)))

    def cma_softmax_case(feats, av, aa):
        weights = obj.cross_modal_attention(av, aa, variant="softmax")
        return ag.mean(ag.square(obj.refine(feats, weights.video)))

    def kernel_case(x, y):
        return obj.gaussian_kernel(x, y, 0.8)

    def mmd_case(x, y):
        return obj.mmd(x, y, kernel)

    def alignment_case(fsv, fsa):
        return obj.domain_alignment_loss(fsv, fsa, fsv.data * 0.5, fsa.data * 0.5, variant="da2", cfg=kernel)

    def sharpen_case(logits):
        return ag.tsum(ag.mul(obj.sharpen(logits, 0.1), _weights(logits)))

    def kd_case(la, lv):
        return obj.kd_loss(teacher, teacher, [obj.sharpen(la, 0.5)], [obj.sharpen(lv, 0.5)])

    def total_case(pred, x, la):
        l_ae = obj.recon_loss(pred, target_v)
        l_da = obj.mmd(x, Tensor(rng.normal(size=(3, 3))), kernel)
        l_kd = obj.kd_loss(teacher, teacher, [obj.sharpen(la, 0.5)], [obj.sharpen(la, 0.5)])
        return obj.total_loss(l_ae, l_da, l_kd, obj.LossWeights())

    return [
        ("loss.recon", recon_case, [t(rng.normal(size=(3, 4)))]),
        ("loss.joint-recon", joint_case, [t(rng.normal(size=(3, 4))), t(rng.normal(size=(2, 4)))]),
        (
            "loss.cross-modal-refine",
            cma_refine_case,
            [t(rng.normal(size=(3, 4))), t(rng.uniform(0.1, 1, size=(2, 3))), t(rng.uniform(0.1, 1, size=(2, 5)))],
        ),
        (
            "loss.cross-modal-refine-softmax",
            cma_softmax_case,
            [t(rng.normal(size=(3, 4))), t(rng.uniform(0.1, 1, size=(2, 3))), t(rng.uniform(0.1, 1, size=(2, 5)))],
        ),
        ("loss.gaussian-kernel", kernel_case, [t(rng.normal(size=4)), t(rng.normal(size=4))]),
        ("loss.mmd", mmd_case, [t(rng.normal(size=(4, 3))), t(rng.normal(size=(4, 3)))]),
        ("loss.alignment-da2", alignment_case, [t(rng.normal(size=(4, 3))), t(rng.normal(size=(5, 3)))]),
        ("loss.sharpen", sharpen_case, [t(rng.normal(size=(2, 6)))]),
        ("loss.kd", kd_case, [t(rng.normal(size=(2, 8))), t(rng.normal(size=(2, 8)))]),
        ("loss.total", total_case, [t(rng.normal(size=(3, 4))), t(rng.normal(size=(3, 3))), t(rng.normal(size=(2, 8)))]),
    ]


def run_gradient_suite(seeds=DEFAULT_SEEDS, only=None, eps=1e-5):
    """Max relative finite-difference error per named case, over ``seeds``."""
    worst = {}
    for seed in range(seeds):
        rng = np.random.default_rng(31_000 + seed)
        for name, fn, inputs in _op_cases(rng) + _loss_cases(rng):
            if only and only not in name:
                continue
            err = grad_check(fn, inputs, eps=eps)
            worst[name] = max(worst.get(name, 0.0), err)
    return sorted(worst.items())
