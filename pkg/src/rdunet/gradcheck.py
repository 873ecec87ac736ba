"""Finite-difference suite covering every primitive, the layers and a full block."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dense_block import DenseBlockConfig, dense_block_forward, init_dense_block
from .engine import GradCheckReport, Tensor, add, concat_channels, grad_check, mul, weighted_sum
from .layers import (ConvParams, UnpoolParams, batch_norm, conv2d, init_bn, init_conv, init_prelu, init_unit,
                     pre_activation_unit, prelu, unpool, upsample2x)
from .training import nll_loss, softmax_probs


@dataclass
class Case:
    name: str
    report: GradCheckReport


def _named(prefix, pairs):
    out = []
    for name, t in pairs:
        t.name = f"{prefix}/{name}"
        out.append(t)
    return out


def _randomize_bn(bn, rng):
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, bn.channels)
    bn.beta.data[:] = rng.uniform(-0.5, 0.5, bn.channels)


def _cases(rng: np.random.Generator):
    """Yield (name, function, points, params, max_per_tensor)."""
    x = Tensor(rng.uniform(-1, 1, (2, 3, 8, 8)), name="x")
    y = Tensor(rng.uniform(-1, 1, (2, 3, 8, 8)), name="y")

    def probe(shape):
        w = rng.standard_normal(shape)
        return lambda t: weighted_sum(t, w)

    p = probe((2, 3, 8, 8))
    yield "add", lambda a, b: p(add(a, b)), [x, y], [], None
    yield "mul", lambda a, b: p(mul(a, b)), [x, y], [], None
    pc = probe((2, 6, 8, 8))
    yield "concat", lambda a, b: pc(concat_channels(a, b)), [x, y], [], None

    for k, stride, padding in ((1, 1, "same"), (2, 1, "same"), (3, 1, "same"), (2, 2, "valid")):
        conv = ConvParams(Tensor(rng.uniform(-0.5, 0.5, (4, 3, k, k))), Tensor(rng.uniform(-0.5, 0.5, 4)),
                          stride, padding)
        ho = 8 // stride
        pk = probe((2, 4, ho, ho))
        yield (f"conv{k}x{k}_s{stride}", (lambda conv, pk: lambda a: pk(conv2d(a, conv)))(conv, pk), [x],
               _named("conv", conv.parameters("")), None)

    bn = init_bn(3)
    _randomize_bn(bn, rng)
    yield "batch_norm_train", lambda a: p(batch_norm(a, bn)), [x], _named("bn", bn.parameters("")), None
    bn_eval = init_bn(3)
    _randomize_bn(bn_eval, rng)
    bn_eval.training = False
    bn_eval.running_mean = rng.uniform(-0.2, 0.2, 3)
    bn_eval.running_var = rng.uniform(0.5, 2.0, 3)
    yield "batch_norm_eval", lambda a: p(batch_norm(a, bn_eval)), [x], _named("bn", bn_eval.parameters("")), None

    pr = init_prelu(3)
    pr.slope.data[:] = rng.uniform(0.05, 0.5, 3)
    yield "prelu", lambda a: p(prelu(a, pr)), [x], _named("prelu", pr.parameters("")), None

    pu = probe((2, 3, 16, 16))
    yield "upsample2x", lambda a: pu(upsample2x(a)), [x], [], None
    x4 = Tensor(rng.uniform(-1, 1, (2, 4, 4, 4)), name="x4")
    up = UnpoolParams(init_conv(rng, 4, 2, 1))
    up.projection.bias.data[:] = rng.uniform(-0.5, 0.5, 2)
    pun = probe((2, 2, 8, 8))
    yield "unpool", lambda a: pun(unpool(a, up)), [x4], _named("unpool", up.parameters("")), None

    unit = init_unit(rng, 3, 4, 3)
    _randomize_bn(unit.bn, rng)
    p4 = probe((2, 4, 8, 8))
    yield "pre_activation_unit", lambda a: p4(pre_activation_unit(a, unit)), [x], _named("unit", unit.parameters("")), None

    logits = Tensor(rng.standard_normal((2, 3, 4, 4)), name="logits")
    ps = probe((2, 3, 4, 4))
    yield "softmax", lambda a: ps(softmax_probs(a)), [logits], [], None
    labels = rng.integers(0, 3, (2, 4, 4))
    yield "softmax_nll", lambda a: nll_loss(softmax_probs(a), labels), [logits], [], None

    block = init_dense_block(DenseBlockConfig(4, 2), rng)
    for _, b in block.batch_norms(""):
        _randomize_bn(b, rng)
    xb = Tensor(rng.uniform(-1, 1, (1, 4, 8, 8)), name="block_input")
    pb = probe((1, 4, 8, 8))
    yield ("dense_block", lambda a: pb(dense_block_forward(a, block)), [xb],
           _named("block", block.parameters("")), 40)


def run_suite(step: float = 1e-6, tolerance: float = 1e-4, seed: int = 0,
              only: Callable[[str], bool] | None = None) -> list[Case]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, points, params, sample in _cases(rng):
        if only is not None and not only(name):
            continue
        report = grad_check(fn, points, step=step, tolerance=tolerance, params=params, max_per_tensor=sample,
                            seed=seed)
        results.append(Case(name, report))
    return results
