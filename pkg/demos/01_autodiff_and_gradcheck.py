"""Reverse-mode gradients through a residual unit, checked by finite differences."""

import numpy as np

from rdunet.engine import Tape, Tensor, add, grad_check, weighted_sum
from rdunet.layers import batch_norm, conv2d, init_bn, init_conv, init_prelu, prelu

rng = np.random.default_rng(0)

# a small residual unit y = x + F(x), with F = conv -> BN -> PReLU -> conv
c1, c2 = init_conv(rng, 3, 3, 3), init_conv(rng, 3, 3, 3)
bn, act = init_bn(3), init_prelu(3)


def branch(t):
    return conv2d(prelu(batch_norm(conv2d(t, c1), bn), act), c2)


x = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
seed = rng.normal(size=x.shape)

with Tape() as tape:
    y = add(x, branch(x))
print("recorded ops:", [n.op for n in tape.nodes])
tape.backward(y, seed)
through_unit = x.grad.copy()

# the same seed pushed through F alone
x.grad = None
with Tape() as tape:
    f = branch(x)
tape.backward(f, seed)

# whatever is left over is the identity path: exactly the seed
residue = through_unit - x.grad - seed
print("max |grad(x) - grad_F(x) - seed| =", np.abs(residue).max())

# central differences against the analytic gradient, over x and both conv weights
probe = rng.normal(size=x.shape)
report = grad_check(lambda t: weighted_sum(add(t, branch(t)), probe), Tensor(x.data.copy()),
                    params=[c1.weight, c2.weight, c2.bias])
print(f"grad_check: {report.checked} coordinates, max relative error {report.max_rel_error:.2e}, "
      f"passed={report.passed}")
