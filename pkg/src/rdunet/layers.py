"""Convolution, batch normalization, PReLU and unpooling with their gradients.

All activations are (n, c, h, w) float64 tensors. Convolutions are computed
as per-sample im2col matrix products; the backward pass rebuilds the patch
columns rather than holding them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ShapeError, Tensor, record

ALLOWED_KERNELS = (1, 2, 3)


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D, got {self.weight.shape}")
        kh, kw = self.weight.shape[2:]
        if kh != kw or kh not in ALLOWED_KERNELS:
            raise ValueError(f"kernel {kh}x{kw} not in {{1x1, 2x2, 3x3}}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {self.padding!r}")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("bias length must equal out_channels")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def parameters(self, prefix: str):
        yield f"{prefix}/weight", self.weight
        if self.bias is not None:
            yield f"{prefix}/bias", self.bias


@dataclass
class BNParams:
    gamma: Tensor
    beta: Tensor
    # small enough that any channel with variance >= 1e-6 normalizes to unit std within 1e-3
    eps: float = 1e-9
    momentum: float = 0.9
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    training: bool = True

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        c = self.gamma.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(c)
        if self.running_var is None:
            self.running_var = np.ones(c)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def parameters(self, prefix: str):
        yield f"{prefix}/gamma", self.gamma
        yield f"{prefix}/beta", self.beta


@dataclass
class PReLUParams:
    slope: Tensor

    def parameters(self, prefix: str):
        yield f"{prefix}/slope", self.slope


@dataclass
class UnpoolParams:
    projection: ConvParams

    def __post_init__(self):
        p = self.projection
        if p.kernel != 1 or p.in_channels != 2 * p.out_channels:
            raise ShapeError("unpool projection must be a 1x1 conv mapping 2C -> C")

    def parameters(self, prefix: str):
        yield from self.projection.parameters(f"{prefix}/proj")


@dataclass
class PreActUnit:
    """BN -> PReLU -> Conv, the unit behind every "BN, PReLU, Conv" row."""

    bn: BNParams
    prelu: PReLUParams
    conv: ConvParams

    def parameters(self, prefix: str):
        yield from self.bn.parameters(f"{prefix}/bn")
        yield from self.prelu.parameters(f"{prefix}/prelu")
        yield from self.conv.parameters(f"{prefix}/conv")

    def batch_norms(self, prefix: str):
        yield f"{prefix}/bn", self.bn


# ---------------------------------------------------------------------------
# initialization


def init_conv(rng: np.random.Generator, c_in: int, c_out: int, kernel: int, stride: int = 1,
              padding: str = "same", bias: bool = True, slope: float = 0.25) -> ConvParams:
    """He fan-in initialization adjusted for a leaky/PReLU slope."""
    fan_in = c_in * kernel * kernel
    std = np.sqrt(2.0 / ((1.0 + slope**2) * fan_in))
    w = Tensor(rng.standard_normal((c_out, c_in, kernel, kernel)) * std, requires_grad=True)
    b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
    return ConvParams(w, b, stride, padding)


def init_bn(channels: int) -> BNParams:
    return BNParams(Tensor(np.ones(channels), requires_grad=True), Tensor(np.zeros(channels), requires_grad=True))


def init_prelu(channels: int, slope: float = 0.25) -> PReLUParams:
    return PReLUParams(Tensor(np.full(channels, slope), requires_grad=True))


def init_unit(rng, c_in: int, c_out: int, kernel: int, bias: bool = True) -> PreActUnit:
    return PreActUnit(init_bn(c_in), init_prelu(c_in), init_conv(rng, c_in, c_out, kernel, bias=bias))


# ---------------------------------------------------------------------------
# convolution


def _pads(kernel: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    total = kernel - 1
    # even kernels: the extra row/column goes bottom/right
    return total // 2, total - total // 2


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    lo, hi = _pads(kernel, padding)
    return (size + lo + hi - kernel) // stride + 1


def _im2col(x: np.ndarray, k: int, s: int, lo: int, hi: int, ho: int, wo: int) -> np.ndarray:
    """(n, c, h, w) -> (n, c*k*k, ho*wo) patch columns, zero padded."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi))) if lo or hi else x
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, shape, k: int, s: int, lo: int, hi: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    dcols = dcols.reshape(n, c, k, k, ho, wo)
    gxp = np.zeros((n, c, h + lo + hi, w + lo + hi))
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, i, j]
    return gxp[:, :, lo:lo + h, lo:lo + w]


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Cross-correlation plus bias."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (n, c, h, w), got {x.shape}")
    n, c, h, w = x.shape
    if c != params.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels, weights expect {params.in_channels}")
    k, s = params.kernel, params.stride
    if s == 2 and (h % 2 or w % 2):
        raise ShapeError(f"stride-2 conv needs even spatial size, got {h}x{w}")
    lo, hi = _pads(k, params.padding)
    ho, wo = conv_output_size(h, k, s, params.padding), conv_output_size(w, k, s, params.padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {k}")
    c_out = params.out_channels
    weight = params.weight
    wmat = weight.data.reshape(c_out, -1)
    direct = k == 1 and s == 1
    xdata = x.data

    cols = xdata.reshape(n, c, h * w) if direct else _im2col(xdata, k, s, lo, hi, ho, wo)
    out = np.matmul(wmat, cols)
    del cols
    out = out.reshape(n, c_out, ho, wo)
    if params.bias is not None:
        out += params.bias.data[None, :, None, None]

    inputs = (x, weight) if params.bias is None else (x, weight, params.bias)

    def backward(g):
        gm = g.reshape(n, c_out, ho * wo)
        cols_ = xdata.reshape(n, c, h * w) if direct else _im2col(xdata, k, s, lo, hi, ho, wo)
        gw = np.zeros_like(wmat)
        for b in range(n):
            gw += gm[b] @ cols_[b].T
        del cols_
        dcols = np.matmul(wmat.T, gm)
        gx = dcols.reshape(n, c, h, w) if direct else _col2im(dcols, (n, c, h, w), k, s, lo, hi, ho, wo)
        grads = [gx, gw.reshape(weight.shape)]
        if params.bias is not None:
            grads.append(gm.sum(axis=(0, 2)))
        return grads

    return record("conv2d", inputs, out, backward)


# ---------------------------------------------------------------------------
# normalization and activation


def batch_norm(x: Tensor, params: BNParams) -> Tensor:
    """Per-channel normalization over (batch, height, width) followed by scale and shift.

    Training mode normalizes with the batch statistics and updates the running
    averages; inference mode uses the running averages and changes nothing.
    """
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise ShapeError(f"batch_norm: input {x.shape} vs {params.channels} channels")
    gamma, beta = params.gamma, params.beta
    n, c, h, w = x.shape
    m = n * h * w
    xd = x.data
    if params.training:
        if m < 2:
            raise ValueError("batch_norm in training mode needs at least two values per channel")
        mean = np.einsum("nchw->c", xd) / m
        centered = xd - mean[None, :, None, None]
        var = np.einsum("nchw,nchw->c", centered, centered) / m
        mom = params.momentum
        params.running_mean = mom * params.running_mean + (1.0 - mom) * mean
        params.running_var = mom * params.running_var + (1.0 - mom) * var
    else:
        mean, var = params.running_mean, params.running_var
        centered = xd - mean[None, :, None, None]
    training = params.training
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = centered
    xhat *= inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    gamma_data = gamma.data.copy()

    def backward(g):
        dgamma = np.einsum("nchw,nchw->c", g, xhat)
        dbeta = np.einsum("nchw->c", g)
        k = gamma_data * inv_std
        if not training:
            return g * k[None, :, None, None], dgamma, dbeta
        # dx = gamma*inv_std * (g - mean(g) - xhat * mean(g * xhat))
        dx = g - (dbeta / m)[None, :, None, None]
        dx -= xhat * (dgamma / m)[None, :, None, None]
        dx *= k[None, :, None, None]
        return dx, dgamma, dbeta

    return record("batch_norm", (x, gamma, beta), out, backward)


def prelu(x: Tensor, params: PReLUParams) -> Tensor:
    a = params.slope
    if x.ndim != 4 or x.shape[1] != a.shape[0]:
        raise ShapeError(f"prelu: input {x.shape} vs {a.shape[0]} slopes")
    xd = x.data
    negpart = np.minimum(xd, 0.0)
    a4 = a.data[None, :, None, None]
    out = np.maximum(xd, 0.0) + a4 * negpart

    def backward(g):
        gx = g * np.where(xd < 0, a4, 1.0)
        ga = np.einsum("nchw,nchw->c", negpart, g)
        return gx, ga

    return record("prelu", (x, a), out, backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor replication of each pixel into a 2x2 block."""
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record("upsample2x", (x,), out, backward)


def unpool(x: Tensor, params: UnpoolParams) -> Tensor:
    """2x nearest-neighbor upsampling followed by a 1x1 projection to half the channels."""
    if x.shape[1] % 2:
        raise ShapeError(f"unpool needs an even channel count, got {x.shape[1]}")
    # a 1x1 conv commutes with pixel replication; project first on the smaller grid
    return upsample2x(conv2d(x, params.projection))


def pre_activation_unit(x: Tensor, unit: PreActUnit) -> Tensor:
    return conv2d(prelu(batch_norm(x, unit.bn), unit.prelu), unit.conv)
