"""Residual log-dense block.

Six pre-activation stages. Stage ``i`` reads the concatenated outputs of
stages ``i - 1, i - 2, i - 4, ...`` (stage 0 is the block input), stages 1-5
emit ``2**(i-1) * p0`` maps, stage 6 compresses back to the block width, a
trailing batch norm follows, and the block returns ``PReLU(F(x) + x)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ShapeError, Tensor, add, concat_list
from .layers import BNParams, PReLUParams, PreActUnit, batch_norm, init_bn, init_prelu, init_unit, \
    pre_activation_unit, prelu

STAGES = 6


def log_dense_inputs(i: int) -> list[int]:
    """Predecessor stages read by stage ``i``: ``i - 2**k`` for ``k = 0 .. floor(log2 i)``."""
    if i < 1:
        raise ValueError(f"stage index must be >= 1, got {i}")
    return [i - (1 << k) for k in range(i.bit_length())]


def growth_rate(m: int, p0: int, cap: int | None = None) -> int:
    """Maps emitted by growth stage ``m``: ``2**(m-1) * p0``, optionally capped."""
    if not 1 <= m <= STAGES - 1:
        raise ValueError(f"growth stage index must be in 1..{STAGES - 1}, got {m}")
    if p0 < 1:
        raise ValueError("p0 must be positive")
    p = (1 << (m - 1)) * p0
    return min(p, cap) if cap is not None else p


@dataclass(frozen=True)
class DenseBlockConfig:
    channels: int
    growth_base: int = 8
    growth_cap: int | None = None

    def kernel(self, m: int) -> int:
        return 1 if m in (1, STAGES) else 3

    def emitted(self, m: int) -> int:
        if m == 0 or m == STAGES:
            return self.channels
        return growth_rate(m, self.growth_base, self.growth_cap)

    def input_width(self, m: int) -> int:
        return sum(self.emitted(j) for j in log_dense_inputs(m))


@dataclass
class DenseBlockParams:
    config: DenseBlockConfig
    units: list[PreActUnit]
    trailing_bn: BNParams
    out_prelu: PReLUParams

    def parameters(self, prefix: str):
        for m, unit in enumerate(self.units, start=1):
            yield from unit.parameters(f"{prefix}/stage{m}")
        yield from self.trailing_bn.parameters(f"{prefix}/bn_out")
        yield from self.out_prelu.parameters(f"{prefix}/prelu_out")

    def batch_norms(self, prefix: str):
        for m, unit in enumerate(self.units, start=1):
            yield from unit.batch_norms(f"{prefix}/stage{m}")
        yield f"{prefix}/bn_out", self.trailing_bn


def init_dense_block(config: DenseBlockConfig, rng: np.random.Generator) -> DenseBlockParams:
    # stage convs feed batch norms only, so a conv bias would be cancelled
    units = [init_unit(rng, config.input_width(m), config.emitted(m), config.kernel(m), bias=False)
             for m in range(1, STAGES + 1)]
    return DenseBlockParams(config, units, init_bn(config.channels), init_prelu(config.channels))


def audit_wiring(params: DenseBlockParams) -> dict:
    """Check every stage's conv input width against its log-dense sources."""
    cfg = params.config
    widths = []
    for m, unit in enumerate(params.units, start=1):
        expected = cfg.input_width(m)
        if unit.conv.in_channels != expected or unit.bn.channels != expected:
            raise ShapeError(f"stage {m}: conv reads {unit.conv.in_channels} channels, sources give {expected}")
        widths.append(expected)
    log_edges = sum(len(log_dense_inputs(m)) for m in range(1, STAGES + 1))
    return {
        "input_widths": widths,
        "emitted": [cfg.emitted(m) for m in range(1, STAGES + 1)],
        "log_dense_edges": log_edges,
        "full_dense_edges": STAGES * (STAGES + 1) // 2,
    }


def residual_branch(x: Tensor, params: DenseBlockParams) -> Tensor:
    """F(x): the six log-dense stages and the trailing batch norm."""
    if x.ndim != 4 or x.shape[1] != params.config.channels:
        raise ShapeError(f"dense block expects {params.config.channels} channels, got {x.shape}")
    outputs = [x]
    for m, unit in enumerate(params.units, start=1):
        gathered = concat_list([outputs[j] for j in log_dense_inputs(m)])
        outputs.append(pre_activation_unit(gathered, unit))
    return batch_norm(outputs[-1], params.trailing_bn)


def dense_block_forward(x: Tensor, params: DenseBlockParams) -> Tensor:
    return prelu(add(residual_branch(x, params), x), params.out_prelu)
