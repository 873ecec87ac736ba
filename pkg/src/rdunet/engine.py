"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations executed while a :class:`Tape` is active are appended to it in
construction order; :meth:`Tape.backward` walks that list in reverse and
pushes gradients to every leaf tensor that requires them.

Only exact-shape binary operations live here. Per-channel broadcasting
(batch-norm affine terms, PReLU slopes) is handled by the fused layer ops in
:mod:`rdunet.layers`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.require(data, DTYPE, "C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # Sugar for small test graphs; layers call the functions directly.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


@dataclass
class Node:
    """One recorded operation: inputs, output and the local backward rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Define-by-run computation graph.

    Use as a context manager; every differentiable op run inside the block
    is recorded. Nested tapes are allowed, the innermost one records.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, output: Tensor, seed: Tensor | np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Propagate ``seed`` from ``output`` back to the leaves.

        Returns a map ``id(leaf) -> gradient`` and also accumulates each
        gradient into ``leaf.grad``. ``seed`` defaults to ones.
        """
        if not self.nodes:
            raise ValueError("backward on an empty graph")
        if seed is None:
            seed_arr = np.ones_like(output.data)
        else:
            seed_arr = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=DTYPE)
        if seed_arr.shape != output.shape:
            raise ShapeError(f"seed shape {seed_arr.shape} != output shape {output.shape}")

        produced = {id(n.output) for n in self.nodes}
        grads: dict[int, np.ndarray] = {id(output): seed_arr.copy()}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            input_grads = node.backward(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if key not in produced:
                    leaves[key] = inp

        result: dict[int, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            result[key] = g
        if id(output) not in produced and output.requires_grad:
            # output is itself a leaf reached by no node
            result[id(output)] = seed_arr
        return result


_TAPES: list[Tape] = []


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` in a Tensor and append the op to the active tape."""
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires_grad)
    tape = current_tape()
    if tape is not None and requires_grad:
        tape.record(Node(op, tuple(inputs), out, backward))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: float) -> Tensor:
    return record("scale", (a,), a.data * factor, lambda g: (g * factor,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record("square", (a,), ad * ad, lambda g: (2.0 * ad * g,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = a.shape
    return record("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(a * weights)`` for a constant weight array; used to probe gradients."""
    w = np.asarray(weights, dtype=DTYPE)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs tensor {a.shape}")
    return record("weighted_sum", (a,), np.asarray((a.data * w).sum()), lambda g: (float(g) * w,))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of scalar (or equally shaped) tensors."""
    if not tensors:
        raise ValueError("add_n of nothing")
    first = tensors[0]
    for t in tensors[1:]:
        _same_shape("add_n", first, t)
    out = np.sum([t.data for t in tensors], axis=0)
    return record("add_n", tuple(tensors), out, lambda g: [g] * len(tensors))


def concat_channels(a: Tensor, b: Tensor, *more: Tensor) -> Tensor:
    """Concatenate (n, c, h, w) tensors along the channel axis, in order."""
    parts = (a, b) + more
    ref = parts[0].shape
    for t in parts:
        if t.ndim != 4:
            raise ShapeError(f"concat_channels needs 4-D tensors, got {t.shape}")
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: batch/spatial mismatch {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in parts])
    out = np.concatenate([t.data for t in parts], axis=1)

    def backward(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return record("concat", parts, out, backward)


def concat_list(parts: Sequence[Tensor]) -> Tensor:
    if len(parts) == 1:
        return parts[0]
    return concat_channels(*parts)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    worst: str = ""
    diagnostic: str = ""


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(function: Callable[..., Tensor], point: Tensor | Sequence[Tensor], step: float = 1e-6,
               tolerance: float = 1e-4, params: Iterable[Tensor] = (), max_per_tensor: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``function`` is called with the tensors in ``point`` and its output is
    sum-reduced to a scalar. Gradients are checked for every point tensor
    and for each tensor in ``params``. ``max_per_tensor`` samples that many
    coordinates per tensor (seeded) instead of probing every element.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    points = [point] if isinstance(point, Tensor) else list(point)
    targets = points + [p for p in params if all(p is not q for q in points)]
    saved_flags = [t.requires_grad for t in targets]
    for t in targets:
        t.requires_grad = True
        t.grad = None

    def evaluate() -> float:
        value = float(function(*points).data.sum())
        if not np.isfinite(value):
            raise FloatingPointError("non-finite function value")
        return value

    try:
        with Tape() as tape:
            out = function(*points)
            loss = total(out)
        if not np.isfinite(float(loss.data)):
            return GradCheckReport(np.inf, False, 0, "", "non-finite function value at the base point")
        tape.backward(loss)
        rng = np.random.default_rng(seed)
        worst_err, worst_at, checked = 0.0, "", 0
        for ti, t in enumerate(targets):
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_tensor is not None and flat.size > max_per_tensor:
                idx = np.sort(rng.choice(flat.size, max_per_tensor, replace=False))
            numeric = np.empty(idx.size)
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                try:
                    fp = evaluate()
                    flat[i] = orig - step
                    fm = evaluate()
                except FloatingPointError as exc:
                    flat[i] = orig
                    label = t.name or f"tensor{ti}"
                    return GradCheckReport(np.inf, False, checked, f"{label}[{i}]", str(exc))
                flat[i] = orig
                numeric[k] = (fp - fm) / (2.0 * step)
            err = _relative_error(analytic.reshape(-1)[idx], numeric)
            checked += idx.size
            if err.size and err.max() > worst_err:
                worst_err = float(err.max())
                worst_at = f"{t.name or f'tensor{ti}'}[{int(idx[err.argmax()])}]"
    finally:
        for t, flag in zip(targets, saved_flags):
            t.requires_grad = flag
            t.grad = None
    return GradCheckReport(worst_err, worst_err < tolerance, checked, worst_at)
