"""Softmax cross-entropy with weight decay, Adamax, step-decay learning rate
and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Sample, augment, stack_batch
from .engine import ShapeError, Tape, Tensor, add_n, record
from .network import Model, forward, save_checkpoint

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class TrainingConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    decay_every: int = 15
    decay_factor: float = 10.0
    epochs: int = 300
    max_steps: int | None = None
    weight_decay: float = 1e-4
    augment: bool = True
    shuffle: bool = True
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, step {step}")
        self.epoch, self.step, self.value = epoch, step, value


# ---------------------------------------------------------------------------
# loss


def softmax_probs(logits: Tensor) -> Tensor:
    """Per-pixel class probabilities over the channel axis of (n, N, h, w) logits."""
    if logits.ndim != 4 or logits.shape[1] < 2:
        raise ShapeError(f"softmax needs (n, N>=2, h, w) logits, got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record("softmax", (logits,), p, backward)


def nll_loss(probs: Tensor, labels: np.ndarray, diagnostics: dict | None = None) -> Tensor:
    """Mean negative log-probability of the true class over pixels and batch."""
    labels = np.asarray(labels)
    n, num_classes, h, w = probs.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match probabilities {probs.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    p_true = np.take_along_axis(probs.data, labels[:, None], axis=1)[:, 0]
    clamped = p_true < PROB_FLOOR
    if diagnostics is not None:
        diagnostics["clamped_pixels"] = int(clamped.sum())
    safe = np.maximum(p_true, PROB_FLOOR)
    count = labels.size
    value = -np.log(safe).sum() / count

    def backward(g):
        gp = np.zeros(probs.shape)
        local = np.where(clamped, 0.0, -1.0 / (safe * count)) * float(g)
        np.put_along_axis(gp, labels[:, None], local[:, None], axis=1)
        return (gp,)

    return record("nll", (probs,), np.asarray(value), backward)


def weight_penalty(weights: list[Tensor], weight_decay: float) -> Tensor:
    """(weight_decay / 2) * sum of squared weights."""
    value = 0.5 * weight_decay * sum(float(np.vdot(w.data, w.data)) for w in weights)

    def backward(g):
        return [float(g) * weight_decay * w.data for w in weights]

    return record("l2", tuple(weights), np.asarray(value), backward)


def regularized_weights(named: dict) -> list[Tensor]:
    """Convolution weights only: no biases, batch-norm affine terms or PReLU slopes."""
    return [t for name, t in named.items() if name.endswith("/weight")]


def loss(probs: Tensor, labels: np.ndarray, weights: list[Tensor] = (), weight_decay: float = 0.0,
         diagnostics: dict | None = None) -> Tensor:
    data_term = nll_loss(probs, labels, diagnostics)
    if weight_decay == 0.0 or not weights:
        return data_term
    return add_n([data_term, weight_penalty(list(weights), weight_decay)])


def pixel_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamaxState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)


def adamax_step(state: AdamaxState, grads: dict, params: dict, lr: float) -> None:
    """One in-place Adamax update of ``params`` (name -> Tensor) from ``grads`` (name -> array)."""
    if set(grads) != set(params):
        missing = sorted(set(params) ^ set(grads))
        raise KeyError(f"gradient/parameter keys differ: {missing[:3]}")
    state.t += 1
    correction = lr / (1.0 - state.beta1**state.t)
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.u[name] = np.zeros_like(p.data)
        u = state.u[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        p.data -= correction * m / (u + state.eps)


def lr_schedule(epoch: int, base: float = 1e-3, every: int = 15, factor: float = 10.0) -> float:
    """``base`` divided by ``factor`` once per ``every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * factor ** -(epoch // every)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    log: list[dict]
    checkpoint: Path | None
    steps: int


LOG_FIELDS = ("epoch", "step", "lr", "loss", "accuracy")


def train_step(model: Model, images: np.ndarray, labels: np.ndarray, state: AdamaxState, lr: float,
               weight_decay: float) -> tuple[float, float]:
    params = model.named_parameters()
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        logits = forward(model, Tensor(images))
        probs = softmax_probs(logits)
        objective = loss(probs, labels, regularized_weights(params), weight_decay)
    value = float(objective.data)
    acc = pixel_accuracy(logits.data, labels)
    if not math.isfinite(value):
        return value, acc
    tape.backward(objective)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    adamax_step(state, grads, params, lr)
    return value, acc


def train(model: Model, dataset: list[Sample], config: TrainingConfig, out_dir=None,
          log_path=None) -> TrainResult:
    """Shuffle, batch, augment, step; log every step and checkpoint per ``checkpoint_every`` epochs.

    An epoch is one pass over ``dataset``; ``max_steps`` stops early. The
    learning rate follows :func:`lr_schedule` on the epoch index.
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    state = AdamaxState(config.beta1, config.beta2, config.eps)
    out = Path(out_dir) if out_dir is not None else None
    log: list[dict] = []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
    model.train()
    step = 0
    try:
        for epoch in range(config.epochs):
            if config.max_steps is not None and step >= config.max_steps:
                break
            lr = lr_schedule(epoch, config.learning_rate, config.decay_every, config.decay_factor)
            order = rng.permutation(len(dataset)) if config.shuffle else np.arange(len(dataset))
            for start in range(0, len(order), config.batch_size):
                if config.max_steps is not None and step >= config.max_steps:
                    break
                batch = [dataset[i] for i in order[start:start + config.batch_size]]
                if config.augment:
                    batch = [augment(s, rng) for s in batch]
                images, labels = stack_batch(batch)
                value, acc = train_step(model, images, labels, state, lr, config.weight_decay)
                if not math.isfinite(value):
                    raise NonFiniteLoss(epoch, step, value)
                row = {"epoch": epoch, "step": step, "lr": lr, "loss": value, "accuracy": acc}
                log.append(row)
                if writer is not None:
                    writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
                logger.debug("epoch %d step %d loss %.6f acc %.4f", epoch, step, value, acc)
                step += 1
            if out is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_epoch{epoch + 1:04d}.rdun", model.state_dict())
    finally:
        if fh is not None:
            fh.close()
    final = None
    if out is not None:
        final = out / "checkpoint_final.rdun"
        save_checkpoint(final, model.state_dict())
    return TrainResult(log, final, step)
