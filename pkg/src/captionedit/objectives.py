"""Training objectives, Adam and the learning-rate / scheduled-sampling schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .data import PAD


def xe_loss(logits, targets, pad_id: int = PAD) -> Tensor:
    """Negative log-likelihood of ``targets`` summed over time, averaged over the batch.

    ``logits`` is ``(T, V)`` for one caption or ``(B, T, V)``; positions whose
    target equals ``pad_id`` do not contribute.
    """
    logits = ad.tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"xe_loss: targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise ValueError(f"xe_loss: target id out of range [0, {logits.shape[-1]})")
    nll = -ad.pick(ad.log_softmax(logits), targets)
    nll = nll * ad.tensor((targets != pad_id).astype(np.float64))
    batch = 1 if logits.ndim == 2 else logits.shape[0]
    return ad.sum(nll) * (1.0 / batch)


def token_count(targets, pad_id: int = PAD) -> int:
    return int((np.asarray(targets) != pad_id).sum())


def hidden_mse_loss(h_last, target, W_d, b_d) -> Tensor:
    """Mean squared difference between the projected decoder state and ``target``.

    ``target`` is treated as a constant.  Averaged over dimensions and batch.
    """
    proj = ad.linear(h_last, W_d, b_d)
    target = ad.stop_gradient(ad.tensor(target))
    if proj.shape != target.shape:
        raise ShapeError(f"hidden_mse_loss: projection {proj.shape} vs target {target.shape}")
    return ad.mean(ad.squared_difference(proj, target))


def combined_loss(xe: Tensor, mse: Tensor) -> Tensor:
    return ad.add(xe, mse)


def scst_loss(logprob_sum, r_sampled, r_greedy) -> Tensor:
    """Surrogate whose gradient is ``-(r(sample) - r(greedy)) * grad log p(sample)``, batch-averaged."""
    logprob_sum = ad.tensor(logprob_sum)
    adv = np.asarray(r_sampled, dtype=np.float64) - np.asarray(r_greedy, dtype=np.float64)
    if not np.isfinite(adv).all():
        raise ValueError("scst_loss: rewards must be finite")
    adv = adv.reshape(logprob_sum.shape)
    batch = 1 if logprob_sum.ndim == 0 else logprob_sum.shape[0]
    return -ad.sum(logprob_sum * ad.tensor(adv)) * (1.0 / batch)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update of every parameter holding a gradient, in place."""
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise ValueError(f"adam_step: non-finite gradient for parameter {name!r}")
        if p.grad is not None and p.grad.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {p.grad.shape} vs parameter {name!r} {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# schedules

@dataclass
class TrainingSchedule:
    base_lr: float = 5e-4
    decay: float = 0.8
    decay_every: int = 3
    ss_increment: float = 0.05
    ss_every: int = 5
    ss_max: float = 1.0
    scst_lr: float = 5e-5
    scst_anneal: float = 0.5

    def __post_init__(self):
        if self.base_lr <= 0 or self.scst_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.ss_max <= 1 or self.ss_increment < 0:
            raise ValueError("scheduled-sampling settings must describe probabilities")


def schedule_at(epoch: int, schedule: TrainingSchedule) -> tuple[float, float]:
    """(learning rate, scheduled-sampling probability) for a cross-entropy epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    lr = schedule.base_lr * schedule.decay ** (epoch // schedule.decay_every)
    ss = min(schedule.ss_max, 1.0, schedule.ss_increment * (epoch // schedule.ss_every))
    return lr, ss


class ScstAnnealer:
    """Halves the learning rate whenever the dev score fails to improve for an epoch."""

    def __init__(self, schedule: TrainingSchedule):
        self.lr = schedule.scst_lr
        self.factor = schedule.scst_anneal
        self.best = -math.inf

    def update(self, dev_score: float) -> float:
        if dev_score > self.best:
            self.best = dev_score
        else:
            self.lr *= self.factor
        return self.lr
