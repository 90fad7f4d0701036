"""LM, forward-KL distillation and mixed objectives over ``[B, T, V]`` logits.

All reductions are a mean over every position, accumulated with
``math.fsum`` so the value does not depend on how positions are laid out in
the batch. Teacher logits are plain arrays: no gradient ever flows to them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class IdOutOfRange(ValueError):
    pass


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _mean(values: np.ndarray) -> float:
    return math.fsum(np.asarray(values, dtype=np.float64).ravel().tolist()) / values.size


def _check_targets(targets: np.ndarray, vocab_size: int) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.size and (targets.min() < 0 or targets.max() >= vocab_size):
        raise IdOutOfRange(f"target id outside [0, {vocab_size})")
    return targets


def token_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-position negative log-likelihood, shape ``targets.shape``."""
    targets = _check_targets(targets, logits.shape[-1])
    logp = log_softmax(logits)
    return -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]


def token_kl(teacher_logits: np.ndarray, student_logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Per-position KL(q || p) of the tau-scaled softmaxes."""
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"shape mismatch {teacher_logits.shape} vs {student_logits.shape}")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logq = log_softmax(teacher_logits / tau)
    logp = log_softmax(student_logits / tau)
    q = np.exp(logq)
    return np.where(q > 0, q * (logq - logp), 0.0).sum(axis=-1)


def lm_loss(student_logits: np.ndarray, targets: np.ndarray) -> float:
    return _mean(token_nll(student_logits, targets))


def kd_loss(teacher_logits: np.ndarray, student_logits: np.ndarray, tau: float = 1.0) -> float:
    return _mean(token_kl(teacher_logits, student_logits, tau))


def mixed_loss(lm: float, kd: float, alpha: float) -> float:
    check_alpha(alpha)
    return (1.0 - alpha) * lm + alpha * kd


def check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")


@dataclass(frozen=True)
class LossParams:
    alpha: float = 0.0
    tau: float = 1.0

    def __post_init__(self):
        check_alpha(self.alpha)
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class ObjectiveValue:
    loss: float
    dlogits: np.ndarray
    parts: dict = field(default_factory=dict)


# An objective maps (student logits, targets) to the loss and its logit gradient.
Objective = Callable[[np.ndarray, np.ndarray], ObjectiveValue]


def lm_grad(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    targets = _check_targets(targets, logits.shape[-1])
    logp = log_softmax(logits)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    g = np.exp(logp)
    np.put_along_axis(g, targets[..., None], np.take_along_axis(g, targets[..., None], -1) - 1, -1)
    return _mean(nll), g / nll.size


def kd_grad(
    teacher_logits: np.ndarray, student_logits: np.ndarray, tau: float = 1.0
) -> tuple[float, np.ndarray]:
    """KD loss and d(loss)/d(student logits) = (p_tau - q_tau) / (tau * N)."""
    kl = token_kl(teacher_logits, student_logits, tau)
    p = softmax(student_logits / tau)
    q = softmax(teacher_logits.astype(student_logits.dtype, copy=False) / tau)
    return _mean(kl), (p - q) / (tau * kl.size)


def lm_objective() -> Objective:
    def objective(logits, targets):
        loss, g = lm_grad(logits, targets)
        return ObjectiveValue(loss, g, {"lm": loss, "kd": float("nan")})

    return objective


def mixed_objective(teacher_logits: np.ndarray | None, alpha: float, tau: float = 1.0) -> Objective:
    """``(1 - alpha) * LM + alpha * KD`` against fixed teacher logits.

    A zero-weight term is not evaluated at all, so alpha=0 is exactly the LM
    objective and alpha=1 never reads the targets.
    """
    check_alpha(alpha)
    if alpha > 0 and teacher_logits is None:
        raise ValueError("alpha > 0 requires teacher logits")

    def objective(logits, targets):
        loss = 0.0
        grad = None
        parts = {"lm": float("nan"), "kd": float("nan")}
        if alpha < 1.0:
            lm, g = lm_grad(logits, targets)
            parts["lm"] = lm
            loss, grad = (1.0 - alpha) * lm, g if alpha == 0.0 else (1.0 - alpha) * g
        if alpha > 0.0:
            kd, g = kd_grad(teacher_logits, logits, tau)
            parts["kd"] = kd
            g = g if alpha == 1.0 else alpha * g
            loss, grad = loss + alpha * kd, g if grad is None else grad + g
        return ObjectiveValue(loss, grad.astype(logits.dtype, copy=False), parts)

    return objective
