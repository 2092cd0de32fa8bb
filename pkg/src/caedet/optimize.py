"""Binary cross-entropy, Adam, and the binarized pixel-accuracy metric."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError

CLAMP = 1e-7


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DomainError("beta1 and beta2 must lie in [0, 1)")
        if not self.epsilon > 0:
            raise DomainError("epsilon must be > 0")


@dataclass(frozen=True)
class LossReport:
    loss: float
    pixel_accuracy: float
    batch_size: int


def _check_pair(target, prediction):
    target, prediction = np.asarray(target), np.asarray(prediction)
    if target.shape != prediction.shape:
        raise DimensionError(f"target shape {target.shape} != prediction shape {prediction.shape}")
    if target.size and (target.min() < 0 or target.max() > 1):
        raise DomainError("targets must lie in [0, 1]")
    return target, prediction


def _clamped(prediction):
    return np.clip(prediction, CLAMP, 1 - CLAMP)


def bce_loss(target, prediction) -> float:
    """Mean binary cross-entropy over every element of the batch."""
    y, p = _check_pair(target, prediction)
    p = _clamped(p.astype(np.float64))
    y = y.astype(np.float64)
    terms = y * np.log(p) + (1 - y) * np.log1p(-p)
    return float(-terms.mean())


def bce_per_sample(target, prediction) -> np.ndarray:
    """Mean BCE of each leading-axis slice (one value per frame)."""
    y, p = _check_pair(target, prediction)
    p = _clamped(p.astype(np.float64))
    y = y.astype(np.float64)
    terms = y * np.log(p) + (1 - y) * np.log1p(-p)
    return -terms.reshape(terms.shape[0], -1).mean(axis=1)


def bce_grad(target, prediction) -> np.ndarray:
    """Gradient of ``bce_loss`` with respect to the prediction, in the prediction's dtype."""
    y, p = _check_pair(target, prediction)
    pc = _clamped(p)
    return ((pc - y) / (pc * (1 - pc)) / p.size).astype(p.dtype, copy=False)


def adam_step(param, grad, m, v, t, config: AdamConfig = AdamConfig()):
    """Apply one in-place Adam update to ``param`` and its moments ``m``, ``v``.

    ``t`` is the 1-based step number of this update.
    """
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise DimensionError(
            f"adam_step shapes disagree: param {param.shape}, grad {grad.shape}, m {m.shape}, v {v.shape}"
        )
    if t < 1:
        raise DomainError("step counter must be >= 1 before bias correction")
    b1, b2 = config.beta1, config.beta2
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * np.square(grad)
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    param -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)


class Adam:
    """Adam over every Param of a ParamStore; the store keeps the step counter."""

    def __init__(self, store, config: AdamConfig = AdamConfig()):
        self.store = store
        self.config = config

    def step(self):
        self.store.t += 1
        for _, p in self.store:
            adam_step(p.value, p.grad, p.m, p.v, self.store.t, self.config)


def pixel_accuracy(target, prediction) -> float:
    """Fraction of elements whose 0.5-binarizations agree (0.5 rounds up)."""
    y, p = np.asarray(target), np.asarray(prediction)
    if y.shape != p.shape:
        raise DimensionError(f"target shape {y.shape} != prediction shape {p.shape}")
    if y.size == 0:
        raise DomainError("pixel_accuracy of an empty tensor")
    return float(np.mean((y >= 0.5) == (p >= 0.5)))


def loss_report(target, prediction) -> LossReport:
    return LossReport(bce_loss(target, prediction), pixel_accuracy(target, prediction), len(target))
