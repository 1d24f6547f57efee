"""Segmentation training objectives: class-balanced cross-entropy and Tversky loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, ParameterError

EPS = 1e-7
BETA_LV = 0.6
BETA_MYO = 0.4


@dataclass(frozen=True)
class LossParams:
    beta: float = BETA_LV
    epsilon: float = EPS
    weights: tuple = (0.5, 0.5)
    sample_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ParameterError("beta must lie in (0, 1)")
        if min(self.weights) < 0 or self.sample_weight < 0:
            raise ParameterError("loss weights must be non-negative")
        if sum(self.weights) <= 0:
            raise ParameterError("loss weights must not all be zero")


def _pair(p, p_hat):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(p_hat, dtype=np.float64)
    if p.shape != q.shape:
        raise InputError(f"shape mismatch {p.shape} vs {q.shape}")
    return p, q


def balanced_bce(p, p_hat, beta: float = BETA_LV, eps: float = EPS) -> float:
    """Pixel mean of -(beta p ln q + (1 - beta)(1 - p) ln(1 - q)), q clamped to [eps, 1 - eps]."""
    p, q = _pair(p, p_hat)
    q = np.clip(q, eps, 1.0 - eps)
    return float(np.mean(-(beta * p * np.log(q) + (1.0 - beta) * (1.0 - p) * np.log(1.0 - q))))


def balanced_bce_grad(p, p_hat, beta: float = BETA_LV, eps: float = EPS) -> np.ndarray:
    """Derivative of :func:`balanced_bce` with respect to ``p_hat`` (zero where the clamp is active)."""
    p, q = _pair(p, p_hat)
    inside = (q > eps) & (q < 1.0 - eps)
    qc = np.clip(q, eps, 1.0 - eps)
    g = -(beta * p / qc - (1.0 - beta) * (1.0 - p) / (1.0 - qc)) / p.size
    return np.where(inside, g, 0.0)


def soft_counts(p, p_hat):
    p, q = _pair(p, p_hat)
    return float(np.sum(p * q)), float(np.sum((1 - p) * q)), float(np.sum(p * (1 - q)))


def tversky(p, p_hat, beta: float = BETA_LV) -> float:
    """1 - 2TP / (2TP + beta FP + (1 - beta) FN) on soft counts; 0 when both are empty."""
    tp, fp, fn = soft_counts(p, p_hat)
    den = 2.0 * tp + beta * fp + (1.0 - beta) * fn
    if den == 0:
        return 0.0
    return 1.0 - 2.0 * tp / den


def soft_dice(p, p_hat) -> float:
    p, q = _pair(p, p_hat)
    den = p.sum() + q.sum()
    return 1.0 if den == 0 else float(2.0 * np.sum(p * q) / den)


def combined_loss(p, p_hat, params: LossParams = LossParams()) -> float:
    """Weighted mean of the two losses, scaled by the sample weight."""
    w1, w2 = params.weights
    l1 = balanced_bce(p, p_hat, params.beta, params.epsilon)
    l2 = tversky(p, p_hat, params.beta)
    return params.sample_weight * (w1 * l1 + w2 * l2) / (w1 + w2)
