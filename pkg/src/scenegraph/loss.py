"""Node-priority-sensitive focal loss and the fixed-gamma focal baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .linalg import as_mat, log_softmax

GAMMA_CAP = 2.0
P_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    mu: float = 4.0
    gamma_cap: float = GAMMA_CAP

    def __post_init__(self):
        if not self.mu > 0:
            raise DomainError(f"mu must be positive, got {self.mu}")
        if self.gamma_cap != GAMMA_CAP:
            raise DomainError(f"gamma cap is fixed at {GAMMA_CAP}")


def gamma_map(theta: float, mu: float = 4.0) -> float:
    """Focusing parameter for a node of priority ``theta``:
    ``min(2, -(1 - theta)**mu * ln(theta))``. ``theta == 0`` maps to the cap."""
    if not 0.0 <= theta <= 1.0:
        raise DomainError(f"node priority must lie in [0, 1], got {theta}")
    if theta == 0.0:
        return GAMMA_CAP
    return min(GAMMA_CAP, -((1.0 - theta) ** mu) * math.log(theta))


def focal_loss(p: float, gamma_fixed: float) -> float:
    if not 0.0 < p <= 1.0:
        raise DomainError(f"probability must lie in (0, 1], got {p}")
    return -((1.0 - p) ** gamma_fixed) * math.log(p)


def nps_loss(p: float, theta: float, config: LossConfig = LossConfig()) -> float:
    return focal_loss(p, gamma_map(theta, config.mu))


def _focal_dp(p: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """d/dp of ``-(1-p)^gamma log p``."""
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        first = np.where((gamma > 0) & (q > 0), gamma * q ** (gamma - 1.0) * np.log(p), 0.0)
    return first - q ** gamma / p


def nps_loss_batch(logits, labels, thetas, config: LossConfig = LossConfig()):
    """Mean NPS loss over nodes and its gradient w.r.t. the class logits.

    ``logits`` is n x O, ``labels`` the ground-truth classes, ``thetas`` the
    node priorities. gamma is a per-node constant: it depends on ground truth
    only. Probabilities are floored at 1e-12 before the log.
    """
    logits = as_mat(logits)
    labels = np.asarray(labels, dtype=int)
    thetas = np.asarray(thetas, dtype=np.float64)
    n = logits.shape[0]
    if labels.shape != (n,) or thetas.shape != (n,):
        raise DimensionError(
            f"nps_loss_batch: {n} logit rows, {labels.shape[0]} labels, {thetas.shape[0]} priorities")
    gammas = np.array([gamma_map(float(t), config.mu) for t in thetas])
    probs = np.exp(log_softmax(logits))
    p = np.maximum(probs[np.arange(n), labels], P_FLOOR)
    losses = -((1.0 - p) ** gammas) * np.log(p)
    dL_dp = _focal_dp(p, gammas) / n
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    dlogits = (dL_dp * p)[:, None] * (onehot - probs)
    return float(losses.mean()), dlogits


def cross_entropy_batch(logits, labels):
    """Mean softmax cross-entropy and its logit gradient."""
    logits = as_mat(logits)
    labels = np.asarray(labels, dtype=int)
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n
