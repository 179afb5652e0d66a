"""Segmentation losses: balanced cross entropy, Tversky, the hybrid of
the two, and the adaptive logarithmic wrapper.

Sign convention: the balanced cross entropy expression is negated so
that every quantity here is a non-negative loss to minimize. Reductions:
cross entropy averages over all pixels and the batch at once; the
Tversky terms are soft counts summed over the whole batch for a single
foreground class. Predictions are clamped to [1e-7, 1 - 1e-7] inside
logarithms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, absolute, clamp, log, tmean, tsum

__all__ = ["LossConfig", "bace", "tversky_index", "tversky_loss", "hybrid_loss",
           "all_wrap", "segmentation_loss", "CLAMP_EPS"]

CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    """Hyperparameters of the hybrid adaptive logarithmic loss.

    ``c`` is always derived from (gamma, omega_all, epsilon); it is what
    makes the two wrapper branches meet at |HL| = gamma.
    """

    k: float = 0.5
    omega_bace: float = 0.7
    alpha: float = 0.3
    beta: float = 0.7
    gamma: float = 0.1
    omega_all: float = 10.0
    epsilon: float = 0.5
    wrapper: str = "all"

    def __post_init__(self):
        if not 0.0 < self.k < 1.0:
            raise ValueError("k must lie in (0, 1)")
        if not 0.0 < self.omega_bace < 1.0:
            raise ValueError("omega_bace must lie in (0, 1)")
        if self.alpha <= 0.0 or self.beta <= 0.0:
            raise ValueError("alpha and beta must be positive")
        if self.gamma <= 0.0 or self.omega_all <= 0.0 or self.epsilon <= 0.0:
            raise ValueError("gamma, omega_all and epsilon must be positive")
        if self.wrapper not in ("all", "none"):
            raise ValueError("wrapper must be 'all' or 'none'")

    @property
    def c(self) -> float:
        return self.gamma - self.omega_all * math.log1p(self.gamma / self.epsilon)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def bace(target, pred: Tensor, omega: float = 0.7) -> Tensor:
    """Negated mean of omega*p*log(p^) + (1-omega)*(1-p)*log(1-p^)."""
    p = _as_tensor(target)
    ph = clamp(pred, CLAMP_EPS, 1.0 - CLAMP_EPS)
    pos = p * log(ph) * omega
    neg = (1.0 - p) * log(1.0 - ph) * (1.0 - omega)
    return -tmean(pos + neg)


def tversky_index(target, pred: Tensor, alpha: float = 0.3, beta: float = 0.7) -> Tensor:
    """Soft Tversky index over the whole batch, single foreground class.

    Soft counts: TP = sum(p*p^), FP = sum((1-p)*p^), FN = sum(p*(1-p^)).
    An empty target with an empty prediction scores 1 (perfect agreement).
    """
    p = _as_tensor(target)
    tp = tsum(p * pred)
    fp = tsum((1.0 - p) * pred)
    fn = tsum(p * (1.0 - pred))
    denom = tp + fp * alpha + fn * beta
    if float(denom.data) == 0.0:
        return Tensor(np.asarray(1.0))
    return tp / denom


def tversky_loss(target, pred: Tensor, alpha: float = 0.3, beta: float = 0.7) -> Tensor:
    return 1.0 - tversky_index(target, pred, alpha, beta)


def hybrid_loss(target, pred: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """k * BaCE + (1 - k) * TverskyLoss."""
    return bace(target, pred, cfg.omega_bace) * cfg.k + \
        tversky_loss(target, pred, cfg.alpha, cfg.beta) * (1.0 - cfg.k)


def all_wrap(hl, cfg: LossConfig = LossConfig()) -> Tensor:
    """Adaptive logarithmic wrapper.

    omega*ln(1 + |HL|/eps) while |HL| <= gamma, else |HL| - C with
    C = gamma - omega*ln(1 + gamma/eps); continuous at the branch point
    by construction. The log branch supplies the (sub)gradient at
    |HL| = gamma.
    """
    h = absolute(_as_tensor(hl) if not isinstance(hl, Tensor) else hl)
    if float(h.data) <= cfg.gamma:
        return log(h * (1.0 / cfg.epsilon) + 1.0) * cfg.omega_all
    return h - cfg.c


def segmentation_loss(target, pred: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """The training objective: hybrid loss, wrapped when cfg.wrapper == 'all'."""
    hl = hybrid_loss(target, pred, cfg)
    if cfg.wrapper == "all":
        return all_wrap(hl, cfg)
    return hl
