"""Adam with bias-corrected moments; updates are in-place and deterministic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["AdamConfig", "Adam", "adam_step"]


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected update of a single array, in place (t is 1-based)."""
    if grad.shape != param.shape:
        raise ValueError(f"grad shape {grad.shape} != param shape {param.shape}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Moment state for a named parameter set."""

    def __init__(self, named_params: dict, cfg: AdamConfig = AdamConfig()):
        self.params = dict(named_params)
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float | None = None) -> None:
        """Apply one update; parameters with no gradient see a zero gradient."""
        self.t += 1
        lr = self.cfg.lr if lr is None else lr
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p.data, grad, self.m[name], self.v[name], self.t,
                      lr, self.cfg.beta1, self.cfg.beta2, self.cfg.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict, t: int) -> None:
        self.t = int(t)
        for k in self.m:
            self.m[k] = np.asarray(arrays[f"m/{k}"], dtype=np.float64).copy()
            self.v[k] = np.asarray(arrays[f"v/{k}"], dtype=np.float64).copy()
