"""Adam with an exponential learning-rate schedule, and Grad-Norm weighting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergenceError

log = logging.getLogger(__name__)


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_rate: float = 0.95
    decay_steps: int = 3000
    decay: bool = True


def learning_rate(cfg: AdamConfig, t: int, scale: float = 1.0) -> float:
    """``lr * rate**(t / steps)`` (continuous), or constant when decay is off."""
    if not cfg.decay:
        return cfg.lr * scale
    return cfg.lr * scale * cfg.decay_rate ** (t / cfg.decay_steps)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr_scale: float = 1.0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.lr_scale)


def adam_step(cfg: AdamConfig, state: AdamState, theta: np.ndarray, grad: np.ndarray, term_norms=None):
    """Update ``theta`` in place; returns the learning rate that was used."""
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(
            f"non-finite gradient at step {state.t}", iteration=state.t, term_norms=term_norms
        )
    lr = learning_rate(cfg, state.t, state.lr_scale)
    state.t += 1
    state.m *= cfg.beta1
    state.m += (1.0 - cfg.beta1) * grad
    state.v *= cfg.beta2
    state.v += (1.0 - cfg.beta2) * grad * grad
    mhat = state.m / (1.0 - cfg.beta1**state.t)
    vhat = state.v / (1.0 - cfg.beta2**state.t)
    theta -= lr * mhat / (np.sqrt(vhat) + cfg.eps)
    return lr


@dataclass
class GradNormConfig:
    enabled: bool = True
    momentum: float = 0.9
    update_every: int = 1000


def grad_norm_targets(norms):
    """``lambda_hat_i = sum_j g_j / (n g_i)`` over terms with non-zero norm.

    Zero-norm entries come back as ``nan`` (caller keeps the old weight).
    """
    g = np.asarray(norms, dtype=np.float64)
    live = g > 0
    out = np.full(g.shape, np.nan)
    if live.any():
        out[live] = g[live].sum() / (live.sum() * g[live])
    return out


def grad_norm_update(lambdas, norms, momentum=0.9):
    """Blend current weights towards the balancing targets."""
    lam = np.asarray(lambdas, dtype=np.float64)
    g = np.asarray(norms, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient norm in grad-norm update", term_norms=dict(enumerate(g)))
    if not np.any(g > 0):
        log.warning("all loss-term gradient norms are zero; keeping weights")
        return lam.copy()
    target = grad_norm_targets(g)
    return np.where(np.isnan(target), lam, momentum * lam + (1.0 - momentum) * np.nan_to_num(target))
