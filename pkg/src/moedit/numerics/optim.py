"""Adam with decoupled weight decay, operating in-place on parameter data."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericalError, Tensor


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamState:
    """First/second moment buffers aligned with a fixed parameter list."""

    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            step=0,
        )


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    cfg: AdamConfig,
) -> None:
    """One update; decay is decoupled (applied to weights, not gradients)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(
            f"adam_step: {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} state slots"
        )
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError("adam_step: non-finite gradient")
        if cfg.weight_decay:
            p.data -= p.data.dtype.type(cfg.lr * cfg.weight_decay) * p.data
        m += (1.0 - cfg.beta1) * (g - m)
        v += (1.0 - cfg.beta2) * (g * g - v)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.data.dtype)
