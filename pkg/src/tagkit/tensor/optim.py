"""Adam optimiser and parameter initialisers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Tensor, TensorError


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update (with bias correction) of every param holding a grad.

    Params without a gradient are treated as having a zero gradient.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise TensorError(f"adam shape mismatch for {name}: {g.shape} vs {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise TensorError(f"adam state mismatch for {name}")
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def orthogonal_blocks(rng: np.random.Generator, n_blocks: int, h: int) -> np.ndarray:
    """``n_blocks`` stacked h x h orthogonal matrices (QR of a Gaussian)."""
    mats = []
    for _ in range(n_blocks):
        q, r = np.linalg.qr(rng.standard_normal((h, h)))
        mats.append(q * np.sign(np.diag(r)))
    return np.concatenate(mats, axis=0)
