"""Central finite-difference oracle for the reverse-mode kernels."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import core as tc
from .core import Tensor


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


ABS_FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """Max abs difference over the larger gradient's max magnitude.

    Gradients smaller than ``floor`` overall (e.g. a bias feeding batch norm,
    whose true gradient is exactly zero) are compared against the floor instead.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: dict[str, np.ndarray], seed: int = 0,
                    eps: float = 1e-5) -> dict[str, float]:
    """Relative error per input of ``fn(**tensors)`` contracted with a fixed random weight.

    A scalar output is used as-is.  ``inputs`` arrays are copied.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    out_shape = fn(**{k: Tensor(v) for k, v in arrays.items()}).shape
    weight = np.random.default_rng(seed).normal(size=out_shape) if out_shape else 1.0

    def loss_value() -> float:
        with tc.no_grad():
            out = fn(**{k: Tensor(v) for k, v in arrays.items()})
        return float((out.data * weight).sum())

    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    out = fn(**tensors)
    loss = out if out.ndim == 0 else (out * weight).sum()
    tc.backward(loss)
    errs = {}
    for k, v in arrays.items():
        g = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(v)
        errs[k] = rel_error(g, numeric_grad(loss_value, v, eps))
    return errs
