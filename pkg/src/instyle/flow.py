"""Rectified-flow path, target, loss and a deterministic Euler sampler.

Convention: ``t = 0`` is pure noise ``Z_1`` and ``t = 1`` is data ``Z_0``;
the path is ``Z_t = t*Z_0 + (1-t)*Z_1`` with constant velocity
``Z_0 - Z_1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass
class FlowBatch:
    Z_0: np.ndarray
    Z_1: np.ndarray
    t: np.ndarray
    conditions: dict

    def __post_init__(self):
        if self.Z_0.shape != self.Z_1.shape:
            raise DimensionError(f"Z_0 {self.Z_0.shape} vs Z_1 {self.Z_1.shape}")


def _check_t(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    return t


def _per_sample(t: np.ndarray, like: np.ndarray) -> np.ndarray:
    # a vector of per-sample times broadcasts over the trailing token dims
    if t.ndim == 1 and like.ndim > 1 and t.shape[0] == like.shape[0]:
        return t.reshape((-1,) + (1,) * (like.ndim - 1))
    return t


def interpolate(Z_0, Z_1, t) -> np.ndarray:
    Z_0, Z_1 = np.asarray(Z_0), np.asarray(Z_1)
    if Z_0.shape != Z_1.shape:
        raise DimensionError(f"interpolate: {Z_0.shape} vs {Z_1.shape}")
    t = _per_sample(_check_t(t), Z_0)
    if np.all(t == 1):
        return Z_0.copy()
    if np.all(t == 0):
        return Z_1.copy()
    return (t * Z_0 + (1 - t) * Z_1).astype(Z_0.dtype)


def flow_target(Z_0, Z_1) -> np.ndarray:
    Z_0, Z_1 = np.asarray(Z_0), np.asarray(Z_1)
    if Z_0.shape != Z_1.shape:
        raise DimensionError(f"flow_target: {Z_0.shape} vs {Z_1.shape}")
    return Z_0 - Z_1


def flow_loss(v_pred: Tensor, v_star) -> Tensor:
    """Mean squared error over every element of the batch."""
    v_pred = ad.as_tensor(v_pred)
    if tuple(v_pred.shape) != tuple(np.shape(v_star)):
        raise DimensionError(f"flow_loss: {v_pred.shape} vs {np.shape(v_star)}")
    return ad.mse(v_pred, v_star)


def sample_noise(shape, seed, dtype=np.float32) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


def euler_sample(model: Callable, conditions, steps: int, seed, shape=None, Z_1=None) -> np.ndarray:
    """Integrate ``dZ/dt = model(Z, conditions, t)`` from t=0 to t=1.

    ``model`` returns a velocity array (or Tensor) with the shape of ``Z``.
    Noise comes from ``seed`` unless ``Z_1`` is given explicitly. With an
    object array of ``Fraction`` noise the step grid is rational too, so
    integration is exact.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if Z_1 is None:
        if shape is None:
            raise ValueError("either shape or Z_1 is required")
        Z_1 = sample_noise(shape, seed)
    z = np.array(Z_1, copy=True)
    exact = z.dtype == object
    dt = Fraction(1, steps) if exact else 1.0 / steps
    for k in range(steps):
        v = model(z, conditions, Fraction(k, steps) if exact else k / steps)
        v = v.data if isinstance(v, Tensor) else np.asarray(v)
        z = z + dt * v
    return z
