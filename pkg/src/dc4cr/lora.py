"""Low-rank adapters: effective weight = base + (alpha / r) * A @ B.

Convolution kernels (F, C, k, k) are adapted as (F, C*k*k) matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

INIT_STD = 0.02


@dataclass
class LoraAdapter:
    base_shape: tuple  # (m, n) matrix view of the adapted weight
    A: Tensor
    B: Tensor
    r: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def delta(self) -> np.ndarray:
        return self.scaling * (self.A.data @ self.B.data)

    def parameters(self) -> list:
        return [self.A, self.B]


def matrix_shape(shape) -> tuple:
    shape = tuple(shape)
    return shape if len(shape) == 2 else (shape[0], int(np.prod(shape[1:])))


def new_adapter(base_shape, r: int, alpha: float, seed: int) -> LoraAdapter:
    m, n = matrix_shape(base_shape)
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} outside [1, {min(m, n)}] for base shape {(m, n)}")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    rng = np.random.default_rng(seed)
    A = Tensor(rng.normal(0.0, INIT_STD, (m, r)), requires_grad=True)
    B = Tensor(np.zeros((r, n)), requires_grad=True)
    return LoraAdapter((m, n), A, B, r, float(alpha))


def _check(base_shape, adapter: LoraAdapter) -> None:
    if matrix_shape(base_shape) != tuple(adapter.base_shape):
        raise ShapeError(f"adapter shape {adapter.base_shape} does not match base {tuple(base_shape)}")


def effective_weight(base: Tensor, adapter: LoraAdapter) -> Tensor:
    """Differentiable in A and B only; the base tensor is treated as a constant."""
    _check(base.shape, adapter)
    delta = nx.matmul(adapter.A, adapter.B) * adapter.scaling
    if delta.shape != base.shape:
        delta = delta.reshape(base.shape)
    return nx.add(Tensor(base.data), delta)


def merge(base: Tensor, adapter: LoraAdapter) -> Tensor:
    _check(base.shape, adapter)
    return Tensor(base.data + adapter.delta().reshape(base.shape))


def unmerge(merged: Tensor, adapter: LoraAdapter) -> Tensor:
    _check(merged.shape, adapter)
    return Tensor(merged.data - adapter.delta().reshape(merged.shape))


def set_alpha(adapter: LoraAdapter, alpha: float) -> None:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    adapter.alpha = float(alpha)
