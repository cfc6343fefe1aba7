"""Low-rank adapters: trainable deltas on frozen linear layers.

Each adapter contributes (alpha / rank) * B @ A on top of its base weight.
B starts at zero so a fresh adapter is a no-op; after training the delta can
be merged into the base weight and the adapter discarded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, LifecycleError


@dataclass
class LoraAdapter:
    a: Tensor  # (rank, d_in)
    b: Tensor  # (d_out, rank)
    alpha: float
    merged: bool = False

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[0] != self.b.shape[1]:
            raise DimensionError(f"adapter factor shapes disagree: a {self.a.shape}, b {self.b.shape}")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def n_params(self) -> int:
        return self.a.data.size + self.b.data.size

    @staticmethod
    def create(d_out: int, d_in: int, rank: int, rng: np.random.Generator,
               alpha: float | None = None, dtype=None) -> "LoraAdapter":
        if rank < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {rank}")
        dtype = dtype or ad.DEFAULT_DTYPE
        return LoraAdapter(
            a=Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(rank, d_in)),
                     dtype=dtype, requires_grad=True),
            b=Tensor(np.zeros((d_out, rank)), dtype=dtype, requires_grad=True),
            alpha=float(alpha) if alpha is not None else 2.0 * rank,
        )


def lora_forward(weight: Tensor, adapter: LoraAdapter | None, x: Tensor) -> Tensor:
    """x @ W^T plus the adapter delta, without materializing B @ A.

    ``weight`` is (d_out, d_in) and ``x`` has last axis d_in. The base weight
    stays frozen; gradients reach only the adapter factors.
    """
    y = ad.matmul(x, ad.transpose(weight))
    if adapter is None or adapter.merged:
        return y
    delta = ad.matmul(ad.matmul(x, ad.transpose(adapter.a)), ad.transpose(adapter.b))
    return ad.add(y, ad.scale(delta, adapter.scaling))


def merge_lora(weight: Tensor, adapter: LoraAdapter) -> Tensor:
    """Fold the adapter delta into the base weight; the adapter is consumed."""
    if adapter.merged:
        raise LifecycleError("adapter already merged")
    if weight.shape != (adapter.b.shape[0], adapter.a.shape[1]):
        raise DimensionError(f"merge_lora: weight {weight.shape} does not match adapter delta")
    merged = weight.data + adapter.scaling * (adapter.b.data @ adapter.a.data)
    adapter.merged = True
    return Tensor(merged.astype(weight.data.dtype, copy=False))
