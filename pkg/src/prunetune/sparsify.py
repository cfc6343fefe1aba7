"""Learnable channel mask and the low-rank sparsification transforms.

One ``UnifiedMask`` is shared by every ``HybridSparsifier`` in the model so
the same hidden channels are attenuated everywhere, which is what makes the
final structural slice consistent across residual connections. The mask's
proxy weights pass through a sigmoid gate whose temperature sharpens on a
step schedule until the gate is effectively binary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError


@dataclass
class UnifiedMask:
    """Trainable proxy weights plus the gate schedule state.

    ``w`` holds one proxy weight per hidden channel, initialized to zero so
    the gate starts at exactly 1 everywhere. ``n_target`` is the number of
    channels that should remain active after training.
    """

    w: Tensor
    s0: int
    eps_temp: float
    n_target: int
    current_step: int = 0

    def __post_init__(self):
        d = self.w.shape[0]
        if self.s0 < 2:
            raise ConfigError(f"mask milestone s0 must be >= 2, got {self.s0}")
        if not (0 < self.n_target <= d):
            raise ConfigError(f"n_target must be in (0, {d}], got {self.n_target}")
        if self.eps_temp <= 0:
            raise ConfigError("eps_temp must be positive")

    @property
    def width(self) -> int:
        return self.w.shape[0]

    @staticmethod
    def create(d: int, s0: int, n_target: int, eps_temp: float = 1e-3, dtype=None) -> "UnifiedMask":
        w = Tensor(np.zeros(d), dtype=dtype or ad.DEFAULT_DTYPE, requires_grad=True)
        return UnifiedMask(w=w, s0=s0, eps_temp=eps_temp, n_target=n_target)


@dataclass
class BinaryMask:
    """Hard channel selection: sorted indices of the kept channels."""

    kept: list[int]
    d: int

    def __post_init__(self):
        if len(self.kept) == 0:
            raise ConfigError("BinaryMask must keep at least one channel")
        if len(set(self.kept)) != len(self.kept):
            raise ConfigError("BinaryMask indices must be unique")
        if min(self.kept) < 0 or max(self.kept) >= self.d:
            raise ConfigError(f"BinaryMask indices must lie in [0, {self.d})")
        self.kept = sorted(self.kept)

    @property
    def d_kept(self) -> int:
        return len(self.kept)

    def snap_vector(self, dtype=None) -> np.ndarray:
        """0/1 vector of length d with ones at the kept indices."""
        v = np.zeros(self.d, dtype=dtype or ad.DEFAULT_DTYPE)
        v[self.kept] = 1.0
        return v


@dataclass
class HybridSparsifier:
    """Low-rank-plus-identity channel transform gated by the shared mask.

    Applies M * (L1 @ diag(v) @ L0 + I) to the last axis without ever
    materializing the dense d*d matrix. ``v`` starts at zero so the transform
    is exactly the identity at initialization.
    """

    l0: Tensor  # (r, d)
    v: Tensor   # (r,)
    l1: Tensor  # (d, r)
    mask: UnifiedMask = field(repr=False)

    def __post_init__(self):
        r, d = self.l0.shape
        if r < 1:
            raise ConfigError("sparsifier rank must be >= 1")
        # 2*d*r + r parameters only undercut the dense d*d transform for
        # r < d/2; equality is tolerated so degenerate widths stay testable
        if 2 * r > d:
            raise ConfigError(f"sparsifier rank {r} must be <= d/2 = {d / 2:g}")
        if self.l1.shape != (d, r) or self.v.shape != (r,):
            raise DimensionError(
                f"sparsifier factor shapes disagree: l0 {self.l0.shape}, v {self.v.shape}, l1 {self.l1.shape}")
        if self.mask.width != d:
            raise DimensionError(f"mask width {self.mask.width} does not match sparsifier width {d}")

    @property
    def rank(self) -> int:
        return self.l0.shape[0]

    @property
    def width(self) -> int:
        return self.l0.shape[1]

    @property
    def n_params(self) -> int:
        """Trainable parameter count: 2*d*r + r (the shared mask not included)."""
        return self.l0.data.size + self.v.data.size + self.l1.data.size

    @staticmethod
    def create(d: int, rank: int, mask: UnifiedMask, rng: np.random.Generator, dtype=None) -> "HybridSparsifier":
        dtype = dtype or ad.DEFAULT_DTYPE
        std = 1.0 / math.sqrt(d)
        return HybridSparsifier(
            l0=Tensor(rng.normal(0.0, std, size=(rank, d)), dtype=dtype, requires_grad=True),
            v=Tensor(np.zeros(rank), dtype=dtype, requires_grad=True),
            l1=Tensor(rng.normal(0.0, std, size=(d, rank)), dtype=dtype, requires_grad=True),
            mask=mask,
        )


def temperature(s: int, s0: int, eps_temp: float) -> float:
    """Inverse-temperature schedule for the gate.

    0 at step 0 (limiting value, so the gate maps everything to 1), then
    1/(1 - ln(s)/ln(s0)) until the milestone s0, and 1/eps_temp afterwards.
    """
    if s0 <= 1:
        raise ConfigError(f"milestone s0 must be > 1, got {s0}")
    if s < 0:
        raise ConfigError(f"step must be >= 0, got {s}")
    if s == 0:
        return 0.0
    if s >= s0:
        return 1.0 / eps_temp
    return 1.0 / (1.0 - math.log(s) / math.log(s0))


def offset(s: int, s0: int) -> float:
    """Gate offset: decays linearly from 0.5 to 0 at s0/2, then stays 0."""
    if s < s0 / 2:
        return -s / s0 + 0.5
    return 0.0


def gate(mask: UnifiedMask, s: int) -> Tensor:
    """Differentiable gate values sigmoid(tau(s) * w) + beta(s).

    tau and beta are constants of the step; gradients flow only into the
    proxy weights.
    """
    tau = temperature(s, mask.s0, mask.eps_temp)
    beta = offset(s, mask.s0)
    return ad.add_scalar(ad.sigmoid(ad.scale(mask.w, tau)), beta)


def hsm_forward(hsm: HybridSparsifier, h: Tensor, s: int, gate_values: Tensor | None = None) -> Tensor:
    """Apply the gated transform to activations with last axis d.

    Computes M * (L1 @ (v * (L0 @ h)) + h), i.e. (M * D) @ h with
    D = L1 diag(v) L0 + I, in factored form.
    """
    if h.shape[-1] != hsm.width:
        raise DimensionError(f"hsm_forward: activation last axis {h.shape} does not match width {hsm.width}")
    if gate_values is None:
        gate_values = gate(hsm.mask, s)
    low = ad.matmul(h, ad.transpose(hsm.l0))           # (..., r)
    low = ad.mul(low, hsm.v)
    delta = ad.matmul(low, ad.transpose(hsm.l1))       # (..., d)
    return ad.mul(ad.add(delta, h), gate_values)


def identity_loss(hsms) -> Tensor:
    """Sum of Frobenius distances of L0 L0^T and L1^T L1 from the identity.

    Pushes L0's rows and L1's columns toward orthonormality, leaving the
    scaling entirely to v.
    """
    total = None
    for hsm in hsms:
        eye = Tensor(np.eye(hsm.rank, dtype=hsm.l0.data.dtype))
        g0 = ad.sub(ad.matmul(hsm.l0, ad.transpose(hsm.l0)), eye)
        g1 = ad.sub(ad.matmul(ad.transpose(hsm.l1), hsm.l1), eye)
        term = ad.add(ad.sqrt(ad.sum_all(ad.mul(g0, g0))), ad.sqrt(ad.sum_all(ad.mul(g1, g1))))
        total = term if total is None else ad.add(total, term)
    if total is None:
        return Tensor(np.asarray(0.0, dtype=ad.DEFAULT_DTYPE))
    return total


def active_count(mask: UnifiedMask) -> int:
    """Number of strictly positive proxy weights."""
    return int(np.count_nonzero(mask.w.data > 0))


def active_loss(mask: UnifiedMask, s: int, smooth: bool = False) -> Tensor:
    """|n_target - #(w > 0)| with a straight-through backward.

    The forward value is the true indicator count deviation; the backward
    pass differentiates the smooth surrogate |n_target - sum(sigmoid(tau*w))|
    at the current temperature. With ``smooth=True`` the surrogate is used
    for the forward value as well (finite-difference checkable).
    """
    tau = temperature(s, mask.s0, mask.eps_temp)
    soft = ad.absval(ad.add_scalar(ad.scale(ad.sum_all(ad.sigmoid(ad.scale(mask.w, tau))), -1.0),
                                   float(mask.n_target)))
    if smooth:
        return soft
    hard = abs(mask.n_target - active_count(mask))
    # forward equals the indicator count; backward flows through the surrogate
    return ad.add_scalar(soft, hard - soft.item())


def finalize_mask(mask: UnifiedMask) -> tuple[BinaryMask, int]:
    """Snap the mask to a hard 0/1 selection of exactly n_target channels.

    Keeps the n_target largest proxy weights, ties broken toward lower
    indices. Returns the selection and the number of gated values that
    disagree with the snap by more than 0.01 at the current step.
    """
    w = mask.w.data
    order = np.argsort(-w, kind="stable")
    kept = np.sort(order[: mask.n_target])
    bmask = BinaryMask(kept=[int(i) for i in kept], d=mask.width)
    gated = gate(mask, mask.current_step).data
    disagreements = int(np.count_nonzero(np.abs(gated - bmask.snap_vector(dtype=gated.dtype)) > 0.01))
    return bmask, disagreements
