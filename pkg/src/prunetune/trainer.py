"""Fine-tuning loop that learns the channel mask while it trains.

Each step runs a masked forward pass, sums the instruction loss with the
active-channel and orthogonality regularizers, backpropagates, clips, and
applies Adam to the trainable parameters only (mask proxy weights, the
low-rank transform factors, adapter factors). Base weights never move. The
``lora`` method is the plain baseline: same loop, plain forward, instruction
loss only.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint, sparsify
from .autodiff import Tape, Tensor, add
from .data import Batch, Dataset
from .errors import ConfigError, NumericalError
from .model import ModelState, forward
from .sparsify import active_count, active_loss, gate, identity_loss, offset, temperature

METRICS_COLUMNS = ["step", "lr", "loss_total", "loss_instruct", "loss_active",
                   "loss_identity", "tau", "beta", "active_count", "wall_ms"]
MASK_TRACE_COLUMNS = ["step", "tau", "beta", "min_gate", "max_gate", "active_count"]


@dataclass
class TrainConfig:
    total_steps: int
    batch_size: int = 16
    seq_len: int = 64
    # paper-scale fine-tuning uses 5e-5; tiny models need a larger rate
    lr_max: float = 3e-4
    s0: Optional[int] = None  # gate milestone; defaults to total_steps // 3
    target_prune_ratio: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    method: str = "pat"        # "pat" or "lora" (plain baseline)
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("batch_size and seq_len must be >= 1")
        if not (0.0 <= self.target_prune_ratio < 1.0):
            raise ConfigError(f"target_prune_ratio must be in [0, 1), got {self.target_prune_ratio}")
        if self.method not in ("pat", "lora"):
            raise ConfigError(f"unknown training method {self.method!r}")
        if self.s0 is None:
            self.s0 = self.total_steps // 3
        if self.s0 < 2:
            raise ConfigError(f"mask milestone s0 must be >= 2, got {self.s0}")

    def n_target(self, d_model: int) -> int:
        n = round((1.0 - self.target_prune_ratio) * d_model)
        if n < 1:
            raise ConfigError("target_prune_ratio leaves no channels")
        return n


def cosine_lr(t: int, total_steps: int, lr_max: float) -> float:
    """Cosine decay from lr_max at t=0 to 0 at t=total_steps."""
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


class Adam:
    """Adam with bias correction; operates on the tensors' grad arrays."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for (name, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(factor)
    return norm


def composite_loss(model: ModelState, batch: Batch, s: int,
                   method: str = "pat") -> tuple[Tensor, dict[str, float]]:
    """Total loss and its components for one batch at mask step ``s``.

    For the ``pat`` method: instruction loss (masked forward) plus the
    active-channel and orthogonality terms, summed unweighted. The baseline
    ``lora`` method is the instruction loss of the plain forward alone.
    """
    if batch.inputs.size == 0:
        raise ValueError("composite_loss: empty batch")
    from .autodiff import cross_entropy_logits  # local to keep module top lean

    if method == "pat":
        logits = forward(model, batch.inputs, mode="masked", step=s)
        instruct = cross_entropy_logits(logits, batch.targets, weights=batch.loss_mask)
        active = active_loss(model.mask, s)
        ident = identity_loss(model.sparsifiers())
        total = add(add(instruct, active), ident)
        components = {"instruct": instruct.item(), "active": active.item(),
                      "identity": ident.item()}
    else:
        logits = forward(model, batch.inputs, mode="plain")
        instruct = cross_entropy_logits(logits, batch.targets, weights=batch.loss_mask)
        total = instruct
        components = {"instruct": instruct.item(), "active": 0.0, "identity": 0.0}
    for name in ("instruct", "active", "identity"):
        if not math.isfinite(components[name]):
            raise NumericalError(f"non-finite {name} loss at step {s}")
    return total, components


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    mask_trace: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.metrics[-1]


class _CsvSink:
    def __init__(self, path: Path, columns: list[str]):
        self.columns = columns
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(columns)

    def write(self, row: dict):
        self._writer.writerow([_fmt(row[c]) for c in self.columns])

    def close(self):
        self._fh.close()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def train(model: ModelState, config: TrainConfig, dataset: Dataset,
          out_dir=None, quiet: bool = True) -> TrainResult:
    """Run the full tuning loop; returns per-step metrics.

    With ``out_dir`` set, writes metrics.csv and mask_trace.csv as it goes,
    plus periodic and final checkpoints.
    """
    if dataset.seq_len != config.seq_len:
        raise ConfigError(f"dataset seq_len {dataset.seq_len} does not match config seq_len {config.seq_len}")
    if dataset.vocab_size > model.config.vocab_size:
        raise ConfigError(f"dataset vocab {dataset.vocab_size} exceeds model vocab {model.config.vocab_size}")
    pat = config.method == "pat"
    if pat:
        if model.mask is None:
            raise ConfigError("pat training needs a model with mask state")
        expected = config.n_target(model.config.d_model)
        if model.mask.n_target != expected:
            raise ConfigError(f"mask n_target {model.mask.n_target} does not match configured ratio "
                              f"(expected {expected})")
        if model.mask.s0 != config.s0:
            raise ConfigError(f"mask milestone {model.mask.s0} does not match config s0 {config.s0}")

    params = model.trainable_params(include_sparsify=pat)
    opt = Adam(params)
    rng = np.random.default_rng(config.seed)
    result = TrainResult()

    metrics_sink = trace_sink = None
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_sink = _CsvSink(out / "metrics.csv", METRICS_COLUMNS)
        trace_sink = _CsvSink(out / "mask_trace.csv", MASK_TRACE_COLUMNS)

    try:
        for step in range(config.total_steps):
            t_start = time.perf_counter()
            batch = dataset.sample_batch(rng, config.batch_size)
            for _, p in params:
                p.zero_grad()
            with Tape() as tape:
                total, components = composite_loss(model, batch, step, config.method)
                tape.backward(total)
            clip_global_norm(params, config.grad_clip)
            lr = cosine_lr(step, config.total_steps, config.lr_max)
            opt.step(lr)
            if pat:
                model.mask.current_step = step + 1

            wall_ms = (time.perf_counter() - t_start) * 1e3
            if pat:
                tau = temperature(step, model.mask.s0, model.mask.eps_temp)
                beta = offset(step, model.mask.s0)
                count = active_count(model.mask)
                gates = gate(model.mask, step).data
                trace_row = {"step": step, "tau": tau, "beta": beta,
                             "min_gate": float(gates.min()), "max_gate": float(gates.max()),
                             "active_count": count}
                result.mask_trace.append(trace_row)
                if trace_sink:
                    trace_sink.write(trace_row)
            else:
                tau, beta, count = 0.0, 0.0, 0
            row = {"step": step, "lr": lr,
                   "loss_total": total.item(),
                   "loss_instruct": components["instruct"],
                   "loss_active": components["active"],
                   "loss_identity": components["identity"],
                   "tau": tau, "beta": beta, "active_count": count,
                   "wall_ms": wall_ms}
            result.metrics.append(row)
            if metrics_sink:
                metrics_sink.write(row)
            if not quiet and (step % 50 == 0 or step == config.total_steps - 1):
                print(f"step {step:5d} loss {row['loss_total']:.4f} "
                      f"(instruct {row['loss_instruct']:.4f}) active {count}")
            if out is not None and config.checkpoint_every > 0 and (step + 1) % config.checkpoint_every == 0 \
                    and step + 1 < config.total_steps:
                checkpoint.save_model(model, out / f"ckpt_step{step + 1:06d}")
    finally:
        if metrics_sink:
            metrics_sink.close()
        if trace_sink:
            trace_sink.close()

    if out is not None:
        checkpoint.save_model(model, out / "ckpt_final")
    return result


def replay_mask_trace(mask: sparsify.UnifiedMask, upto: Optional[int] = None) -> list[dict]:
    """Schedule table for steps 0..upto with the mask's current proxy weights."""
    last = mask.current_step if upto is None else upto
    rows = []
    for s in range(last + 1):
        gates = gate(mask, s).data
        rows.append({"step": s,
                     "tau": temperature(s, mask.s0, mask.eps_temp),
                     "beta": offset(s, mask.s0),
                     "min_gate": float(gates.min()),
                     "max_gate": float(gates.max()),
                     "active_count": active_count(mask)})
    return rows
