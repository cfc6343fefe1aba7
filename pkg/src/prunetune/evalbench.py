"""Evaluation and timing: perplexity, task accuracy, the masked-vs-pruned
equivalence check, and CPU forward-pass micro-benchmarks."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import ConfigError
from .model import ModelState, forward

EQUIVALENCE_TOLERANCE = 1e-4  # 32-bit logits
BENCH_COLUMNS = ["model_id", "d", "d_kept", "batch", "seq", "mean_ms", "std_ms",
                 "params", "alloc_bytes"]


def _inference_mode(model: ModelState, mode: str) -> str:
    if mode != "auto":
        return mode
    return "masked" if (model.mask is not None and not model.pruned) else "plain"


def perplexity(model: ModelState, dataset: Dataset, mode: str = "auto",
               batch_size: int = 32, held: bool = True) -> float:
    """exp(mean next-token cross-entropy) over the dataset's loss positions."""
    mode = _inference_mode(model, mode)
    total_nll = 0.0
    total_w = 0.0
    seen = False
    for batch in dataset.eval_batches(batch_size, held=held):
        seen = True
        logits = forward(model, batch.inputs, mode=mode).data.astype(np.float64)
        flat = logits.reshape(-1, logits.shape[-1])
        t = batch.targets.reshape(-1)
        w = batch.loss_mask.reshape(-1)
        m = flat.max(axis=-1)
        lse = m + np.log(np.exp(flat - m[:, None]).sum(axis=-1))
        nll = lse - flat[np.arange(len(t)), t]
        total_nll += float((nll * w).sum())
        total_w += float(w.sum())
    if not seen or total_w == 0:
        raise ValueError("perplexity: empty corpus")
    return math.exp(total_nll / total_w)


def exact_match(model: ModelState, dataset: Dataset, mode: str = "auto",
                batch_size: int = 32, held: bool = True) -> float:
    """Fraction of loss positions where the argmax prediction is correct."""
    mode = _inference_mode(model, mode)
    hits = 0
    total = 0
    for batch in dataset.eval_batches(batch_size, held=held):
        logits = forward(model, batch.inputs, mode=mode).data
        pred = logits.argmax(axis=-1)
        sel = batch.loss_mask > 0
        hits += int((pred[sel] == batch.targets[sel]).sum())
        total += int(sel.sum())
    if total == 0:
        raise ValueError("exact_match: no scored positions")
    return hits / total


def verify_equivalence(merged: ModelState, pruned: ModelState,
                       n_inputs: int = 32, seed: int = 0,
                       seq_len: int | None = None) -> float:
    """Max L-inf logit difference between the masked and the sliced model
    over random token sequences. Deterministic in the seed."""
    if merged.config.vocab_size != pruned.config.vocab_size:
        raise ConfigError("verify_equivalence: vocabulary sizes differ")
    if merged.config.max_seq_len != pruned.config.max_seq_len:
        raise ConfigError("verify_equivalence: max sequence lengths differ")
    rng = np.random.default_rng(seed)
    t = seq_len or min(merged.config.max_seq_len, 64)
    residual = 0.0
    for _ in range(n_inputs):
        tokens = rng.integers(0, merged.config.vocab_size, size=(1, t))
        a = forward(merged, tokens, mode="plain").data.astype(np.float64)
        b = forward(pruned, tokens, mode="plain").data.astype(np.float64)
        residual = max(residual, float(np.abs(a - b).max()))
    return residual


@dataclass
class BenchResult:
    model_id: str
    batch: int
    seq: int
    mean_ms: float
    std_ms: float
    median_ms: float
    params: int
    alloc_bytes: int


def model_alloc_bytes(model: ModelState) -> int:
    """Bytes held by every tensor attached to the model."""
    total = sum(t.data.nbytes for _, t in model.base_tensors())
    if model.mask is not None:
        total += model.mask.w.data.nbytes
    for hsm in model.sparsifiers():
        total += hsm.l0.data.nbytes + hsm.v.data.nbytes + hsm.l1.data.nbytes
    for adapter in model.adapters.values():
        if not adapter.merged:
            total += adapter.a.data.nbytes + adapter.b.data.nbytes
    return total


def bench_forward(model: ModelState, batch_sizes, seq_len: int, reps: int = 9,
                  warmup: int = 2, seed: int = 0, model_id: str = "model") -> list[BenchResult]:
    """Wall-time the plain forward pass; median-of-reps is the headline number."""
    if reps < 5:
        raise ConfigError(f"bench needs at least 5 timed reps, got {reps}")
    if warmup < 2:
        raise ConfigError(f"bench needs at least 2 warmup reps, got {warmup}")
    from .model import n_params
    rng = np.random.default_rng(seed)
    params = n_params(model)
    alloc = model_alloc_bytes(model)
    results = []
    for batch in batch_sizes:
        tokens = rng.integers(0, model.config.vocab_size, size=(batch, seq_len))
        for _ in range(warmup):
            forward(model, tokens, mode="plain")
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            forward(model, tokens, mode="plain")
            times.append((time.perf_counter() - t0) * 1e3)
        results.append(BenchResult(
            model_id=model_id, batch=int(batch), seq=int(seq_len),
            mean_ms=statistics.fmean(times),
            std_ms=statistics.pstdev(times),
            median_ms=statistics.median(times),
            params=params, alloc_bytes=alloc,
        ))
    return results


def speedup(base: BenchResult, other: BenchResult) -> float:
    """t_base / t_other on the median wall time."""
    return base.median_ms / other.median_ms


def append_bench_csv(path, results: list[BenchResult], d: int, d_kept: int) -> None:
    path = Path(path)
    new_file = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(BENCH_COLUMNS)
        for r in results:
            writer.writerow([r.model_id, d, d_kept, r.batch, r.seq,
                             repr(r.mean_ms), repr(r.std_ms), r.params, r.alloc_bytes])
