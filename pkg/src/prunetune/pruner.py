"""Inference-time compression: fold adapters and sparsifiers into the base
weights, then physically remove the masked hidden channels.

The slice touches every tensor with a hidden-dimension axis: embedding
columns, attention input columns, merged output rows, FFN input columns and
merged down-projection rows, the LM head input columns, and the norm gains.
Gains pick up a sqrt(d / d_kept) factor and the norm eps scales by d / d_kept
because removing exact-zero channels changes the mean-square denominator;
with both corrections the sliced model's logits match the masked model's up
to floating-point reassociation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError, LifecycleError
from .lora import merge_lora
from .model import DecoderBlock, ModelState, param_counts
from .sparsify import BinaryMask, HybridSparsifier, finalize_mask

REPORT_JSON_FIELDS = ("d", "d_kept", "ratio", "params_before", "params_after",
                      "snap_disagreements", "max_residual")


@dataclass
class PruneReport:
    d: int
    d_kept: int
    params_before: int
    params_after: int
    snap_disagreements: int
    per_layer: dict[str, tuple[int, int]] = field(default_factory=dict)
    max_residual: Optional[float] = None

    @property
    def ratio(self) -> float:
        return 1.0 - self.params_after / self.params_before

    def to_json(self) -> str:
        payload = {
            "d": self.d,
            "d_kept": self.d_kept,
            "ratio": self.ratio,
            "params_before": self.params_before,
            "params_after": self.params_after,
            "snap_disagreements": self.snap_disagreements,
            "max_residual": self.max_residual,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def merge_hsm(w_up: Tensor, hsm: HybridSparsifier, bmask: BinaryMask) -> Tensor:
    """Fold a sparsifier into its upstream weight (adapter already merged).

    Returns M_snap * ((L1 diag(v) L0 + I) @ W); rows of dropped channels are
    exactly zero. The dense d*d transform is never materialized.
    """
    if w_up.ndim != 2 or w_up.shape[0] != hsm.width:
        raise DimensionError(f"merge_hsm: weight {w_up.shape} does not match sparsifier width {hsm.width}")
    if bmask.d != hsm.width:
        raise DimensionError(f"merge_hsm: mask width {bmask.d} does not match sparsifier width {hsm.width}")
    w = w_up.data
    delta = hsm.l1.data @ (hsm.v.data[:, None] * (hsm.l0.data @ w))
    merged = w + delta
    snap = bmask.snap_vector(dtype=merged.dtype)
    merged *= snap[:, None]
    return Tensor(merged)


def rescale_norm_gain(gain: Tensor, bmask: BinaryMask) -> Tensor:
    """Slice the gain to the kept channels and scale by sqrt(d / d_kept).

    The factor compensates the mean-square denominator shrinking from d to
    d_kept terms when the exact-zero channels are removed.
    """
    factor = np.sqrt(bmask.d / bmask.d_kept)
    sliced = gain.data[bmask.kept] * gain.data.dtype.type(factor)
    return Tensor(sliced)


def merge_model(model: ModelState, bmask: BinaryMask) -> ModelState:
    """Fold adapters into all base weights and sparsifiers into wo/w_down.

    Returns a full-width model with no adapters, sparsifiers, or soft mask;
    the hard 0/1 mask is kept on the embedding path. The input model's
    adapters are consumed.
    """
    if model.pruned:
        raise LifecycleError("model is already pruned")
    if model.mask is None:
        raise LifecycleError("merge_model needs the training-time mask state")
    if bmask.d != model.config.d_model:
        raise DimensionError(f"mask width {bmask.d} does not match model width {model.config.d_model}")

    def fold(name: str, weight: Tensor) -> Tensor:
        adapter = model.adapters.get(name)
        if adapter is None or adapter.merged:
            return Tensor(weight.data.copy())
        return merge_lora(weight, adapter)

    blocks = []
    for i, blk in enumerate(model.blocks):
        if blk.hsm_attn is None or blk.hsm_ffn is None:
            raise LifecycleError(f"block {i} has no sparsifiers to merge")
        p = f"blocks.{i}."
        blocks.append(DecoderBlock(
            attn_gain=Tensor(blk.attn_gain.data.copy()),
            wq=fold(p + "wq", blk.wq),
            wk=fold(p + "wk", blk.wk),
            wv=fold(p + "wv", blk.wv),
            wo=merge_hsm(fold(p + "wo", blk.wo), blk.hsm_attn, bmask),
            ffn_gain=Tensor(blk.ffn_gain.data.copy()),
            w_up=fold(p + "w_up", blk.w_up),
            w_gate=fold(p + "w_gate", blk.w_gate),
            w_down=merge_hsm(fold(p + "w_down", blk.w_down), blk.hsm_ffn, bmask),
        ))
    return ModelState(
        config=replace(model.config),
        tok_emb=Tensor(model.tok_emb.data.copy()),
        pos_emb=Tensor(model.pos_emb.data.copy()),
        blocks=blocks,
        final_gain=Tensor(model.final_gain.data.copy()),
        lm_head=fold("lm_head", model.lm_head),
        embed_mask=bmask.snap_vector(dtype=model.dtype),
    )


def slice_model(model: ModelState, bmask: BinaryMask,
                snap_disagreements: int = 0) -> tuple[ModelState, PruneReport]:
    """Cut the masked hidden channels out of a merged model.

    Produces a dense decoder of hidden width d_kept whose attention inner
    width and FFN width are unchanged, plus the parameter-accounting report.
    """
    if model.pruned:
        raise LifecycleError("model is already pruned")
    if model.mask is not None or any(b.hsm_attn is not None or b.hsm_ffn is not None for b in model.blocks):
        raise LifecycleError("slice_model needs a merged model (sparsifiers still attached)")
    if any(not a.merged for a in model.adapters.values()):
        raise LifecycleError("slice_model needs adapters merged first")
    cfg = model.config
    if bmask.d != cfg.d_model:
        raise DimensionError(f"mask width {bmask.d} does not match model width {cfg.d_model}")

    kept = np.asarray(bmask.kept, dtype=np.int64)
    scale = bmask.d / bmask.d_kept
    new_cfg = replace(cfg, d_model=bmask.d_kept, d_attn=cfg.d_attn,
                      rms_eps=cfg.rms_eps * scale)

    before = param_counts(model)

    def cols(t: Tensor) -> Tensor:
        return Tensor(np.ascontiguousarray(t.data[:, kept]))

    def rows(t: Tensor) -> Tensor:
        return Tensor(np.ascontiguousarray(t.data[kept, :]))

    blocks = []
    for blk in model.blocks:
        blocks.append(DecoderBlock(
            attn_gain=rescale_norm_gain(blk.attn_gain, bmask),
            wq=cols(blk.wq), wk=cols(blk.wk), wv=cols(blk.wv),
            wo=rows(blk.wo),
            ffn_gain=rescale_norm_gain(blk.ffn_gain, bmask),
            w_up=cols(blk.w_up), w_gate=cols(blk.w_gate),
            w_down=rows(blk.w_down),
        ))
    pruned = ModelState(
        config=new_cfg,
        tok_emb=cols(model.tok_emb),
        pos_emb=cols(model.pos_emb),
        blocks=blocks,
        final_gain=rescale_norm_gain(model.final_gain, bmask),
        lm_head=cols(model.lm_head),
        pruned=True,
    )
    after = param_counts(pruned)
    report = PruneReport(
        d=bmask.d, d_kept=bmask.d_kept,
        params_before=sum(before.values()), params_after=sum(after.values()),
        snap_disagreements=snap_disagreements,
        per_layer={name: (before[name], after[name]) for name in before},
    )
    return pruned, report


def prune_model(model: ModelState, bmask: Optional[BinaryMask] = None
                ) -> tuple[ModelState, ModelState, PruneReport]:
    """Finalize, merge, and slice in one call.

    Returns (merged full-width model, pruned model, report). The merged model
    is the reference the pruned one must match.
    """
    disagreements = 0
    if bmask is None:
        if model.mask is None:
            raise LifecycleError("prune_model needs a mask or an explicit channel selection")
        bmask, disagreements = finalize_mask(model.mask)
    merged = merge_model(model, bmask)
    pruned, report = slice_model(merged, bmask, snap_disagreements=disagreements)
    return merged, pruned, report
