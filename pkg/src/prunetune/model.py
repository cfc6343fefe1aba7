"""Small decoder-only transformer with pre-norm attention and a gated FFN.

Residual-stream width (``d_model``) and attention inner width (``d_attn``)
are tracked separately: they coincide in a freshly initialized model, but
after structural slicing the stream shrinks while heads keep their original
size. Channel-sparsification hooks sit after the attention output projection
and the FFN down projection; a single mask vector is shared by all of them
and also gates the embedding sum, so a zeroed channel is exactly zero at
every point of the residual stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, LifecycleError
from .lora import LoraAdapter, lora_forward
from .sparsify import HybridSparsifier, UnifiedMask, gate, hsm_forward

LINEAR_NAMES = ("wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down")


@dataclass
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    seed: int = 0
    d_attn: Optional[int] = None  # attention inner width; d_model unless sliced
    rms_eps: float = 1e-6

    def __post_init__(self):
        if self.d_attn is None:
            self.d_attn = self.d_model
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "max_seq_len", "d_attn"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model config field {name} must be >= 1")
        if self.d_attn % self.n_heads != 0:
            raise ConfigError(f"attention width {self.d_attn} not divisible by n_heads {self.n_heads}")
        if self.rms_eps <= 0:
            raise ConfigError("rms_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_attn // self.n_heads


@dataclass
class DecoderBlock:
    attn_gain: Tensor   # (d_model,)
    wq: Tensor          # (d_attn, d_model)
    wk: Tensor
    wv: Tensor
    wo: Tensor          # (d_model, d_attn)
    ffn_gain: Tensor    # (d_model,)
    w_up: Tensor        # (d_ff, d_model)
    w_gate: Tensor      # (d_ff, d_model)
    w_down: Tensor      # (d_model, d_ff)
    hsm_attn: Optional[HybridSparsifier] = None
    hsm_ffn: Optional[HybridSparsifier] = None


@dataclass
class ModelState:
    config: ModelConfig
    tok_emb: Tensor                 # (vocab, d_model)
    pos_emb: Tensor                 # (max_seq_len, d_model)
    blocks: list[DecoderBlock]
    final_gain: Tensor              # (d_model,)
    lm_head: Tensor                 # (vocab, d_model)
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)
    mask: Optional[UnifiedMask] = None
    embed_mask: Optional[np.ndarray] = None  # hard 0/1 vector on merged models
    pruned: bool = False

    @property
    def dtype(self):
        return self.tok_emb.data.dtype

    def base_tensors(self) -> list[tuple[str, Tensor]]:
        """Dense model weights in a fixed order (no adapters, no sparsifiers)."""
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, blk in enumerate(self.blocks):
            p = f"blocks.{i}."
            out.extend([
                (p + "attn_gain", blk.attn_gain),
                (p + "wq", blk.wq), (p + "wk", blk.wk), (p + "wv", blk.wv), (p + "wo", blk.wo),
                (p + "ffn_gain", blk.ffn_gain),
                (p + "w_up", blk.w_up), (p + "w_gate", blk.w_gate), (p + "w_down", blk.w_down),
            ])
        out.append(("final_gain", self.final_gain))
        out.append(("lm_head", self.lm_head))
        return out

    def linear_names(self) -> list[str]:
        names = []
        for i in range(len(self.blocks)):
            names.extend(f"blocks.{i}.{n}" for n in LINEAR_NAMES)
        names.append("lm_head")
        return names

    def trainable_params(self, include_sparsify: bool = True) -> list[tuple[str, Tensor]]:
        """Parameters the optimizer may touch; base weights are never listed."""
        out = []
        if include_sparsify and self.mask is not None:
            out.append(("mask.w", self.mask.w))
            for i, blk in enumerate(self.blocks):
                for tag, hsm in (("hsm_attn", blk.hsm_attn), ("hsm_ffn", blk.hsm_ffn)):
                    if hsm is not None:
                        p = f"blocks.{i}.{tag}."
                        out.extend([(p + "l0", hsm.l0), (p + "v", hsm.v), (p + "l1", hsm.l1)])
        for name in self.linear_names():
            adapter = self.adapters.get(name)
            if adapter is not None and not adapter.merged:
                out.append((f"lora.{name}.a", adapter.a))
                out.append((f"lora.{name}.b", adapter.b))
        return out

    def sparsifiers(self) -> list[HybridSparsifier]:
        out = []
        for blk in self.blocks:
            if blk.hsm_attn is not None:
                out.append(blk.hsm_attn)
            if blk.hsm_ffn is not None:
                out.append(blk.hsm_ffn)
        return out


def init_model(config: ModelConfig, seed: Optional[int] = None, *,
               r_lora: int = 8, lora_alpha: Optional[float] = None,
               r_hio: Optional[int] = None, s0: int = 1000,
               n_target: Optional[int] = None, eps_temp: float = 1e-3,
               dtype=None) -> ModelState:
    """Build a fresh model with adapters, sparsifiers, and the shared mask.

    Base weights are Normal(0, 0.02^2), gains are ones, adapter B factors and
    sparsifier scalings are zero, and mask proxy weights are zero, so the
    masked forward pass is exactly the plain one at step 0.
    """
    if config.d_attn != config.d_model:
        raise ConfigError("init_model expects d_attn == d_model; sliced models come from the pruner")
    dtype = dtype or ad.DEFAULT_DTYPE
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d, da, dff, v = config.d_model, config.d_attn, config.d_ff, config.vocab_size

    def w(shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), dtype=dtype)

    def ones(n):
        return Tensor(np.ones(n), dtype=dtype)

    blocks = []
    for _ in range(config.n_layers):
        blocks.append(DecoderBlock(
            attn_gain=ones(d),
            wq=w((da, d)), wk=w((da, d)), wv=w((da, d)), wo=w((d, da)),
            ffn_gain=ones(d),
            w_up=w((dff, d)), w_gate=w((dff, d)), w_down=w((d, dff)),
        ))
    state = ModelState(
        config=config,
        tok_emb=w((v, d)),
        pos_emb=w((config.max_seq_len, d)),
        blocks=blocks,
        final_gain=ones(d),
        lm_head=w((v, d)),
    )

    if r_hio is None:
        r_hio = max(4, round(0.05 * d))
    if n_target is None:
        n_target = d
    state.mask = UnifiedMask.create(d, s0=s0, n_target=n_target, eps_temp=eps_temp, dtype=dtype)

    for name in state.linear_names():
        d_out = {"wq": da, "wk": da, "wv": da, "wo": d, "w_up": dff, "w_gate": dff,
                 "w_down": d, "lm_head": v}[name.rsplit(".", 1)[-1]]
        d_in = {"wq": d, "wk": d, "wv": d, "wo": da, "w_up": d, "w_gate": d,
                "w_down": dff, "lm_head": d}[name.rsplit(".", 1)[-1]]
        state.adapters[name] = LoraAdapter.create(d_out, d_in, r_lora, rng, alpha=lora_alpha, dtype=dtype)

    for blk in state.blocks:
        blk.hsm_attn = HybridSparsifier.create(d, r_hio, state.mask, rng, dtype=dtype)
        blk.hsm_ffn = HybridSparsifier.create(d, r_hio, state.mask, rng, dtype=dtype)
    return state


_causal_cache: dict[tuple[int, str], np.ndarray] = {}


def _causal_mask(t: int, dtype) -> np.ndarray:
    key = (t, np.dtype(dtype).str)
    m = _causal_cache.get(key)
    if m is None:
        m = np.triu(np.full((t, t), -np.inf, dtype=dtype), k=1)
        _causal_cache[key] = m
    return m


def forward(model: ModelState, tokens, mode: str = "plain", step: Optional[int] = None,
            capture: Optional[list] = None) -> Tensor:
    """Run the decoder; returns logits of shape (batch, len, vocab).

    ``plain`` mode is the baseline adapter path: the mask and sparsifiers are
    bypassed entirely. ``masked`` mode multiplies the embedding sum by the
    gate values and routes the attention/FFN outputs through their
    sparsifiers before each residual add. ``capture``, if given, collects
    (label, Tensor) pairs for every residual-stream activation.
    """
    if mode not in ("plain", "masked"):
        raise ConfigError(f"unknown forward mode {mode!r}")
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    batch, t = tokens.shape
    if t > cfg.max_seq_len:
        raise ConfigError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")

    if mode == "masked":
        if model.mask is None or model.pruned:
            raise LifecycleError("masked forward needs an unpruned model with mask state")
        s = model.mask.current_step if step is None else step
        gate_values = gate(model.mask, s)
    else:
        s = 0
        gate_values = None

    pos_ids = np.broadcast_to(np.arange(t, dtype=np.int64), (batch, t))
    h = ad.add(ad.embedding_lookup(model.tok_emb, tokens),
               ad.embedding_lookup(model.pos_emb, pos_ids))
    if gate_values is not None:
        h = ad.mul(h, gate_values)
    elif model.embed_mask is not None:
        h = ad.mul(h, Tensor(model.embed_mask.astype(model.dtype, copy=False)))
    if capture is not None:
        capture.append(("embed", h))

    n_heads, head_dim = cfg.n_heads, cfg.head_dim
    causal = _causal_mask(t, model.dtype)[None, None]
    inv_sqrt_hd = 1.0 / math.sqrt(head_dim)

    for i, blk in enumerate(model.blocks):
        x = ad.rmsnorm(h, blk.attn_gain, cfg.rms_eps)

        def heads(name, w):
            y = lora_forward(w, model.adapters.get(f"blocks.{i}.{name}"), x)
            return ad.transpose(ad.reshape(y, (batch, t, n_heads, head_dim)), (0, 2, 1, 3))

        q = heads("wq", blk.wq)
        k = heads("wk", blk.wk)
        v = heads("wv", blk.wv)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), inv_sqrt_hd)
        probs = ad.softmax_rows(scores, additive_mask=causal)
        ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (batch, t, cfg.d_attn))
        attn_out = lora_forward(blk.wo, model.adapters.get(f"blocks.{i}.wo"), ctx)
        if mode == "masked":
            attn_out = hsm_forward(blk.hsm_attn, attn_out, s, gate_values=gate_values)
        h = ad.add(h, attn_out)
        if capture is not None:
            capture.append((f"blocks.{i}.attn", h))

        x = ad.rmsnorm(h, blk.ffn_gain, cfg.rms_eps)
        gated = ad.silu(lora_forward(blk.w_gate, model.adapters.get(f"blocks.{i}.w_gate"), x))
        up = lora_forward(blk.w_up, model.adapters.get(f"blocks.{i}.w_up"), x)
        ffn_out = lora_forward(blk.w_down, model.adapters.get(f"blocks.{i}.w_down"),
                               ad.mul(gated, up))
        if mode == "masked":
            ffn_out = hsm_forward(blk.hsm_ffn, ffn_out, s, gate_values=gate_values)
        h = ad.add(h, ffn_out)
        if capture is not None:
            capture.append((f"blocks.{i}.ffn", h))

    h = ad.rmsnorm(h, model.final_gain, cfg.rms_eps)
    return lora_forward(model.lm_head, model.adapters.get("lm_head"), h)


def param_counts(model: ModelState) -> dict[str, int]:
    """Dense parameter count per named base tensor (adapters excluded)."""
    return {name: t.data.size for name, t in model.base_tensors()}


def n_params(model: ModelState) -> int:
    return sum(param_counts(model).values())
