"""Checkpoint container: a directory with manifest.json and weights.bin.

The manifest lists every tensor entry with shape, dtype, byte offset, and
byte length; the blob holds the raw little-endian arrays, row-major, each
entry aligned to 64 bytes. Save -> load -> save round-trips byte-identically.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError
from .lora import LoraAdapter
from .model import DecoderBlock, ModelConfig, ModelState
from .sparsify import HybridSparsifier, UnifiedMask

FORMAT_VERSION = 1
ALIGNMENT = 64

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def _dtype_tag(arr: np.ndarray) -> str:
    tag = {"float32": "<f4", "float64": "<f8"}.get(arr.dtype.name)
    if tag is None:
        raise ConfigError(f"unsupported tensor dtype {arr.dtype}")
    return tag


def _collect_entries(model: ModelState) -> list[tuple[str, Tensor]]:
    entries = list(model.base_tensors())
    if model.mask is not None:
        entries.append(("mask.w", model.mask.w))
        for i, blk in enumerate(model.blocks):
            for tag, hsm in (("hsm_attn", blk.hsm_attn), ("hsm_ffn", blk.hsm_ffn)):
                if hsm is not None:
                    p = f"blocks.{i}.{tag}."
                    entries.extend([(p + "l0", hsm.l0), (p + "v", hsm.v), (p + "l1", hsm.l1)])
    for name in model.linear_names():
        adapter = model.adapters.get(name)
        if adapter is not None and not adapter.merged:
            entries.append((f"lora.{name}.a", adapter.a))
            entries.append((f"lora.{name}.b", adapter.b))
    return entries


def save_model(model: ModelState, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = _collect_entries(model)

    blob = bytearray()
    manifest_entries = []
    for name, tensor in entries:
        arr = np.ascontiguousarray(tensor.data)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        if len(blob) % ALIGNMENT:
            blob.extend(b"\x00" * (ALIGNMENT - len(blob) % ALIGNMENT))
        manifest_entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": _dtype_tag(arr),
            "offset": len(blob),
            "nbytes": len(raw),
        })
        blob.extend(raw)

    manifest = {
        "format_version": FORMAT_VERSION,
        "pruned": model.pruned,
        "model": asdict(model.config),
        "mask": None if model.mask is None else {
            "s0": model.mask.s0,
            "eps_temp": model.mask.eps_temp,
            "n_target": model.mask.n_target,
            "current_step": model.mask.current_step,
        },
        "adapters": {
            name: {"alpha": model.adapters[name].alpha}
            for name in model.linear_names()
            if model.adapters.get(name) is not None and not model.adapters[name].merged
        },
        "embed_mask_kept": (None if model.embed_mask is None
                            else [int(i) for i in np.flatnonzero(model.embed_mask)]),
        "entries": manifest_entries,
    }
    (out / "weights.bin").write_bytes(bytes(blob))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_model(path) -> ModelState:
    root = Path(path)
    manifest_path = root / "manifest.json"
    blob_path = root / "weights.bin"
    if not manifest_path.is_file() or not blob_path.is_file():
        raise ConfigError(f"not a checkpoint directory: {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format_version {manifest.get('format_version')}")
    blob = blob_path.read_bytes()

    spans = []
    tensors: dict[str, Tensor] = {}
    for entry in manifest["entries"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ConfigError(f"unknown dtype tag {entry['dtype']} in manifest")
        offset, nbytes = entry["offset"], entry["nbytes"]
        if offset < 0 or offset + nbytes > len(blob):
            raise ConfigError(f"manifest entry {entry['name']} lies outside weights.bin")
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        if expected != nbytes:
            raise ConfigError(f"manifest entry {entry['name']} has inconsistent shape/nbytes")
        spans.append((offset, offset + nbytes, entry["name"]))
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        tensors[entry["name"]] = Tensor(arr.reshape(shape).copy())
    spans.sort()
    for (_, end_a, name_a), (start_b, _, name_b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise ConfigError(f"manifest entries {name_a} and {name_b} overlap")

    config = ModelConfig(**manifest["model"])

    def take(name):
        if name not in tensors:
            raise ConfigError(f"checkpoint missing tensor {name}")
        return tensors[name]

    blocks = []
    for i in range(config.n_layers):
        p = f"blocks.{i}."
        blocks.append(DecoderBlock(
            attn_gain=take(p + "attn_gain"),
            wq=take(p + "wq"), wk=take(p + "wk"), wv=take(p + "wv"), wo=take(p + "wo"),
            ffn_gain=take(p + "ffn_gain"),
            w_up=take(p + "w_up"), w_gate=take(p + "w_gate"), w_down=take(p + "w_down"),
        ))
    model = ModelState(
        config=config,
        tok_emb=take("tok_emb"), pos_emb=take("pos_emb"),
        blocks=blocks, final_gain=take("final_gain"), lm_head=take("lm_head"),
        pruned=bool(manifest["pruned"]),
    )

    mask_info = manifest.get("mask")
    if mask_info is not None:
        w = take("mask.w")
        w.requires_grad = True
        model.mask = UnifiedMask(w=w, s0=mask_info["s0"], eps_temp=mask_info["eps_temp"],
                                 n_target=mask_info["n_target"],
                                 current_step=mask_info["current_step"])
        for i, blk in enumerate(model.blocks):
            for tag in ("hsm_attn", "hsm_ffn"):
                p = f"blocks.{i}.{tag}."
                if p + "l0" in tensors:
                    l0, v, l1 = take(p + "l0"), take(p + "v"), take(p + "l1")
                    for t in (l0, v, l1):
                        t.requires_grad = True
                    setattr(blk, tag, HybridSparsifier(l0=l0, v=v, l1=l1, mask=model.mask))

    for name, info in manifest.get("adapters", {}).items():
        a, b = take(f"lora.{name}.a"), take(f"lora.{name}.b")
        a.requires_grad = True
        b.requires_grad = True
        model.adapters[name] = LoraAdapter(a=a, b=b, alpha=info["alpha"])

    kept = manifest.get("embed_mask_kept")
    if kept is not None:
        vec = np.zeros(config.d_model, dtype=model.dtype)
        vec[np.asarray(kept, dtype=np.int64)] = 1.0
        model.embed_mask = vec
    return model
