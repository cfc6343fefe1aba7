"""Run configuration: one JSON file describing model, training, and data.

Layout (all keys optional unless noted; defaults in parentheses):

    {
      "model":    {"d_model": 64, "n_layers": 2, "n_heads": 4, "d_ff": 256,
                   "vocab_size": 256, "max_seq_len": 64, "seed": 0,
                   "rms_eps": 1e-6},
      "train":    {"total_steps": required, "batch_size": 16, "seq_len": 64,
                   "lr_max": 3e-4, "s0": total_steps // 3, "seed": 0,
                   "checkpoint_every": 0, "method": "pat", "grad_clip": 1.0},
      "sparsify": {"r_hio": max(4, round(0.05 * d_model)), "eps_temp": 1e-3,
                   "target_prune_ratio": 0.0},
      "lora":     {"r_lora": 8, "alpha": 2 * r_lora},
      "data":     {"spec": required -- file path, "copy(L,V)" or "mod_add(M)"},
      "output_dir": required for train
    }

Unknown keys anywhere are rejected. The loaded file bytes are kept so the
train command can echo the configuration verbatim into the output directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

_MODEL_KEYS = {"d_model", "n_layers", "n_heads", "d_ff", "vocab_size",
               "max_seq_len", "seed", "rms_eps"}
_TRAIN_KEYS = {"total_steps", "batch_size", "seq_len", "lr_max", "s0", "seed",
               "checkpoint_every", "method", "grad_clip"}
_SPARSIFY_KEYS = {"r_hio", "eps_temp", "target_prune_ratio"}
_LORA_KEYS = {"r_lora", "alpha"}
_DATA_KEYS = {"spec"}
_TOP_KEYS = {"model", "train", "sparsify", "lora", "data", "output_dir"}

_MODEL_DEFAULTS = {"d_model": 64, "n_layers": 2, "n_heads": 4, "d_ff": 256,
                   "vocab_size": 256, "max_seq_len": 64, "seed": 0, "rms_eps": 1e-6}


def _check_keys(section: dict, allowed: set, where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in {where}")


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    r_hio: int
    eps_temp: float
    r_lora: int
    lora_alpha: Optional[float]
    data_spec: str
    output_dir: Optional[str]
    raw_bytes: bytes

    def echo(self, out_dir) -> None:
        """Write the original config file bytes into the output directory."""
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "config.json").write_bytes(self.raw_bytes)


def parse_run_config(raw: bytes, source: str = "<config>") -> RunConfig:
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{source}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be an object")
    _check_keys(doc, _TOP_KEYS, source)

    model_sec = dict(doc.get("model", {}))
    _check_keys(model_sec, _MODEL_KEYS, "model section")
    model_fields = {**_MODEL_DEFAULTS, **model_sec}
    model = ModelConfig(**model_fields)

    train_sec = dict(doc.get("train", {}))
    _check_keys(train_sec, _TRAIN_KEYS, "train section")
    if "total_steps" not in train_sec:
        raise ConfigError("train section must set total_steps")

    sparsify_sec = dict(doc.get("sparsify", {}))
    _check_keys(sparsify_sec, _SPARSIFY_KEYS, "sparsify section")
    ratio = float(sparsify_sec.get("target_prune_ratio", 0.0))
    r_hio = sparsify_sec.get("r_hio")
    if r_hio is None:
        r_hio = max(4, round(0.05 * model.d_model))
    eps_temp = float(sparsify_sec.get("eps_temp", 1e-3))

    train = TrainConfig(target_prune_ratio=ratio, **train_sec)

    lora_sec = dict(doc.get("lora", {}))
    _check_keys(lora_sec, _LORA_KEYS, "lora section")
    r_lora = int(lora_sec.get("r_lora", 8))
    alpha = lora_sec.get("alpha")

    data_sec = dict(doc.get("data", {}))
    _check_keys(data_sec, _DATA_KEYS, "data section")
    if "spec" not in data_sec:
        raise ConfigError("data section must set spec")

    return RunConfig(
        model=model, train=train,
        r_hio=int(r_hio), eps_temp=eps_temp,
        r_lora=r_lora, lora_alpha=None if alpha is None else float(alpha),
        data_spec=str(data_sec["spec"]),
        output_dir=doc.get("output_dir"),
        raw_bytes=raw,
    )


def load_run_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_run_config(p.read_bytes(), source=str(path))
