"""Token streams for training: byte-level files and synthetic tasks.

A dataset is a set of fixed-length token rows of length seq_len + 1; a row w
yields inputs w[:-1] and next-token targets w[1:]. The loss template marks
which positions count toward the loss (all of them for text, only the
answer positions for synthetic tasks). Splits are deterministic in the seed.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

_COPY_RE = re.compile(r"^copy\((\d+)\s*,\s*(\d+)\)$")
_MOD_ADD_RE = re.compile(r"^mod_add\((\d+)\)$")


def tokenize_bytes(raw: bytes) -> np.ndarray:
    """Byte-level tokens: one token per byte, vocabulary 256."""
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def detokenize_bytes(tokens) -> bytes:
    return np.asarray(tokens, dtype=np.int64).astype(np.uint8).tobytes()


@dataclass
class Batch:
    inputs: np.ndarray     # (B, T) int64
    targets: np.ndarray    # (B, T) int64
    loss_mask: np.ndarray  # (B, T) float, 1 where the loss counts


@dataclass
class Dataset:
    spec: str
    vocab_size: int
    seq_len: int
    train_rows: np.ndarray   # (N, seq_len + 1) int64
    held_rows: np.ndarray    # (M, seq_len + 1) int64
    loss_template: np.ndarray  # (seq_len,) float

    def _to_batch(self, rows: np.ndarray) -> Batch:
        mask = np.broadcast_to(self.loss_template, (rows.shape[0], self.seq_len)).copy()
        return Batch(inputs=rows[:, :-1], targets=rows[:, 1:], loss_mask=mask)

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> Batch:
        idx = rng.integers(0, self.train_rows.shape[0], size=batch_size)
        return self._to_batch(self.train_rows[idx])

    def eval_batches(self, batch_size: int, held: bool = True):
        rows = self.held_rows if held else self.train_rows
        for start in range(0, rows.shape[0], batch_size):
            yield self._to_batch(rows[start:start + batch_size])


def _windows(stream: np.ndarray, seq_len: int) -> np.ndarray:
    """Non-overlapping windows of seq_len + 1 tokens; the tail partial window is dropped."""
    width = seq_len + 1
    n = stream.shape[0] // width
    return stream[: n * width].reshape(n, width)


def _from_file(path: str, seq_len: int) -> Dataset:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"data file not readable: {path}")
    stream = tokenize_bytes(p.read_bytes())
    split = int(stream.shape[0] * 0.9)
    train = _windows(stream[:split], seq_len)
    held = _windows(stream[split:], seq_len)
    if train.shape[0] == 0 or held.shape[0] == 0:
        raise ConfigError(f"data file too small for seq_len {seq_len}: {path}")
    return Dataset(spec=path, vocab_size=256, seq_len=seq_len,
                   train_rows=train, held_rows=held,
                   loss_template=np.ones(seq_len, dtype=np.float64))


def _copy_task(length: int, vocab: int, seq_len: int, seed: int,
               n_train: int = 8192, n_held: int = 1024) -> Dataset:
    """Rows: payload, separator, payload again; loss on reproducing the payload.

    The separator is the top token id, payloads are drawn from the rest of
    the vocabulary.
    """
    if vocab < 3:
        raise ConfigError("copy task needs vocab >= 3")
    if seq_len != 2 * length:
        raise ConfigError(f"copy({length}, {vocab}) needs seq_len == {2 * length}, got {seq_len}")
    rng = np.random.default_rng(seed)
    sep = vocab - 1

    def make(n):
        payload = rng.integers(0, sep, size=(n, length), dtype=np.int64)
        rows = np.concatenate(
            [payload, np.full((n, 1), sep, dtype=np.int64), payload], axis=1)
        return rows

    template = np.zeros(seq_len, dtype=np.float64)
    template[length: 2 * length] = 1.0  # positions predicting the second payload
    return Dataset(spec=f"copy({length},{vocab})", vocab_size=vocab, seq_len=seq_len,
                   train_rows=make(n_train), held_rows=make(n_held), loss_template=template)


def _mod_add_task(modulus: int, seq_len: int, seed: int,
                  n_train: int = 8192, n_held: int = 1024) -> Dataset:
    """Rows pack (a, b, (a+b) mod m) triples; loss only on the answer tokens."""
    if modulus < 2:
        raise ConfigError("mod_add needs modulus >= 2")
    if (seq_len + 1) % 3 != 0:
        raise ConfigError(f"mod_add needs seq_len + 1 divisible by 3, got seq_len {seq_len}")
    k = (seq_len + 1) // 3
    rng = np.random.default_rng(seed)

    def make(n):
        a = rng.integers(0, modulus, size=(n, k), dtype=np.int64)
        b = rng.integers(0, modulus, size=(n, k), dtype=np.int64)
        rows = np.empty((n, 3 * k), dtype=np.int64)
        rows[:, 0::3] = a
        rows[:, 1::3] = b
        rows[:, 2::3] = (a + b) % modulus
        return rows

    template = np.zeros(seq_len, dtype=np.float64)
    template[1::3] = 1.0  # position 3j+1 predicts the answer at 3j+2
    return Dataset(spec=f"mod_add({modulus})", vocab_size=modulus, seq_len=seq_len,
                   train_rows=make(n_train), held_rows=make(n_held), loss_template=template)


def ingest(spec: str, seq_len: int, seed: int) -> Dataset:
    """Build a dataset from a file path or a task spec string.

    Accepted specs: a UTF-8 file path (byte tokens, vocab 256),
    ``copy(length,vocab)``, or ``mod_add(modulus)``.
    """
    spec = spec.strip()
    m = _COPY_RE.match(spec)
    if m:
        return _copy_task(int(m.group(1)), int(m.group(2)), seq_len, seed)
    m = _MOD_ADD_RE.match(spec)
    if m:
        return _mod_add_task(int(m.group(1)), seq_len, seed)
    return _from_file(spec, seq_len)
