"""Adapter forward, merge semantics, and the frozen-base guarantee."""

import numpy as np
import pytest

from prunetune import autodiff as ad
from prunetune.autodiff import Tape, Tensor
from prunetune.errors import DimensionError, LifecycleError
from prunetune.lora import LoraAdapter, lora_forward, merge_lora

from helpers import fd_gradcheck

F64 = np.float64


def make(d_out=6, d_in=4, rank=2, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(0, 0.5, (d_out, d_in)), dtype=dtype)
    adapter = LoraAdapter.create(d_out, d_in, rank, rng, dtype=dtype)
    return w, adapter, rng


class TestForward:
    def test_fresh_adapter_is_identity_delta(self):
        w, adapter, rng = make()
        x = Tensor(rng.uniform(-1, 1, (3, 4)), dtype=F64)
        out = lora_forward(w, adapter, x)
        np.testing.assert_array_equal(out.data, x.data @ w.data.T)

    def test_no_adapter(self):
        w, _, rng = make()
        x = Tensor(rng.uniform(-1, 1, (3, 4)), dtype=F64)
        np.testing.assert_array_equal(lora_forward(w, None, x).data, x.data @ w.data.T)

    def test_full_rank_identity_a_reduces_to_weight_shift(self):
        # rank == d_in with A = I and alpha = rank makes the delta exactly B
        rng = np.random.default_rng(1)
        d = 4
        w = Tensor(rng.normal(0, 0.5, (d, d)), dtype=F64)
        adapter = LoraAdapter(
            a=Tensor(np.eye(d), dtype=F64, requires_grad=True),
            b=Tensor(rng.normal(0, 0.5, (d, d)), dtype=F64, requires_grad=True),
            alpha=float(d),
        )
        x = Tensor(rng.uniform(-1, 1, (5, d)), dtype=F64)
        out = lora_forward(w, adapter, x)
        np.testing.assert_allclose(out.data, x.data @ (w.data + adapter.b.data).T, rtol=1e-12)

    def test_matches_dense_delta_oracle(self):
        w, adapter, rng = make(dtype=np.float32)
        adapter.b.data[:] = rng.normal(0, 0.3, adapter.b.shape).astype(np.float32)
        x = Tensor(rng.uniform(-1, 1, (7, 4)), dtype=np.float32)
        dense = w.data + adapter.scaling * (adapter.b.data @ adapter.a.data)
        np.testing.assert_allclose(lora_forward(w, adapter, x).data, x.data @ dense.T, atol=1e-5)

    def test_gradcheck_and_frozen_base(self):
        w, adapter, rng = make()
        adapter.b.data[:] = rng.normal(0, 0.3, adapter.b.shape)
        x = Tensor(rng.uniform(-1, 1, (3, 4)), dtype=F64)
        fd_gradcheck(lambda: lora_forward(w, adapter, x), [adapter.a, adapter.b], rng)
        assert w.grad is None  # base weight never accumulates gradient


class TestMerge:
    def test_zero_b_merge_is_noop(self):
        w, adapter, _ = make()
        merged = merge_lora(w, adapter)
        np.testing.assert_array_equal(merged.data, w.data)

    def test_merged_forward_matches_adapter_forward(self):
        w, adapter, rng = make(dtype=np.float32)
        adapter.b.data[:] = rng.normal(0, 0.3, adapter.b.shape).astype(np.float32)
        x = Tensor(rng.uniform(-1, 1, (5, 4)), dtype=np.float32)
        with_adapter = lora_forward(w, adapter, x).data
        merged = merge_lora(w, adapter)
        np.testing.assert_allclose(lora_forward(merged, None, x).data, with_adapter, atol=1e-5)

    def test_double_merge_rejected(self):
        w, adapter, _ = make()
        merge_lora(w, adapter)
        with pytest.raises(LifecycleError):
            merge_lora(w, adapter)

    def test_consumed_adapter_is_skipped_in_forward(self):
        w, adapter, rng = make()
        adapter.b.data[:] = rng.normal(0, 0.3, adapter.b.shape)
        merged = merge_lora(w, adapter)
        x = Tensor(rng.uniform(-1, 1, (3, 4)), dtype=F64)
        np.testing.assert_array_equal(lora_forward(merged, adapter, x).data,
                                      x.data @ merged.data.T)

    def test_shape_mismatch(self):
        w, adapter, _ = make()
        with pytest.raises(DimensionError):
            merge_lora(Tensor(np.zeros((3, 3)), dtype=F64), adapter)


class TestDefaults:
    def test_alpha_default_scaling_is_two(self):
        _, adapter, _ = make(rank=5)
        assert adapter.alpha == 10.0 and adapter.scaling == 2.0

    def test_param_count(self):
        _, adapter, _ = make(d_out=6, d_in=4, rank=2)
        assert adapter.n_params == 2 * 4 + 6 * 2
