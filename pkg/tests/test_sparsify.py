"""Mask gate schedule, low-rank transform, and the two regularizers."""

import math

import numpy as np
import pytest

from prunetune import autodiff as ad
from prunetune.autodiff import Tape, Tensor
from prunetune.errors import ConfigError, DimensionError
from prunetune.sparsify import (BinaryMask, HybridSparsifier, UnifiedMask,
                                active_count, active_loss, finalize_mask, gate,
                                hsm_forward, identity_loss, offset, temperature)

from helpers import fd_gradcheck

F64 = np.float64


def make_mask(w, s0=100, n_target=None, eps_temp=1e-3, dtype=np.float64):
    w = np.asarray(w, dtype=float)
    return UnifiedMask(
        w=Tensor(w, dtype=dtype, requires_grad=True),
        s0=s0, eps_temp=eps_temp,
        n_target=n_target if n_target is not None else len(w),
    )


class TestTemperature:
    def test_zero_step_is_zero(self):
        assert temperature(0, 100, 1e-3) == 0.0

    def test_step_one_is_one(self):
        assert temperature(1, 100, 1e-3) == 1.0  # ln(1) = 0

    def test_milestone_is_inverse_eps(self):
        assert temperature(100, 100, 1e-3) == 1000.0
        assert temperature(5000, 100, 1e-3) == 1000.0

    def test_invalid_milestone(self):
        with pytest.raises(ConfigError):
            temperature(5, 1, 1e-3)

    def test_grows_before_milestone(self):
        taus = [temperature(s, 64, 1e-3) for s in range(1, 64)]
        assert all(b > a for a, b in zip(taus, taus[1:]))


class TestOffset:
    def test_start(self):
        assert offset(0, 100) == 0.5

    def test_quarter(self):
        assert offset(25, 100) == 0.25

    def test_half_and_continuity(self):
        assert offset(50, 100) == 0.0
        # the linear branch itself reaches 0 at the boundary
        assert (-50 / 100 + 0.5) == 0.0


class TestGate:
    def test_step_zero_maps_everything_to_one(self):
        rng = np.random.default_rng(0)
        mask = make_mask(rng.uniform(-5, 5, 32))
        np.testing.assert_array_equal(gate(mask, 0).data, np.ones(32))

    def test_saturated_values(self):
        mask = make_mask([0.01, -0.01], s0=10)
        out = gate(mask, 10).data  # tau = 1000
        np.testing.assert_allclose(out[0], 0.999954602131297565, rtol=1e-12)
        np.testing.assert_allclose(out[1], 4.53978687024343945e-05, rtol=1e-12)

    def test_values_stay_in_unit_band(self):
        # mathematically (0, 1.5]; float saturation may hit 0 and 1 exactly,
        # which the exact zero-propagation guarantees depend on
        rng = np.random.default_rng(1)
        for s in [0, 1, 10, 25, 50, 99, 100, 500]:
            mask = make_mask(rng.uniform(-2, 2, 64))
            g = gate(mask, s).data
            assert np.all(g >= 0) and np.all(g <= 1.5)

    def test_monotone_in_proxy_weight(self):
        w = np.linspace(-2, 2, 41)
        for s in [1, 25, 50]:
            g = gate(make_mask(w), s).data
            assert np.all(np.diff(g) > 0)

    def test_endpoint_saturation(self):
        # |w| >= 0.01 at tau = 1000 pins the gate within 5e-5 of {0, 1}
        rng = np.random.default_rng(2)
        w = rng.uniform(0.01, 3.0, 256) * rng.choice([-1.0, 1.0], 256)
        mask = make_mask(w, s0=50)
        for s in [50, 51, 5000]:
            g = gate(mask, s).data
            assert np.minimum(g, 1.0 - g).max() <= 5e-5

    def test_gradcheck_across_schedule(self):
        rng = np.random.default_rng(3)
        s0 = 40
        for s in [1, s0 // 4, s0 // 2, s0 - 1, s0]:
            # near and past the milestone the gate saturates; proxy weights are
            # drawn small enough that finite differences stay well conditioned
            hi = 1.0 if s < s0 - 1 else 0.02
            mask = make_mask(rng.uniform(-hi, hi, 12), s0=s0)
            fd_gradcheck(lambda m=mask, s=s: gate(m, s), [mask.w], rng)

    def test_no_gradient_at_step_zero_saturation(self):
        # tau = 0 makes the gate constant 1; gradient must be exactly zero
        mask = make_mask([0.3, -0.4])
        with Tape() as tape:
            tape.backward(ad.sum_all(gate(mask, 0)))
        np.testing.assert_array_equal(mask.w.grad, [0.0, 0.0])


def make_hsm(d=8, r=2, seed=0, dtype=np.float64, s0=100):
    rng = np.random.default_rng(seed)
    mask = make_mask(np.zeros(d), s0=s0, dtype=dtype)
    hsm = HybridSparsifier.create(d, r, mask, rng, dtype=dtype)
    return hsm, mask


class TestHsmForward:
    def test_zero_scaling_is_gated_identity(self):
        hsm, mask = make_hsm()
        rng = np.random.default_rng(1)
        h = Tensor(rng.uniform(-1, 1, (3, 8)), dtype=F64)
        mask.w.data[:] = rng.uniform(-1, 1, 8)
        m = gate(mask, 30).data
        out = hsm_forward(hsm, h, 30)
        np.testing.assert_allclose(out.data, h.data * m, rtol=1e-12)

    def test_hand_case(self):
        # d=2, r=1: D = [[1 + 2, 0], [0, 1]] applied to h = [3, 5]
        mask = make_mask(np.zeros(2), s0=100)
        hsm = HybridSparsifier(
            l0=Tensor([[1.0, 0.0]], dtype=F64, requires_grad=True),
            v=Tensor([2.0], dtype=F64, requires_grad=True),
            l1=Tensor([[1.0], [0.0]], dtype=F64, requires_grad=True),
            mask=mask,
        )
        out = hsm_forward(hsm, Tensor([[3.0, 5.0]], dtype=F64), 0)  # gate == 1
        np.testing.assert_array_equal(out.data, [[9.0, 5.0]])

    def test_masked_channel_exactly_zero(self):
        hsm, mask = make_hsm(d=8, r=2, s0=10)
        rng = np.random.default_rng(4)
        hsm.v.data[:] = rng.normal(0, 1, 2)
        mask.w.data[:] = 1.0
        mask.w.data[0] = -1.0  # tau=1000 underflows the gate to exactly 0
        out = hsm_forward(hsm, Tensor(rng.uniform(-1, 1, (5, 8)), dtype=F64), 10)
        assert np.all(out.data[:, 0] == 0.0)

    def test_matches_dense_materialization(self):
        rng = np.random.default_rng(5)
        for d, r in [(8, 2), (16, 5), (32, 8)]:
            mask = make_mask(rng.uniform(-1, 1, d), s0=40, dtype=np.float32)
            hsm = HybridSparsifier.create(d, r, mask, rng, dtype=np.float32)
            hsm.v.data[:] = rng.normal(0, 0.5, r).astype(np.float32)
            h = Tensor(rng.uniform(-1, 1, (6, d)), dtype=np.float32)
            s = 17
            out = hsm_forward(hsm, h, s).data
            dense = hsm.l1.data @ np.diag(hsm.v.data) @ hsm.l0.data + np.eye(d, dtype=np.float32)
            expected = (gate(mask, s).data * (h.data @ dense.T))
            np.testing.assert_allclose(out, expected, atol=1e-5)

    def test_shape_mismatch(self):
        hsm, _ = make_hsm(d=8)
        with pytest.raises(DimensionError):
            hsm_forward(hsm, Tensor(np.ones((2, 9)), dtype=F64), 0)

    def test_gradcheck(self):
        rng = np.random.default_rng(6)
        hsm, mask = make_hsm(d=6, r=2, s0=40)
        hsm.v.data[:] = rng.normal(0, 0.5, 2)
        mask.w.data[:] = rng.uniform(-1, 1, 6)
        h = Tensor(rng.uniform(-1, 1, (3, 6)), dtype=F64, requires_grad=True)
        fd_gradcheck(lambda: hsm_forward(hsm, h, 10),
                     [hsm.l0, hsm.v, hsm.l1, mask.w, h], rng)


class TestRankBudget:
    def test_rank_bound_enforced(self):
        rng = np.random.default_rng(0)
        mask = make_mask(np.zeros(8))
        HybridSparsifier.create(8, 4, mask, rng)  # 2r == d is the edge
        with pytest.raises(ConfigError):
            HybridSparsifier.create(8, 5, mask, rng)

    def test_param_count_formula(self):
        for d, r in [(64, 4), (256, 12), (1024, 50)]:
            hsm, _ = make_hsm(d=d, r=r)
            assert hsm.n_params == 2 * d * r + r

    def test_reference_budget_fraction(self):
        # one transform at d=4096, r=200 vs the dense d*d alternative
        d, r = 4096, 200
        params = 2 * d * r + r
        assert params == 1_638_600
        fraction = params / (d * d)
        assert d * d == 16_777_216
        assert 0.09 <= fraction <= 0.11
        assert math.isclose(fraction, 0.0977, abs_tol=5e-4)


class TestIdentityLoss:
    def test_orthonormal_factors_give_zero(self):
        d, r = 8, 3
        mask = make_mask(np.zeros(d))
        basis = np.eye(d)[:r]
        hsm = HybridSparsifier(
            l0=Tensor(basis, dtype=F64, requires_grad=True),
            v=Tensor(np.zeros(r), dtype=F64, requires_grad=True),
            l1=Tensor(basis.T, dtype=F64, requires_grad=True),
            mask=mask,
        )
        assert identity_loss([hsm]).item() == 0.0

    def test_zero_factors(self):
        d, r = 10, 4
        mask = make_mask(np.zeros(d))
        hsm = HybridSparsifier(
            l0=Tensor(np.zeros((r, d)), dtype=F64, requires_grad=True),
            v=Tensor(np.zeros(r), dtype=F64, requires_grad=True),
            l1=Tensor(np.zeros((d, r)), dtype=F64, requires_grad=True),
            mask=mask,
        )
        assert math.isclose(identity_loss([hsm]).item(), 2.0 * math.sqrt(r), rel_tol=1e-12)

    def test_rank_one_scaled(self):
        # 1x1 Gram matrices equal 4; each Frobenius distance is |4 - 1| = 3
        mask = make_mask(np.zeros(8))
        l0 = np.zeros((1, 8)); l0[0, 0] = 2.0
        hsm = HybridSparsifier(
            l0=Tensor(l0, dtype=F64, requires_grad=True),
            v=Tensor([0.0], dtype=F64, requires_grad=True),
            l1=Tensor(l0.T.copy(), dtype=F64, requires_grad=True),
            mask=mask,
        )
        assert math.isclose(identity_loss([hsm]).item(), 6.0, rel_tol=1e-12)

    def test_nonnegative_and_sums_over_modules(self):
        rng = np.random.default_rng(7)
        hsms = [make_hsm(d=8, r=2, seed=i)[0] for i in range(3)]
        total = identity_loss(hsms).item()
        assert total >= 0.0
        parts = sum(identity_loss([h]).item() for h in hsms)
        assert math.isclose(total, parts, rel_tol=1e-9)

    def test_gradcheck(self):
        rng = np.random.default_rng(8)
        hsm, _ = make_hsm(d=6, r=2, seed=9)
        fd_gradcheck(lambda: identity_loss([hsm]), [hsm.l0, hsm.l1], rng)


class TestActiveLoss:
    def test_all_zero_weights(self):
        mask = make_mask(np.zeros(16), n_target=5)
        assert active_count(mask) == 0
        assert active_loss(mask, 3).item() == 5.0

    def test_exact_target_count(self):
        w = np.full(10, -1.0)
        w[:4] = 1.0
        mask = make_mask(w, n_target=4)
        assert active_loss(mask, 3).item() == 0.0

    def test_hand_count(self):
        mask = make_mask([0.3, -0.1, 0.2, -0.5], n_target=1)
        assert active_count(mask) == 2
        assert active_loss(mask, 3).item() == 1.0

    def test_straight_through_gradient_matches_surrogate(self):
        rng = np.random.default_rng(9)
        w = rng.uniform(-1, 1, 12)
        for s in [1, 10, 50]:
            hard_mask = make_mask(w.copy(), n_target=4, s0=40)
            with Tape() as tape:
                tape.backward(active_loss(hard_mask, s))
            soft_mask = make_mask(w.copy(), n_target=4, s0=40)
            with Tape() as tape:
                tape.backward(active_loss(soft_mask, s, smooth=True))
            np.testing.assert_allclose(hard_mask.w.grad, soft_mask.w.grad, rtol=1e-12)

    def test_smooth_variant_gradcheck(self):
        rng = np.random.default_rng(10)
        mask = make_mask(rng.uniform(-1, 1, 10), n_target=3, s0=40)
        fd_gradcheck(lambda: active_loss(mask, 7, smooth=True), [mask.w], rng)


class TestFinalizeMask:
    def test_top_two(self):
        mask = make_mask([1.0, -1.0, 2.0, -2.0], n_target=2)
        bmask, _ = finalize_mask(mask)
        assert bmask.kept == [0, 2]

    def test_ties_keep_lower_indices(self):
        mask = make_mask(np.zeros(6), n_target=3)
        bmask, _ = finalize_mask(mask)
        assert bmask.kept == [0, 1, 2]

    def test_full_keep(self):
        rng = np.random.default_rng(11)
        mask = make_mask(rng.normal(0, 1, 8), n_target=8)
        bmask, _ = finalize_mask(mask)
        assert bmask.kept == list(range(8))

    def test_disagreement_count(self):
        w = np.concatenate([np.full(6, 0.5), np.full(10, -0.5)])
        mask = make_mask(w, n_target=6, s0=10)
        mask.current_step = 10  # saturated: gates match the snap
        _, disagreements = finalize_mask(mask)
        assert disagreements == 0
        mask.current_step = 0  # gate is all ones; every dropped channel disagrees
        _, disagreements = finalize_mask(mask)
        assert disagreements == 10

    def test_snap_vector(self):
        bmask = BinaryMask(kept=[3, 1], d=5)
        assert bmask.kept == [1, 3]
        np.testing.assert_array_equal(bmask.snap_vector(), [0, 1, 0, 1, 0])


class TestMaskValidation:
    def test_bad_milestone(self):
        with pytest.raises(ConfigError):
            make_mask(np.zeros(4), s0=1)

    def test_bad_target(self):
        with pytest.raises(ConfigError):
            make_mask(np.zeros(4), n_target=5)
        with pytest.raises(ConfigError):
            make_mask(np.zeros(4), n_target=0)
