import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from gatedmtl import tensor as tn
from gatedmtl.gates import (GateBank, SharedMixer, SparsityConfig, gate_mask, gate_statistics, mean_activation,
                            mix_shared, mix_task, sparsity_loss)
from gatedmtl.tensor import ContractError, DimensionError, Tensor

from conftest import numeric_grad, rel_err


def bank_from(alpha, widths=None):
    alpha = np.asarray(alpha, dtype=float)
    widths = widths or [alpha.shape[2]] * alpha.shape[1]
    return GateBank(Tensor(alpha, requires_grad=True), widths)


def logit(p):
    return math.log(p / (1 - p))


class TestGateMask:
    def test_sign_with_tie(self):
        b = bank_from([[[-2.0, 0.0, 3.0]]])
        assert np.array_equal(gate_mask(b, 0, 0).data, [0, 0, 1])

    @pytest.mark.parametrize("value,expect", [(10.0, 1.0), (-10.0, 0.0)])
    def test_saturation(self, value, expect):
        b = bank_from(np.full((2, 3, 4), value))
        for t in range(2):
            for l in range(3):
                assert np.all(gate_mask(b, t, l).data == expect)

    def test_respects_site_width(self):
        b = GateBank.create(2, [3, 5], init=1.0)
        assert gate_mask(b, 1, 0).shape == (3,)
        assert gate_mask(b, 1, 1).shape == (5,)

    @pytest.mark.parametrize("t,l", [(2, 0), (0, 3), (-1, 0)])
    def test_index_errors(self, t, l):
        with pytest.raises(IndexError):
            gate_mask(GateBank.create(2, [3, 3, 3]), t, l)

    def test_padding_never_selected(self):
        b = GateBank.create(1, [2, 4], init=5.0)
        b.alpha.data[:] = 5.0  # even if padding logits get overwritten
        masks = b.hard_masks()
        assert masks[0, 0].tolist() == [True, True, False, False]


class TestMixTask:
    def test_per_channel_select(self):
        phi = Tensor(np.array([[["A"]], [["B"]]], dtype=object).shape and np.array([[[1.0]], [[2.0]]]))
        psi = Tensor(np.array([[[10.0]], [[20.0]]]))
        out = mix_task(Tensor([1.0, 0.0]), phi, psi).data
        assert out.reshape(-1).tolist() == [1.0, 20.0]

    def test_identities(self, rng):
        phi, psi = Tensor(rng.normal(size=(2, 3, 4, 4))), Tensor(rng.normal(size=(2, 3, 4, 4)))
        assert np.array_equal(mix_task(Tensor(np.zeros(3)), phi, psi).data, psi.data)
        assert np.array_equal(mix_task(Tensor(np.ones(3)), phi, psi).data, phi.data)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mix_task(Tensor(np.ones(2)), Tensor(np.ones((3, 2, 2))), Tensor(np.ones((3, 2, 2))))

    @given(hnp.arrays(np.bool_, st.integers(1, 6)), st.integers(0, 1000))
    def test_channels_drawn_bitwise_from_sources(self, mask, seed):
        rng = np.random.default_rng(seed)
        C = mask.size
        phi, psi = rng.normal(size=(2, C, 3, 3)), rng.normal(size=(2, C, 3, 3))
        out = mix_task(Tensor(mask.astype(float)), Tensor(phi), Tensor(psi)).data
        for c in range(C):
            src = phi if mask[c] else psi
            assert np.array_equal(out[:, c], src[:, c])

    def test_token_layout(self, rng):
        phi, psi = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 3))
        out = mix_task(Tensor([0.0, 1.0, 0.0]), Tensor(phi), Tensor(psi), channel_axis=-1).data
        assert np.array_equal(out[..., 1], phi[..., 1]) and np.array_equal(out[..., 0], psi[..., 0])


class TestMixShared:
    def test_uniform_is_average(self, rng):
        m = SharedMixer.create(2, [3])
        a, b = rng.normal(size=(1, 3, 2, 2)), rng.normal(size=(1, 3, 2, 2))
        out = mix_shared(m, 0, [Tensor(a), Tensor(b)]).data
        np.testing.assert_allclose(out, (a + b) / 2, rtol=0, atol=1e-15)

    def test_log3_weights(self):
        m = SharedMixer.create(2, [1])
        m.beta.data[0, 0] = [math.log(3), 0.0]
        np.testing.assert_allclose(m.weights_np(0)[0], [0.75, 0.25], rtol=0, atol=1e-15)

    def test_saturated_selects_one_task(self, rng):
        m = SharedMixer.create(3, [2])
        m.beta.data[0, :, 1] = 40.0
        feats = [Tensor(rng.normal(size=(1, 2, 3, 3))) for _ in range(3)]
        out = mix_shared(m, 0, feats).data
        assert np.max(np.abs(out - feats[1].data)) < 1e-12

    def test_rows_sum_to_one(self, rng):
        m = SharedMixer.create(4, [5, 3])
        m.beta.data = rng.normal(size=m.beta.shape) * 10
        for l in range(2):
            w = m.weights_np(l)
            assert np.all(w > 0) and np.max(np.abs(w.sum(axis=1) - 1)) < 1e-12
            np.testing.assert_array_equal(w, m.weights(l).data)

    @given(st.integers(0, 10_000), st.integers(2, 4))
    def test_convexity(self, seed, T):
        rng = np.random.default_rng(seed)
        m = SharedMixer.create(T, [3])
        m.beta.data = rng.normal(size=m.beta.shape) * 5
        feats = [rng.normal(size=(2, 3, 2, 2)) for _ in range(T)]
        out = mix_shared(m, 0, [Tensor(f) for f in feats]).data
        stack = np.stack(feats)
        assert np.all(out >= stack.min(axis=0) - 1e-12) and np.all(out <= stack.max(axis=0) + 1e-12)


class TestSparsity:
    def test_hinge_inactive(self):
        b = bank_from([[[logit(0.3)]]])
        assert sparsity_loss(b, SparsityConfig(1.0, [0.5])).item() == 0.0

    def test_hinge_active(self):
        b = bank_from([[[logit(0.8)]]])
        assert abs(sparsity_loss(b, SparsityConfig(1.0, [0.5])).item() - 0.3) < 1e-12

    def test_two_task_hand_value(self):
        b = bank_from(np.full((2, 2, 3), logit(0.6)))
        assert abs(sparsity_loss(b, SparsityConfig(1.0, [0.5, 1.0])).item() - 0.05) < 1e-12

    def test_l1_ignores_tau(self):
        b = bank_from(np.full((2, 2, 3), logit(0.6)))
        assert abs(sparsity_loss(b, SparsityConfig(1.0, None, "l1")).item() - 0.6) < 1e-12

    def test_none_variant_rejected(self):
        with pytest.raises(ContractError):
            sparsity_loss(bank_from(np.zeros((1, 1, 1))), SparsityConfig(1.0, None, "none"))

    def test_config_contracts(self):
        with pytest.raises(ContractError):
            SparsityConfig(1.0, None, "hinge")
        with pytest.raises(ContractError):
            SparsityConfig(-1.0, [0.5])
        with pytest.raises(ContractError):
            SparsityConfig(1.0, [1.5])
        assert not SparsityConfig(0.0, [0.5]).active

    def test_channel_then_layer_mean(self):
        # layer widths 1 and 3: the per-layer channel means are averaged with
        # equal weight, not pooled over all four channels
        alpha = np.zeros((1, 2, 3))
        alpha[0, 0, 0] = logit(0.9)
        alpha[0, 1, :] = logit(0.1)
        b = bank_from(alpha, widths=[1, 3])
        assert abs(mean_activation(b).data[0] - 0.5) < 1e-12

    @given(hnp.arrays(np.float64, (2, 3, 4), elements=st.floats(-6, 6)),
           st.lists(st.floats(0, 1), min_size=2, max_size=2))
    def test_hinge_bounded_by_shifted_l1(self, alpha, tau):
        b = bank_from(alpha)
        h = sparsity_loss(b, SparsityConfig(1.0, tau)).item()
        l1 = sparsity_loss(b, SparsityConfig(1.0, None, "l1")).item()
        assert h <= l1 + max(tau) + 1e-12

    @given(hnp.arrays(np.float64, (3, 2, 4), elements=st.floats(-6, 6)))
    def test_hinge_and_gradient_zero_below_target(self, alpha):
        b = bank_from(alpha)
        u = mean_activation(b).data
        tau = np.minimum(u + 0.01, 1.0).tolist()
        loss = sparsity_loss(b, SparsityConfig(1.0, tau))
        loss.backward()
        assert loss.item() == 0.0 and np.all(b.alpha.grad == 0.0)

    @pytest.mark.parametrize("variant", ["hinge", "l1"])
    @pytest.mark.parametrize("seed", range(4))
    def test_gradients_match_finite_differences(self, variant, seed):
        rng = np.random.default_rng(seed)
        b = bank_from(rng.normal(size=(3, 4, 5)), widths=[5, 2, 4, 3])
        cfg = SparsityConfig(1.0, [0.1, 0.3, 0.2] if variant == "hinge" else None, variant)
        sparsity_loss(b, cfg).backward()

        def f():
            with tn.no_grad():
                return sparsity_loss(b, cfg).item()
        num = numeric_grad(f, b.alpha.data)
        assert rel_err(b.alpha.grad, num) < 1e-4
        # padding logits never receive gradient
        assert np.all(b.alpha.grad[:, ~b.validity] == 0)


class TestStatistics:
    def test_all_negative(self):
        b = bank_from(-np.ones((3, 2, 4)))
        m = SharedMixer.create(3, [4, 4])
        assert gate_statistics(b, m).selection_ratio == [0.0, 0.0, 0.0]

    def test_uniform_beta_tie_to_lowest_index(self):
        b = bank_from(np.ones((2, 2, 3)))
        m = SharedMixer.create(2, [3, 3])
        assert gate_statistics(b, m).contribution_share == [1.0, 0.0]

    @given(st.integers(0, 10_000))
    def test_brute_force_recount(self, seed):
        rng = np.random.default_rng(seed)
        widths = [int(w) for w in rng.integers(1, 6, size=3)]
        T = int(rng.integers(1, 4))
        b = GateBank.create(T, widths)
        b.alpha.data = rng.normal(size=b.alpha.shape)
        m = SharedMixer.create(T, widths)
        m.beta.data = np.round(rng.normal(size=m.beta.shape), 1)  # coarse values make ties likely
        rep = gate_statistics(b, m)
        total = sum(widths)
        for t in range(T):
            sel = wins = 0
            for l, w in enumerate(widths):
                on = 0
                for c in range(w):
                    s = 1.0 / (1.0 + math.exp(-b.alpha.data[t, l, c]))
                    on += s > 0.5
                    logits = [m.beta.data[l, c, k] for k in range(T)]
                    wins += logits.index(max(logits)) == t
                sel += on
                assert rep.selection_ratio_per_layer[t][l] == pytest.approx(on / w, abs=1e-15)
            assert rep.selection_ratio[t] == pytest.approx(sel / total, abs=1e-15)
            assert rep.contribution_share[t] == pytest.approx(wins / total, abs=1e-15)
