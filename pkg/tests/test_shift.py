"""Tests for stochastic per-channel shift synthesis."""
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from meta_ttt.shift import (
    DomainShiftLayer,
    ShiftDraw,
    apply_shift,
    sample_mask,
    sample_shift,
    sample_transform,
)


class TestSampleMask:
    def test_p_zero_all_clear(self):
        rng = np.random.default_rng(0)
        assert not sample_mask(0.0, 256, rng).any()

    def test_p_one_all_set(self):
        rng = np.random.default_rng(0)
        assert sample_mask(1.0, 256, rng).all()

    def test_count_concentration(self):
        # Binomial(1024, 0.5): +/- 4 sigma is about [460, 564]
        rng = np.random.default_rng(7)
        for _ in range(50):
            count = int(sample_mask(0.5, 1024, rng).sum())
            assert 460 <= count <= 564

    def test_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            sample_mask(1.5, 8, rng)
        with pytest.raises(ValueError):
            sample_mask(0.5, 0, rng)


class TestSampleTransform:
    def test_unmasked_channels_identity(self):
        rng = np.random.default_rng(1)
        mask = np.array([1, 0, 1, 0])
        gamma, lam = sample_transform(mask, rng)
        assert gamma[1] == 1.0 and gamma[3] == 1.0
        assert lam[1] == 0.0 and lam[3] == 0.0

    def test_masked_entries_uniform(self):
        rng = np.random.default_rng(2)
        mask = np.ones(100_000, dtype=np.int64)
        gamma, lam = sample_transform(mask, rng)
        assert abs(gamma.mean() - 0.5) < 0.01
        assert abs(lam.mean() - 0.5) < 0.01
        assert gamma.min() >= 0.0 and gamma.max() <= 1.0
        assert lam.min() >= 0.0 and lam.max() <= 1.0

    def test_masked_entries_no_atom_at_identity(self):
        rng = np.random.default_rng(3)
        mask = np.ones(1000, dtype=np.int64)
        gamma, _ = sample_transform(mask, rng)
        assert (gamma == 1.0).sum() == 0  # U[0,1] draws, not identity


class TestApplyShift:
    def test_identity_when_mask_empty(self):
        rng = np.random.default_rng(4)
        draw = sample_shift(0.0, 8, rng)
        z = torch.randn(4, 8, 5, 5)
        out = apply_shift(z, draw)
        assert out is z  # bit-exact identity, no copy

    def test_affine_per_channel(self):
        draw = ShiftDraw(
            mask=np.array([1, 0]),
            gamma_shift=np.array([0.5, 1.0]),
            lambda_shift=np.array([0.25, 0.0]),
            p=0.5,
        )
        z = torch.ones(2, 2, 3, 3)
        out = apply_shift(z, draw)
        assert torch.allclose(out[:, 0], torch.full((2, 3, 3), 0.75))
        assert torch.allclose(out[:, 1], torch.ones(2, 3, 3))

    def test_channel_mismatch(self):
        rng = np.random.default_rng(5)
        draw = sample_shift(0.5, 4, rng)
        with pytest.raises(ValueError):
            apply_shift(torch.randn(2, 3, 2, 2), draw)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_gradient_passthrough(self, seed):
        rng = np.random.default_rng(seed)
        draw = sample_shift(0.5, 3, rng)
        z = torch.randn(2, 3, 2, 2, requires_grad=True)
        apply_shift(z, draw).sum().backward()
        # each input grad equals the channel scale
        expected = torch.as_tensor(draw.gamma_shift, dtype=z.dtype)
        assert torch.allclose(z.grad[0, :, 0, 0], expected)


class TestDomainShiftLayer:
    def test_inactive_is_identity(self):
        layer = DomainShiftLayer(4, p=1.0)
        layer.resample(np.random.default_rng(0))
        layer.active = False
        z = torch.randn(2, 4, 3, 3)
        assert layer(z) is z

    def test_active_without_draw_is_identity(self):
        layer = DomainShiftLayer(4, p=1.0)
        layer.active = True
        z = torch.randn(2, 4, 3, 3)
        assert layer(z) is z

    def test_draw_constant_until_resample(self):
        layer = DomainShiftLayer(6, p=1.0)
        layer.active = True
        rng = np.random.default_rng(1)
        layer.resample(rng)
        z = torch.randn(2, 6, 3, 3)
        out1, out2 = layer(z), layer(z)
        assert torch.equal(out1, out2)
        layer.resample(rng)
        out3 = layer(z)
        assert not torch.equal(out1, out3)

    def test_no_trainable_parameters(self):
        layer = DomainShiftLayer(4)
        assert list(layer.parameters()) == []

    def test_seeded_reproducibility(self):
        a = DomainShiftLayer(16, p=0.5)
        b = DomainShiftLayer(16, p=0.5)
        da = a.resample(np.random.default_rng(42))
        db = b.resample(np.random.default_rng(42))
        np.testing.assert_array_equal(da.mask, db.mask)
        np.testing.assert_array_equal(da.gamma_shift, db.gamma_shift)
        np.testing.assert_array_equal(da.lambda_shift, db.lambda_shift)
