import pytest
import torch

from diffmel.discriminators import (
    DiffusionDiscriminator,
    SpectrogramDiscriminator,
    minibatch_stddev,
)


class TestMinibatchStddev:
    def test_identical_batch_zero(self):
        x = torch.ones(4, 3, 5, 5)
        out = minibatch_stddev(x)
        assert out.shape == (4, 4, 5, 5)
        assert torch.equal(out[:, 3], torch.zeros(4, 5, 5))

    def test_batch_of_one_zero(self):
        out = minibatch_stddev(torch.randn(1, 2, 3, 3))
        assert torch.equal(out[:, 2], torch.zeros(1, 3, 3))

    def test_two_scalars_population_stddev(self):
        # values {0, 2}: population stddev is 1.0 everywhere
        x = torch.tensor([[[[0.0]]], [[[2.0]]]])
        out = minibatch_stddev(x)
        assert torch.allclose(out[:, 1], torch.ones(2, 1, 1))

    def test_permutation_invariant(self):
        x = torch.randn(6, 2, 4, 4)
        a = minibatch_stddev(x)[:, -1]
        b = minibatch_stddev(x[torch.randperm(6, generator=torch.Generator().manual_seed(0))])[:, -1]
        assert torch.allclose(a[0], b[0])


class TestDiffusionDiscriminator:
    def make(self, seed=0, **kw):
        torch.manual_seed(seed)
        return DiffusionDiscriminator(base_channels=8, max_channels=32, **kw)

    def test_score_and_feature_contract(self):
        disc = self.make()
        x_prev, x_t = torch.randn(2, 80, 80), torch.randn(2, 80, 80)
        out = disc(x_prev, x_t, 2)
        assert out.score.shape == (2,)
        assert len(out.features) == 6
        extents = [f.shape[2] * f.shape[3] for f in out.features]
        assert all(a > b for a, b in zip(extents, extents[1:]))
        assert all(torch.isfinite(f).all() for f in out.features)

    def test_t_sensitivity(self):
        disc = self.make()
        disc.eval()
        x_prev, x_t = torch.randn(1, 40, 80), torch.randn(1, 40, 80)
        a = disc(x_prev, x_t, 1).score
        b = disc(x_prev, x_t, 4).score
        assert (a - b).abs().max() > 0

    def test_pair_order_sensitivity(self):
        disc = self.make()
        disc.eval()
        x_prev, x_t = torch.randn(1, 40, 80), torch.randn(1, 40, 80)
        a = disc(x_prev, x_t, 2).score
        b = disc(x_t, x_prev, 2).score
        assert (a - b).abs().max() > 0

    def test_shape_mismatch_rejected(self):
        disc = self.make()
        with pytest.raises(ValueError):
            disc(torch.randn(1, 40, 80), torch.randn(1, 41, 80), 2)

    def test_speaker_routing_variant(self):
        disc = self.make(d_spk=16)
        disc.eval()
        assert disc.uses_speaker
        x_prev, x_t = torch.randn(1, 40, 80), torch.randn(1, 40, 80)
        with pytest.raises(ValueError):
            disc(x_prev, x_t, 2)
        a = disc(x_prev, x_t, 2, spk=torch.zeros(1, 16)).score
        b = disc(x_prev, x_t, 2, spk=torch.ones(1, 16)).score
        assert (a - b).abs().max() > 0

    def test_small_inputs_clamp_at_unit_extent(self):
        disc = self.make()
        out = disc(torch.randn(1, 8, 8), torch.randn(1, 8, 8), 1)
        assert out.features[-1].shape[2] >= 1
        assert out.features[-1].shape[3] >= 1


class TestSpectrogramDiscriminator:
    def make(self, seed=0):
        torch.manual_seed(seed)
        return SpectrogramDiscriminator(channels=8, d_spk=16)

    def test_score_and_feature_count(self):
        disc = self.make()
        out = disc(torch.randn(2, 80, 80), torch.randn(2, 16))
        assert out.score.shape == (2,)
        assert len(out.features) == 5

    def test_speaker_sensitivity(self):
        disc = self.make()
        disc.eval()
        mel = torch.randn(1, 60, 80)
        a = disc(mel, torch.zeros(1, 16)).score
        b = disc(mel, torch.ones(1, 16)).score
        assert (a - b).abs().max() > 0

    def test_doubling_frames_changes_only_time_extent(self):
        disc = self.make()
        out1 = disc(torch.randn(1, 40, 80), torch.zeros(1, 16))
        out2 = disc(torch.randn(1, 80, 80), torch.zeros(1, 16))
        for f1, f2 in zip(out1.features, out2.features):
            assert f1.shape[1] == f2.shape[1]  # channels unchanged
            assert f1.shape[2] == f2.shape[2]  # mel-bin extent unchanged
            assert f2.shape[3] > f1.shape[3]   # time extent grows

    def test_finite_for_finite_inputs(self):
        disc = self.make()
        out = disc(torch.randn(3, 30, 80) * 100, torch.randn(3, 16) * 100)
        assert torch.isfinite(out.score).all()
        assert all(torch.isfinite(f).all() for f in out.features)
