import math

import pytest
import torch

from diffmel.errors import NumericalError
from diffmel.generator import VarianceOutputs
from diffmel.losses import (
    loss_adv_g,
    loss_d_total,
    loss_diff_d,
    loss_fm,
    loss_g_total,
    loss_recon,
    loss_spec_d,
)


def t(*values):
    return torch.tensor(values, dtype=torch.float64)


class TestDiscriminatorLosses:
    def test_diff_d_optimum(self):
        assert float(loss_diff_d(t(1.0), t(0.0))) == 0.0

    def test_diff_d_half(self):
        assert abs(float(loss_diff_d(t(0.5), t(0.5))) - 0.5) < 1e-15

    def test_diff_d_worst(self):
        assert abs(float(loss_diff_d(t(0.0), t(1.0))) - 2.0) < 1e-15

    def test_spec_d_optimum(self):
        assert float(loss_spec_d(t(1.0), t(0.0))) == 0.0

    def test_spec_d_hand_case(self):
        assert abs(float(loss_spec_d(t(0.9), t(0.2))) - 0.05) < 1e-15

    def test_spec_d_batch_mean(self):
        assert abs(float(loss_spec_d(t(1.0, 0.0), t(0.0, 1.0))) - 1.0) < 1e-15

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericalError):
            loss_diff_d(t(float("nan")), t(0.0))
        with pytest.raises(NumericalError):
            loss_spec_d(t(1.0), t(float("inf")))


class TestDTotal:
    def test_mixing(self):
        assert abs(loss_d_total(0.4, 0.2, 0.5) - 0.3) < 1e-15

    def test_alpha_extremes(self):
        assert loss_d_total(0.7, 0.1, 1.0) == 0.7
        assert loss_d_total(0.7, 0.1, 0.0) == 0.1

    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError):
            loss_d_total(0.5, 0.5, 1.5)

    def test_mixing_identity_at_half(self):
        l_diff, l_spec = 0.413, 0.871
        mixed = loss_d_total(l_diff, l_spec, 0.5)
        assert abs(mixed - (l_diff + l_spec) / 2.0) <= 1e-12


class TestAdvG:
    def test_optimum(self):
        assert float(loss_adv_g(t(1.0), t(1.0))) == 0.0

    def test_both_zero(self):
        assert abs(float(loss_adv_g(t(0.0), t(0.0))) - 2.0) < 1e-15

    def test_hand_case(self):
        assert abs(float(loss_adv_g(t(0.5), t(1.0))) - 0.25) < 1e-15

    def test_spec_term_optional(self):
        assert abs(float(loss_adv_g(t(0.5), None)) - 0.25) < 1e-15


class TestFeatureMatching:
    def test_identical_is_zero(self):
        feats = [torch.randn(2, 3, 4), torch.randn(2, 5)]
        assert float(loss_fm(feats, list(feats), feats, list(feats), 0.5)) == 0.0

    def test_constant_offset_alpha_one(self):
        real = [torch.zeros(2, 4)]
        fake = [torch.ones(2, 4)]
        same = [torch.randn(2, 4)]
        assert abs(float(loss_fm(real, fake, same, list(same), 1.0)) - 1.0) < 1e-15

    def test_alpha_zero_spec_only(self):
        real_d, fake_d = [torch.zeros(2, 4)], [torch.ones(2, 4)]
        real_s, fake_s = [torch.zeros(3, 3)], [torch.full((3, 3), 2.0)]
        assert abs(float(loss_fm(real_d, fake_d, real_s, fake_s, 0.0)) - 2.0) < 1e-15

    def test_no_gradient_through_real_branch(self):
        real = [torch.randn(2, 3, requires_grad=True)]
        fake = [torch.randn(2, 3, requires_grad=True)]
        loss_fm(real, fake, None, None, 0.5).backward()
        assert real[0].grad is None
        assert fake[0].grad is not None

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            loss_fm([torch.zeros(2)], [torch.zeros(2), torch.zeros(2)], None, None, 0.5)

    def test_ablated_spec_uses_unit_weight(self):
        real_d, fake_d = [torch.zeros(2, 4)], [torch.ones(2, 4)]
        assert abs(float(loss_fm(real_d, fake_d, None, None, 0.5)) - 1.0) < 1e-15


def make_var(pred_dur, pred_pitch, pred_energy):
    return VarianceOutputs(
        log_durations=pred_dur, pitch=pred_pitch, energy=pred_energy,
        expanded_frames=torch.tensor([pred_dur.shape[1]]),
    )


class TestRecon:
    def targets(self, p=3):
        durs = torch.tensor([[2, 3, 1]])
        return {"durations": durs,
                "pitch": torch.zeros(1, p), "energy": torch.zeros(1, p)}

    def test_perfect_predictions_zero(self):
        tg = self.targets()
        var = make_var(torch.log(tg["durations"].float()), tg["pitch"], tg["energy"])
        mel = torch.randn(1, 6, 4)
        total, breakdown = loss_recon(
            var, tg, mel, mel.clone(),
            torch.ones(1, 3, dtype=torch.bool), torch.ones(1, 6, dtype=torch.bool),
        )
        assert float(total) == 0.0
        assert breakdown["recon_mel"] == 0.0

    def test_mel_constant_offset(self):
        tg = self.targets()
        var = make_var(torch.log(tg["durations"].double()), tg["pitch"], tg["energy"])
        mel = torch.randn(1, 6, 4)
        total, breakdown = loss_recon(
            var, tg, mel + 1.0, mel,
            torch.ones(1, 3, dtype=torch.bool), torch.ones(1, 6, dtype=torch.bool),
        )
        assert abs(float(total) - 1.0) < 1e-12
        assert abs(breakdown["recon_mel"] - 1.0) < 1e-12

    def test_padded_frames_excluded(self):
        tg = self.targets()
        var = make_var(torch.log(tg["durations"].double()), tg["pitch"], tg["energy"])
        mel_pred = torch.randn(1, 6, 4)
        mel_true = torch.randn(1, 6, 4)
        base, _ = loss_recon(var, tg, mel_pred, mel_true,
                             torch.ones(1, 3, dtype=torch.bool),
                             torch.ones(1, 6, dtype=torch.bool))
        pad = torch.randn(1, 4, 4) * 100
        padded_pred = torch.cat([mel_pred, pad], dim=1)
        padded_true = torch.cat([mel_true, torch.zeros(1, 4, 4)], dim=1)
        mel_mask = torch.cat([torch.ones(1, 6), torch.zeros(1, 4)], dim=1).bool()
        padded, _ = loss_recon(var, tg, padded_pred, padded_true,
                               torch.ones(1, 3, dtype=torch.bool), mel_mask)
        assert abs(float(base) - float(padded)) < 1e-12

    def test_shape_mismatch_rejected(self):
        tg = self.targets()
        var = make_var(torch.zeros(1, 3), tg["pitch"], tg["energy"])
        with pytest.raises(ValueError):
            loss_recon(var, tg, torch.zeros(1, 6, 4), torch.zeros(1, 5, 4),
                       torch.ones(1, 3, dtype=torch.bool),
                       torch.ones(1, 6, dtype=torch.bool))


class TestGTotal:
    def scalar(self, v):
        return torch.tensor(v, dtype=torch.float64)

    def test_forced_arithmetic(self):
        l_g, lam = loss_g_total(self.scalar(0.0), self.scalar(2.0), self.scalar(0.5))
        assert lam == 4.0
        assert abs(float(l_g) - 4.0) < 1e-12  # 0 + 2 + 4*0.5

    def test_zero_fm_contributes_nothing(self):
        l_g, lam = loss_g_total(self.scalar(0.1), self.scalar(1.0), self.scalar(0.0))
        assert math.isfinite(lam)
        assert abs(float(l_g) - 1.1) < 1e-12

    def test_hand_total(self):
        l_g, lam = loss_g_total(self.scalar(0.3), self.scalar(1.2), self.scalar(0.4))
        assert abs(float(l_g) - 2.7) < 1e-12

    def test_lambda_identity(self):
        # the identity is over reported (python float) values
        for recon, fm in [(0.37, 0.82), (2.5, 0.003), (1e-3, 5.0)]:
            _, lam = loss_g_total(self.scalar(0.0), self.scalar(recon), self.scalar(fm))
            assert abs(lam * fm - recon) <= 1e-9

    def test_lambda_is_gradient_free(self):
        recon = torch.tensor(2.0, dtype=torch.float64, requires_grad=True)
        fm = torch.tensor(0.5, dtype=torch.float64, requires_grad=True)
        l_g, lam = loss_g_total(self.scalar(0.0), recon, fm)
        l_g.backward()
        assert recon.grad is not None and abs(float(recon.grad) - 1.0) < 1e-12
        # gradient through fm is the constant lambda, not d(recon/fm)/dfm
        assert abs(float(fm.grad) - lam) < 1e-12
