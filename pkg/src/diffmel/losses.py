"""Adversarial, feature-matching, and reconstruction losses.

Both discriminators train against least-squares targets (real -> 1,
fake -> 0); the generator drives fakes toward 1.  The total
discriminator loss mixes the two adversaries with ratio ``alpha``; the
generator total is adversarial + reconstruction + feature matching, the
last scaled so its magnitude tracks the reconstruction term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import NumericalError

EPS_DIV = 1e-8


@dataclass
class LossReport:
    """Scalar loss values for one training step, for logging and tests."""

    alpha: float
    l_diff: float | None = None
    l_spec: float | None = None
    l_d: float | None = None
    l_adv: float | None = None
    l_recon: float | None = None
    l_fm: float | None = None
    lambda_fm: float | None = None
    l_g: float | None = None
    recon_breakdown: dict = field(default_factory=dict)
    t_sampled: list = field(default_factory=list)

    def merge(self, other: "LossReport") -> "LossReport":
        for name in ("l_diff", "l_spec", "l_d", "l_adv", "l_recon",
                     "l_fm", "lambda_fm", "l_g"):
            if getattr(self, name) is None:
                setattr(self, name, getattr(other, name))
        self.recon_breakdown.update(other.recon_breakdown)
        self.t_sampled = self.t_sampled or other.t_sampled
        return self

    def log_line(self, step: int, **extras) -> str:
        parts = [f"step={step}"]
        for name in ("l_diff", "l_spec", "l_d", "l_adv", "l_recon",
                     "l_fm", "lambda_fm", "l_g"):
            value = getattr(self, name)
            if value is not None:
                parts.append(f"{name}={value:.6f}")
        parts.append(f"alpha={self.alpha}")
        if self.t_sampled:
            parts.append("t=" + ",".join(str(t) for t in self.t_sampled))
        parts.extend(f"{k}={v}" for k, v in extras.items())
        return " ".join(parts)


def _check_finite(name, *scores):
    for s in scores:
        if s is not None and not torch.isfinite(torch.as_tensor(s)).all():
            raise NumericalError(f"non-finite scores in {name}")


def loss_diff_d(real_pair_score: torch.Tensor, fake_pair_score: torch.Tensor) -> torch.Tensor:
    """Transition-discriminator loss: (D(real)-1)^2 + D(fake)^2, batch mean."""
    _check_finite("loss_diff_d", real_pair_score, fake_pair_score)
    return ((real_pair_score - 1.0) ** 2).mean() + (fake_pair_score ** 2).mean()


def loss_spec_d(real_score: torch.Tensor, fake_score: torch.Tensor) -> torch.Tensor:
    """Spectrogram-discriminator loss, same least-squares form."""
    _check_finite("loss_spec_d", real_score, fake_score)
    return ((real_score - 1.0) ** 2).mean() + (fake_score ** 2).mean()


def loss_d_total(l_diff, l_spec, alpha: float):
    """Mix the two discriminator losses: alpha*l_diff + (1-alpha)*l_spec."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * l_diff + (1.0 - alpha) * l_spec


def loss_adv_g(fake_pair_score_d: torch.Tensor,
               fake_spec_score: torch.Tensor | None) -> torch.Tensor:
    """Generator adversarial loss; drives both fake scores toward 1.

    ``fake_spec_score`` is None when the spectrogram discriminator is
    ablated away.
    """
    _check_finite("loss_adv_g", fake_pair_score_d, fake_spec_score)
    total = ((fake_pair_score_d - 1.0) ** 2).mean()
    if fake_spec_score is not None:
        total = total + ((fake_spec_score - 1.0) ** 2).mean()
    return total


def loss_fm(real_features_d, fake_features_d, real_features_s, fake_features_s,
            alpha: float) -> torch.Tensor:
    """Feature matching: summed mean-L1 gaps over all feature maps.

    Real-branch features are treated as constants (detached).  With the
    spectrogram discriminator present the two sums are mixed by the same
    alpha as the discriminator loss; without it the transition sum is
    used unweighted.
    """

    def fm_sum(real, fake):
        if len(real) != len(fake):
            raise ValueError(f"feature count mismatch: {len(real)} vs {len(fake)}")
        total = None
        for r, f in zip(real, fake):
            if r.shape != f.shape:
                raise ValueError(
                    f"feature shape mismatch: {tuple(r.shape)} vs {tuple(f.shape)}"
                )
            term = (f - r.detach()).abs().mean()
            total = term if total is None else total + term
        return total

    d_sum = fm_sum(real_features_d, fake_features_d)
    if real_features_s is None:
        return d_sum
    s_sum = fm_sum(real_features_s, fake_features_s)
    return alpha * d_sum + (1.0 - alpha) * s_sum


def loss_recon(var_pred, var_targets, x0_pred, x0_true, src_mask, mel_mask):
    """Masked reconstruction loss with a per-term breakdown.

    MSE on log-durations, pitch, and energy over real phoneme positions
    plus L1 between predicted and reference mel over real frames.
    ``var_targets`` is a dict with keys durations (frame counts), pitch,
    energy.
    """
    if x0_pred.shape != x0_true.shape:
        raise ValueError(
            f"mel shape mismatch: {tuple(x0_pred.shape)} vs {tuple(x0_true.shape)}"
        )
    src = src_mask.to(x0_pred.dtype)
    n_src = src.sum().clamp(min=1.0)
    log_dur_target = torch.log(var_targets["durations"].clamp(min=1).to(x0_pred.dtype))

    def masked_mse(pred, target):
        return (((pred - target) ** 2) * src).sum() / n_src

    dur_term = masked_mse(var_pred.log_durations, log_dur_target)
    pitch_term = masked_mse(var_pred.pitch, var_targets["pitch"].to(x0_pred.dtype))
    energy_term = masked_mse(var_pred.energy, var_targets["energy"].to(x0_pred.dtype))

    mel_w = mel_mask.to(x0_pred.dtype).unsqueeze(-1)
    n_mel = (mel_w.sum() * x0_pred.shape[-1]).clamp(min=1.0)
    mel_term = ((x0_pred - x0_true).abs() * mel_w).sum() / n_mel

    total = dur_term + pitch_term + energy_term + mel_term
    breakdown = {
        "recon_duration": float(dur_term.detach()),
        "recon_pitch": float(pitch_term.detach()),
        "recon_energy": float(energy_term.detach()),
        "recon_mel": float(mel_term.detach()),
    }
    return total, breakdown


def loss_g_total(l_adv, l_recon, l_fm, eps_div: float = EPS_DIV):
    """Generator total with the feature-matching weight held constant.

    The weight is the detached ratio recon/fm, guarded against division
    by zero; gradients flow through l_fm but not through the ratio.
    """
    recon_const = float(torch.as_tensor(l_recon).detach())
    fm_const = float(torch.as_tensor(l_fm).detach())
    lambda_fm = recon_const / max(fm_const, eps_div)
    l_g = l_adv + l_recon + lambda_fm * l_fm
    return l_g, lambda_fm
