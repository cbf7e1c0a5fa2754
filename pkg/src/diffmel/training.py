"""Training harness: alternating discriminator/generator updates,
checkpointing, structured logging, and the ablation presets.

Every random draw flows through per-step generators derived from
(seed, step), so an interrupted run resumed from a checkpoint replays
exactly.  Each logged step is one discriminator update followed by one
generator update; the two optimizers own disjoint parameter sets, and
the frozen side of each update is verified to stay bit-identical by the
test suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import torch

from .config import RunConfig, to_dict
from .dataset import Batch, Corpus, collate, load_corpus, make_batches, split_corpus
from .discriminators import build_discriminators
from .errors import DataError, NumericalError
from .generator import build_generator
from .losses import (
    LossReport,
    loss_adv_g,
    loss_d_total,
    loss_diff_d,
    loss_fm,
    loss_g_total,
    loss_recon,
    loss_spec_d,
)
from .schedule import DiffusionSchedule, build_schedule, posterior_sample, q_sample, q_step
from .speakers import SpeakerStore


@dataclass
class Models:
    generator: torch.nn.Module
    disc_diffusion: torch.nn.Module
    disc_spectrogram: torch.nn.Module | None
    speakers: SpeakerStore

    def generator_parameters(self):
        params = list(self.generator.parameters())
        if self.speakers.mode == "lookup":
            params += list(self.speakers.parameters())
        return params

    def discriminator_parameters(self):
        params = list(self.disc_diffusion.parameters())
        if self.disc_spectrogram is not None:
            params += list(self.disc_spectrogram.parameters())
        return params


def build_models(cfg: RunConfig, store: SpeakerStore) -> Models:
    """Construct all modules under the configured seed."""
    torch.manual_seed(cfg.train.seed)
    embeddings = None
    if store.mode == "precomputed":
        embeddings = {sid: store.fixed[i].tolist() for i, sid in enumerate(store.speaker_ids)}
    speakers = SpeakerStore(store.speaker_ids, cfg.model.speaker_dim,
                            mode=store.mode, embeddings=embeddings)
    generator = build_generator(cfg)
    disc_d, disc_s = build_discriminators(cfg)
    return Models(generator=generator, disc_diffusion=disc_d,
                  disc_spectrogram=disc_s, speakers=speakers)


def sample_timesteps(batch_size: int, T: int, rng: torch.Generator) -> torch.Tensor:
    """Uniform timesteps in {1..T}, one per batch element."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    return torch.randint(1, T + 1, (batch_size,), generator=rng)


def _step_rng(seed: int, step: int, salt: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed((seed * 1_000_003 + step * 7_919 + salt) % (2**63 - 1))
    return g


@dataclass
class StepNoises:
    """All random draws for one training step, fixed up front."""

    t: torch.Tensor
    noise_prev: torch.Tensor
    noise_step: torch.Tensor
    noise_post: torch.Tensor
    rollout: list[torch.Tensor] | None = None


def draw_step_noises(batch: Batch, schedule: DiffusionSchedule, cfg: RunConfig,
                     rng: torch.Generator, t_override=None) -> StepNoises:
    shape = batch.mel.shape
    t = t_override if t_override is not None else sample_timesteps(shape[0], schedule.T, rng)
    mk = lambda: torch.randn(*shape, generator=rng, dtype=batch.mel.dtype)
    rollout = None
    if cfg.train.fake_x0_mode == "rollout":
        rollout = [mk() for _ in range(schedule.T + 1)]
    return StepNoises(t=t, noise_prev=mk(), noise_step=mk(), noise_post=mk(), rollout=rollout)


def make_real_pair(mel, mel_mask, t, schedule, noises: StepNoises):
    """Draw a coupled forward-chain pair (x_{t-1}, x_t) from the reference mel."""
    mask = mel_mask.unsqueeze(-1).to(mel.dtype)
    x_prev = q_sample(mel, t - 1, schedule, noises.noise_prev).x_t * mask
    x_t = q_step(x_prev, t, schedule, noises.noise_step) * mask
    return x_prev, x_t


def _rollout_fake_x0(models, schedule, cond, mel_mask, spk, noises):
    """Full reverse chain from pure noise, for the rollout fake mode."""
    mask = mel_mask.unsqueeze(-1).to(cond.dtype)
    x = noises.rollout[0] * mask
    for i, t in enumerate(range(schedule.T, 0, -1)):
        x0_pred = models.generator.decoder(x, cond, spk, t, mel_mask)
        x = posterior_sample(x, x0_pred, t, schedule, noises.rollout[i + 1]) * mask
    return x


def _generator_outputs(models, batch, t, spk, schedule, noises, cfg):
    """Run the generator on the noised reference; returns the clean-mel
    prediction, variance outputs, the D_s fake, and the real pair."""
    x_prev_real, x_t = make_real_pair(batch.mel, batch.mel_mask, t, schedule, noises)
    x0_pred, var_out, mel_mask = models.generator(
        x_t, batch.phoneme_ids, spk, t, mode="train",
        durations=batch.durations, pitch=batch.pitch, energy=batch.energy,
    )
    if cfg.train.fake_x0_mode == "rollout" and models.disc_spectrogram is not None:
        hidden, src_mask = models.generator.encoder(batch.phoneme_ids)
        cond, _, _ = models.generator.adaptor(
            hidden, src_mask, mode="train",
            durations=batch.durations, pitch=batch.pitch, energy=batch.energy,
        )
        x0_fake = _rollout_fake_x0(models, schedule, cond, mel_mask, spk, noises)
    else:
        x0_fake = x0_pred
    return x0_pred, var_out, mel_mask, x0_fake, x_prev_real, x_t


def compute_d_losses(batch: Batch, models: Models, schedule, cfg: RunConfig,
                     noises: StepNoises):
    """Discriminator-side losses as tensors (generator runs without grad)."""
    alpha = cfg.train.alpha
    t = noises.t
    spk = models.speakers(batch.speaker_index).detach()
    d_spk = spk if models.disc_diffusion.uses_speaker else None

    with torch.no_grad():
        _, _, _, x0_fake, x_prev_real, x_t = _generator_outputs(
            models, batch, t, spk, schedule, noises, cfg)
        x_prev_fake = posterior_sample(x_t, x0_fake, t, schedule, noises.noise_post)
        x_prev_fake = x_prev_fake * batch.mel_mask.unsqueeze(-1).to(x_t.dtype)

    real_out = models.disc_diffusion(x_prev_real, x_t, t, spk=d_spk)
    fake_out = models.disc_diffusion(x_prev_fake, x_t, t, spk=d_spk)
    l_diff = loss_diff_d(real_out.score, fake_out.score)

    if models.disc_spectrogram is None:
        return {"l_diff": l_diff, "l_spec": None, "l_d": l_diff}
    s_real = models.disc_spectrogram(batch.mel, spk)
    s_fake = models.disc_spectrogram(x0_fake, spk)
    l_spec = loss_spec_d(s_real.score, s_fake.score)
    return {"l_diff": l_diff, "l_spec": l_spec,
            "l_d": loss_d_total(l_diff, l_spec, alpha)}


def d_losses_exact_sum(batch, models, schedule, cfg, rng):
    """Eq.-style exact sum over all timesteps instead of sampling one."""
    totals = None
    for t_value in range(1, schedule.T + 1):
        t = torch.full((batch.mel.shape[0],), t_value, dtype=torch.long)
        noises = draw_step_noises(batch, schedule, cfg, rng, t_override=t)
        losses = compute_d_losses(batch, models, schedule, cfg, noises)
        if totals is None:
            totals = {k: v for k, v in losses.items() if v is not None}
        else:
            totals = {k: totals[k] + v for k, v in losses.items() if v is not None}
    return totals


def compute_g_losses(batch: Batch, models: Models, schedule, cfg: RunConfig,
                     noises: StepNoises, lambda_override: float | None = None):
    """Generator-side losses as tensors (discriminators held frozen)."""
    alpha = cfg.train.alpha
    t = noises.t
    spk = models.speakers(batch.speaker_index)
    d_spk = spk if models.disc_diffusion.uses_speaker else None

    x0_pred, var_out, mel_mask, x0_fake, x_prev_real, x_t = _generator_outputs(
        models, batch, t, spk, schedule, noises, cfg)
    x_prev_fake = posterior_sample(x_t, x0_pred, t, schedule, noises.noise_post)
    x_prev_fake = x_prev_fake * batch.mel_mask.unsqueeze(-1).to(x_t.dtype)

    fake_out = models.disc_diffusion(x_prev_fake, x_t, t, spk=d_spk)
    with torch.no_grad():
        real_out = models.disc_diffusion(x_prev_real, x_t, t, spk=d_spk)

    if models.disc_spectrogram is not None:
        s_fake = models.disc_spectrogram(x0_fake, spk)
        with torch.no_grad():
            s_real = models.disc_spectrogram(batch.mel, spk)
        l_adv = loss_adv_g(fake_out.score, s_fake.score)
        l_fm = loss_fm(real_out.features, fake_out.features,
                       s_real.features, s_fake.features, alpha)
    else:
        l_adv = loss_adv_g(fake_out.score, None)
        l_fm = loss_fm(real_out.features, fake_out.features, None, None, alpha)

    targets = {"durations": batch.durations, "pitch": batch.pitch, "energy": batch.energy}
    l_recon, breakdown = loss_recon(var_out, targets, x0_pred, batch.mel,
                                    batch.src_mask, batch.mel_mask)
    if lambda_override is None:
        l_g, lambda_fm = loss_g_total(l_adv, l_recon, l_fm)
    else:
        lambda_fm = lambda_override
        l_g = l_adv + l_recon + lambda_fm * l_fm
    return {"l_adv": l_adv, "l_fm": l_fm, "l_recon": l_recon, "l_g": l_g,
            "lambda_fm": lambda_fm, "breakdown": breakdown}


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return total ** 0.5


def _require_finite(value, what, step):
    if not torch.isfinite(torch.as_tensor(value)).all():
        raise NumericalError(f"non-finite {what} at step {step}")


def train_step_d(batch, models, schedule, cfg, opt_d, rng, step=0) -> LossReport:
    noises = draw_step_noises(batch, schedule, cfg, rng)
    losses = compute_d_losses(batch, models, schedule, cfg, noises)
    _require_finite(losses["l_d"], "discriminator loss", step)
    opt_d.zero_grad(set_to_none=True)
    losses["l_d"].backward()
    opt_d.step()
    l_spec = losses["l_spec"]
    report = LossReport(
        alpha=cfg.train.alpha,
        l_diff=float(losses["l_diff"].detach()),
        l_spec=None if l_spec is None else float(l_spec.detach()),
        t_sampled=noises.t.tolist(),
    )
    # recompute the mix on reported floats so the logged identity is exact
    if l_spec is None:
        report.l_d = report.l_diff
    else:
        report.l_d = cfg.train.alpha * report.l_diff + (1.0 - cfg.train.alpha) * report.l_spec
    return report


def train_step_g(batch, models, schedule, cfg, opt_g, rng, step=0) -> LossReport:
    d_params = models.discriminator_parameters()
    for p in d_params:
        p.requires_grad_(False)
    try:
        noises = draw_step_noises(batch, schedule, cfg, rng)
        losses = compute_g_losses(batch, models, schedule, cfg, noises)
        _require_finite(losses["l_g"], "generator loss", step)
        opt_g.zero_grad(set_to_none=True)
        losses["l_g"].backward()
        opt_g.step()
    finally:
        for p in d_params:
            p.requires_grad_(True)
    report = LossReport(
        alpha=cfg.train.alpha,
        l_adv=float(losses["l_adv"].detach()),
        l_recon=float(losses["l_recon"].detach()),
        l_fm=float(losses["l_fm"].detach()),
        lambda_fm=losses["lambda_fm"],
        l_g=float(losses["l_g"].detach()),
        recon_breakdown=losses["breakdown"],
        t_sampled=noises.t.tolist(),
    )
    return report


def make_optimizers(models: Models, cfg: RunConfig):
    betas = tuple(cfg.train.adam_betas)
    opt_g = torch.optim.Adam(models.generator_parameters(), lr=cfg.train.lr_g, betas=betas)
    opt_d = torch.optim.Adam(models.discriminator_parameters(), lr=cfg.train.lr_d, betas=betas)
    return opt_g, opt_d


def save_checkpoint(path, step, models, opt_g, opt_d, stats, cfg):
    """Atomic checkpoint write (temp file + rename)."""
    path = Path(path)
    payload = {
        "step": step,
        "generator": models.generator.state_dict(),
        "disc_diffusion": models.disc_diffusion.state_dict(),
        "disc_spectrogram": None if models.disc_spectrogram is None
        else models.disc_spectrogram.state_dict(),
        "speakers": models.speakers.state_dict(),
        "speaker_ids": models.speakers.speaker_ids,
        "speaker_mode": models.speakers.mode,
        "opt_g": opt_g.state_dict(),
        "opt_d": opt_d.state_dict(),
        "stats": stats,
        "config": to_dict(cfg),
        "torch_rng": torch.get_rng_state(),
    }
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path):
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as e:
        raise DataError(f"cannot load checkpoint {path}: {e}") from e


def restore_models(payload, cfg: RunConfig) -> Models:
    store = SpeakerStore(payload["speaker_ids"], cfg.model.speaker_dim,
                         mode="lookup")  # weights replaced below
    if payload["speaker_mode"] == "precomputed":
        store = SpeakerStore(
            payload["speaker_ids"], cfg.model.speaker_dim, mode="precomputed",
            embeddings={sid: payload["speakers"]["fixed"][i].tolist()
                        for i, sid in enumerate(payload["speaker_ids"])},
        )
    models = build_models(cfg, store)
    models.generator.load_state_dict(payload["generator"])
    models.disc_diffusion.load_state_dict(payload["disc_diffusion"])
    if models.disc_spectrogram is not None and payload["disc_spectrogram"] is not None:
        models.disc_spectrogram.load_state_dict(payload["disc_spectrogram"])
    models.speakers.load_state_dict(payload["speakers"])
    return models


def _essential_config(data: dict) -> dict:
    """Config subset that must match on resume; run-length and logging
    knobs may change between sessions."""
    out = {k: dict(v) for k, v in data.items()}
    for key in ("total_steps", "checkpoint_interval", "log_interval"):
        out["train"].pop(key, None)
    return out


def run_training(cfg: RunConfig, data_dir, out_dir, resume=None, echo=print) -> Path:
    """Full training loop; returns the final checkpoint path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(data_dir, cfg)
    train_utts, _val_utts = split_corpus(
        corpus.utterances, cfg.train.validation_count, cfg.train.seed)
    if not train_utts:
        raise DataError("training split is empty")
    schedule = build_schedule(cfg.model.diffusion.T, cfg.model.diffusion.schedule)

    start_step = 0
    if resume is not None:
        payload = load_checkpoint(resume)
        if _essential_config(payload["config"]) != _essential_config(to_dict(cfg)):
            raise DataError("checkpoint config does not match the run config")
        models = restore_models(payload, cfg)
        opt_g, opt_d = make_optimizers(models, cfg)
        opt_g.load_state_dict(payload["opt_g"])
        opt_d.load_state_dict(payload["opt_d"])
        torch.set_rng_state(payload["torch_rng"])
        start_step = payload["step"]
    else:
        models = build_models(cfg, corpus.store)
        opt_g, opt_d = make_optimizers(models, cfg)
        torch.manual_seed(cfg.train.seed)

    log_path = out / "train.log"
    log = open(log_path, "a")
    batches = None
    batches_per_epoch = max(1, (len(train_utts) + cfg.train.batch_size - 1) // cfg.train.batch_size)
    epoch = -1

    ckpt_path = out / "checkpoint.pt"
    if cfg.train.total_steps == 0 or start_step == 0:
        save_checkpoint(ckpt_path, start_step, models, opt_g, opt_d, corpus.stats, cfg)

    try:
        for step in range(start_step, cfg.train.total_steps):
            step_epoch = step // batches_per_epoch
            if step_epoch != epoch:
                epoch = step_epoch
                batches = make_batches(train_utts, cfg.train.batch_size, cfg.train.seed, epoch)
            batch = collate([train_utts[i] for i in batches[step % batches_per_epoch]])

            t0 = time.perf_counter()
            for k in range(cfg.train.d_updates_per_g):
                rng_d = _step_rng(cfg.train.seed, step, salt=2 * k + 1)
                report = train_step_d(batch, models, schedule, cfg, opt_d, rng_d, step)
            grad_d = _grad_norm(models.discriminator_parameters())
            rng_g = _step_rng(cfg.train.seed, step, salt=2)
            report_g = train_step_g(batch, models, schedule, cfg, opt_g, rng_g, step)
            grad_g = _grad_norm(models.generator_parameters())
            report.merge(report_g)
            wall = time.perf_counter() - t0

            if cfg.train.lr_decay < 1.0:
                for opt in (opt_g, opt_d):
                    for group in opt.param_groups:
                        group["lr"] *= cfg.train.lr_decay

            line = report.log_line(step + 1, grad_norm_d=f"{grad_d:.4f}",
                                   grad_norm_g=f"{grad_g:.4f}", wall=f"{wall:.3f}")
            log.write(line + "\n")
            log.flush()
            if echo and (step + 1) % cfg.train.log_interval == 0:
                echo(line)
            if (step + 1) % cfg.train.checkpoint_interval == 0 or step + 1 == cfg.train.total_steps:
                save_checkpoint(ckpt_path, step + 1, models, opt_g, opt_d, corpus.stats, cfg)
    finally:
        log.close()
    return ckpt_path
