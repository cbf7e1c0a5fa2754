"""Text-to-mel inference: reverse-chain synthesis, per-step dumps,
real-time-factor measurement, and audio rendering.

Synthesis runs the reverse chain from standard normal noise in the
normalized mel space, with the text encoded once and the decoder called
once per diffusion step; the returned mel is denormalized.  Rendering
either exports the mel (vocoder file contract: tensor container plus a
JSON sidecar with the feature settings) or reconstructs audible audio
with Griffin-Lim.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio import griffin_lim, save_wav
from .config import RunConfig, from_dict, vocab_ids
from .errors import DataError, NumericalError
from .schedule import build_schedule, posterior_sample
from .tensorio import save_sidecar, save_tensor
from .training import Models, load_checkpoint, restore_models


@dataclass
class SynthesisRequest:
    phonemes: list[str]
    speaker_id: str
    seed: int = 0
    duration_override: list[int] | None = None
    dump_steps: bool = False


@dataclass
class SynthesisResult:
    mel: np.ndarray                       # (F, n_mels), denormalized
    steps: list[np.ndarray] | None        # x_T .. x_0, denormalized
    frames: int
    audio_seconds: float
    timings: dict = field(default_factory=dict)


@dataclass
class LoadedModel:
    cfg: RunConfig
    models: Models
    stats: dict

    @property
    def schedule(self):
        return build_schedule(self.cfg.model.diffusion.T, self.cfg.model.diffusion.schedule)


def load_for_synthesis(checkpoint_path) -> LoadedModel:
    payload = load_checkpoint(checkpoint_path)
    cfg = from_dict(payload["config"])
    models = restore_models(payload, cfg)
    models.generator.eval()
    models.disc_diffusion.eval()
    if models.disc_spectrogram is not None:
        models.disc_spectrogram.eval()
    return LoadedModel(cfg=cfg, models=models, stats=payload["stats"])


def _denormalize(mel: torch.Tensor, loaded: LoadedModel) -> np.ndarray:
    out = mel.detach().cpu().numpy().astype(np.float64)
    if loaded.cfg.feature.normalize_mel:
        mean = np.asarray(loaded.stats["mel_mean"])
        std = np.asarray(loaded.stats["mel_std"])
        out = out * std + mean
    return out


def synthesize(request: SynthesisRequest, loaded: LoadedModel) -> SynthesisResult:
    """Phonemes + speaker -> denormalized mel (plus per-step dump)."""
    cfg, models = loaded.cfg, loaded.models
    vocab = vocab_ids(cfg.model.vocab)
    unknown = [p for p in request.phonemes if p not in vocab]
    if unknown:
        raise DataError(f"unknown phoneme {unknown[0]!r}")
    ids = torch.tensor([[vocab[p] for p in request.phonemes]], dtype=torch.long)
    spk_index = torch.tensor([models.speakers.index_of(request.speaker_id)])
    schedule = loaded.schedule
    rng = torch.Generator().manual_seed(request.seed)

    timings = {}
    with torch.no_grad():
        spk = models.speakers(spk_index)

        t0 = time.perf_counter()
        hidden, mask = models.generator.encoder(ids)
        timings["encode"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        override = None
        if request.duration_override is not None:
            override = torch.tensor([request.duration_override], dtype=torch.long)
            if override.shape[1] != ids.shape[1]:
                raise DataError("duration override length must match the phoneme count")
        cond, mel_mask, _ = models.generator.adaptor(
            hidden, mask, mode="infer", duration_override=override)
        timings["adapt"] = time.perf_counter() - t0

        frames = cond.shape[1]
        x = torch.randn(1, frames, cfg.feature.n_mels, generator=rng)
        steps = [x]
        decode_times = []
        for t in range(schedule.T, 0, -1):
            t0 = time.perf_counter()
            x0_pred = models.generator.decoder(x, cond, spk, t, mel_mask)
            decode_times.append(time.perf_counter() - t0)
            noise = torch.randn(x.shape, generator=rng)
            x = posterior_sample(x, x0_pred, t, schedule, noise)
            if not torch.isfinite(x).all():
                raise NumericalError(f"non-finite mel in reverse transition at step t={t}")
            steps.append(x)
        timings["decode"] = sum(decode_times)
        timings["decode_per_step"] = decode_times

    mel = _denormalize(steps[-1][0], loaded)
    dump = [_denormalize(s[0], loaded) for s in steps] if request.dump_steps else None
    return SynthesisResult(
        mel=mel,
        steps=dump,
        frames=frames,
        audio_seconds=frames * cfg.feature.hop / cfg.feature.sample_rate,
        timings=timings,
    )


def measure_rtf(request: SynthesisRequest, loaded: LoadedModel, repetitions: int = 3) -> dict:
    """Median wall time of synthesis over audio duration, plus a per-stage
    breakdown.  The first run is a discarded warm-up."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    synthesize(request, loaded)  # warm-up
    walls, stage_runs = [], []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        result = synthesize(request, loaded)
        walls.append(time.perf_counter() - t0)
        stage_runs.append(result.timings)
    med = sorted(walls)[len(walls) // 2]
    breakdown = {
        stage: float(np.median([run[stage] for run in stage_runs]))
        for stage in ("encode", "adapt", "decode")
    }
    return {
        "rtf": med / result.audio_seconds,
        "wall_seconds": med,
        "audio_seconds": result.audio_seconds,
        "breakdown": breakdown,
        "repetitions": repetitions,
    }


def render_audio(mel: np.ndarray, mode: str, path, cfg: RunConfig,
                 extra_metadata: dict | None = None) -> Path:
    """Write a denormalized log-mel either as a vocoder-ready container
    (with sidecar metadata) or as an audible Griffin-Lim wav."""
    path = Path(path)
    fe = cfg.feature
    if mode == "export":
        if mel.shape[1] != fe.n_mels:
            raise DataError(
                f"mel has {mel.shape[1]} channels, export profile requires {fe.n_mels}"
            )
        save_tensor(path, mel)
        metadata = {
            "sample_rate": fe.sample_rate, "hop": fe.hop, "window": fe.window,
            "n_mels": fe.n_mels, "fmin": fe.fmin, "fmax": fe.fmax,
            "log_floor": fe.log_floor, "scale": "natural_log_magnitude",
        }
        metadata.update(extra_metadata or {})
        save_sidecar(path, metadata)
    elif mode == "griffin_lim":
        wav = griffin_lim(mel, fe, n_iter=fe.griffin_lim_iters)
        save_wav(path, wav, fe.sample_rate)
    else:
        raise ValueError(f"unknown render mode {mode!r}")
    return path
