"""Loading preprocessed corpora into training-ready utterance records.

Normalization happens here at load time: mels are standardized per
channel with the corpus statistics, pitch becomes per-speaker normalized
log-F0 averaged over the voiced frames of each phoneme, and energy is
per-speaker normalized and averaged per phoneme.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, vocab_ids
from .errors import DataError
from .speakers import SpeakerStore
from .tensorio import load_tensor


@dataclass
class Utterance:
    utt_id: str
    phoneme_ids: np.ndarray   # (P,) int64, ids >= 1
    mel: np.ndarray           # (F, n_mels) float32, normalized
    durations: np.ndarray     # (P,) int64, sums to F
    pitch: np.ndarray         # (P,) float32, normalized log-F0 per phoneme
    energy: np.ndarray        # (P,) float32, normalized per phoneme
    speaker_id: str
    speaker_index: int

    def __post_init__(self):
        if self.phoneme_ids.size < 1 or self.mel.shape[0] < 1:
            raise DataError(f"{self.utt_id}: degenerate utterance")
        if int(self.durations.sum()) != self.mel.shape[0]:
            raise DataError(
                f"{self.utt_id}: durations sum {int(self.durations.sum())} != frames {self.mel.shape[0]}"
            )
        for name in ("mel", "pitch", "energy"):
            if not np.isfinite(getattr(self, name)).all():
                raise DataError(f"{self.utt_id}: non-finite values in {name}")


def phoneme_averages(frame_values: np.ndarray, durations: np.ndarray,
                     voiced_only: bool = False) -> np.ndarray:
    """Average frame-level values over each phoneme's span.

    With ``voiced_only``, zero frames are excluded and a phoneme with no
    voiced frames gets 0.
    """
    out = np.zeros(len(durations), dtype=np.float64)
    start = 0
    for i, d in enumerate(durations):
        seg = frame_values[start:start + int(d)]
        if voiced_only:
            seg = seg[seg != 0.0]
        if seg.size:
            out[i] = seg.mean()
        start += int(d)
    return out


@dataclass
class Corpus:
    utterances: list[Utterance]
    stats: dict
    store: SpeakerStore
    vocab: dict


def load_corpus(data_dir, cfg: RunConfig) -> Corpus:
    data_dir = Path(data_dir)
    try:
        stats = json.loads((data_dir / "stats.json").read_text())
        listing = (data_dir / "utterances.txt").read_text().splitlines()
    except OSError as e:
        raise DataError(f"preprocessed corpus at {data_dir} is incomplete: {e}") from e
    store = SpeakerStore.from_manifest(data_dir / "speakers.json")
    vocab = vocab_ids(cfg.model.vocab)
    mel_mean = np.asarray(stats["mel_mean"], dtype=np.float64)
    mel_std = np.asarray(stats["mel_std"], dtype=np.float64)

    utterances = []
    for line in listing:
        if not line.strip():
            continue
        utt_id, phoneme_str, speaker_id = line.split("|")
        phonemes = phoneme_str.split()
        ids = np.array([vocab[p] for p in phonemes], dtype=np.int64)
        mel = load_tensor(data_dir / "mel" / f"{utt_id}.bin").astype(np.float64)
        f0 = load_tensor(data_dir / "f0" / f"{utt_id}.bin").astype(np.float64)
        energy = load_tensor(data_dir / "energy" / f"{utt_id}.bin").astype(np.float64)
        durations = load_tensor(data_dir / "duration" / f"{utt_id}.bin").astype(np.int64)

        if cfg.feature.normalize_mel:
            mel = (mel - mel_mean) / mel_std
        sp = stats["speakers"][speaker_id]
        log_f0 = np.where(f0 > 0, (np.log(np.maximum(f0, 1e-8)) - sp["pitch_mean"]) / sp["pitch_std"], 0.0)
        # keep exact zeros as the unvoiced marker for the phoneme averages
        log_f0[f0 == 0] = 0.0
        norm_energy = (energy - sp["energy_mean"]) / sp["energy_std"]

        utterances.append(Utterance(
            utt_id=utt_id,
            phoneme_ids=ids,
            mel=mel.astype(np.float32),
            durations=durations,
            pitch=phoneme_averages(log_f0, durations, voiced_only=True).astype(np.float32),
            energy=phoneme_averages(norm_energy, durations).astype(np.float32),
            speaker_id=speaker_id,
            speaker_index=store.index_of(speaker_id),
        ))
    if not utterances:
        raise DataError(f"no utterances found at {data_dir}")
    return Corpus(utterances=utterances, stats=stats, store=store, vocab=vocab)


def split_corpus(utterances: list[Utterance], validation_count: int, seed: int):
    """Deterministic seeded split into (train, validation)."""
    order = np.random.default_rng(seed).permutation(len(utterances))
    n_val = min(validation_count, max(0, len(utterances) - 1))
    val_idx = set(order[:n_val].tolist())
    train = [u for i, u in enumerate(utterances) if i not in val_idx]
    val = [u for i, u in enumerate(utterances) if i in val_idx]
    return train, val


def make_batches(utterances: list[Utterance], batch_size: int, seed: int, epoch: int):
    """Length-bucketed batch index lists, shuffled per epoch.

    Utterances are sorted by frame count so batch padding stays small;
    batch order is a seeded permutation of (seed, epoch).
    """
    order = sorted(range(len(utterances)), key=lambda i: (utterances[i].mel.shape[0], i))
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    rng = np.random.default_rng(seed * 100_003 + epoch)
    return [batches[i] for i in rng.permutation(len(batches))]


@dataclass
class Batch:
    utt_ids: list
    phoneme_ids: torch.Tensor   # (B, P)
    src_mask: torch.Tensor      # (B, P) bool
    mel: torch.Tensor           # (B, F, C)
    mel_mask: torch.Tensor      # (B, F) bool
    durations: torch.Tensor     # (B, P)
    pitch: torch.Tensor         # (B, P)
    energy: torch.Tensor        # (B, P)
    speaker_index: torch.Tensor  # (B,)


def collate(utterances: list[Utterance]) -> Batch:
    B = len(utterances)
    P = max(u.phoneme_ids.size for u in utterances)
    F = max(u.mel.shape[0] for u in utterances)
    C = utterances[0].mel.shape[1]
    ids = torch.zeros(B, P, dtype=torch.long)
    durs = torch.zeros(B, P, dtype=torch.long)
    pitch = torch.zeros(B, P)
    energy = torch.zeros(B, P)
    mel = torch.zeros(B, F, C)
    mel_mask = torch.zeros(B, F, dtype=torch.bool)
    spk = torch.zeros(B, dtype=torch.long)
    for b, u in enumerate(utterances):
        p, f = u.phoneme_ids.size, u.mel.shape[0]
        ids[b, :p] = torch.from_numpy(u.phoneme_ids)
        durs[b, :p] = torch.from_numpy(u.durations)
        pitch[b, :p] = torch.from_numpy(u.pitch)
        energy[b, :p] = torch.from_numpy(u.energy)
        mel[b, :f] = torch.from_numpy(u.mel)
        mel_mask[b, :f] = True
        spk[b] = u.speaker_index
    return Batch(
        utt_ids=[u.utt_id for u in utterances],
        phoneme_ids=ids, src_mask=ids != 0,
        mel=mel, mel_mask=mel_mask,
        durations=durs, pitch=pitch, energy=energy,
        speaker_index=spk,
    )
