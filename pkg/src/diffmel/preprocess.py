"""Corpus preprocessing: raw audio + manifest -> training-ready features.

The manifest has one utterance per line,

    id|audio_path|text|phoneme string|speaker_id|duration_path

with paths resolved relative to the manifest file.  Each utterance yields
mel / f0 / energy / duration tensors under ``<out>/<feature>/<id>.bin``,
plus corpus-level ``stats.json``, ``speakers.json``, and
``utterances.txt``.  Utterances are processed in parallel; all outputs
are deterministic because each utterance is independent and reductions
run in sorted id order.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import extract_energy, extract_f0, extract_mel, load_audio
from .config import RunConfig, vocab_ids
from .errors import DataError
from .speakers import SpeakerStore
from .tensorio import save_tensor

FEATURES = ("mel", "f0", "energy", "duration")


@dataclass
class ManifestRecord:
    utt_id: str
    audio_path: Path
    text: str
    phonemes: list[str]
    speaker_id: str
    duration_path: Path


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    records = []
    for ln, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("|")
        if len(parts) != 6:
            raise DataError(f"{path}:{ln}: expected 6 |-separated fields, got {len(parts)}")
        utt_id, audio, text, phonemes, speaker, durpath = parts
        if not phonemes.split():
            raise DataError(f"{path}:{ln}: empty phoneme string")
        records.append(ManifestRecord(
            utt_id=utt_id,
            audio_path=path.parent / audio,
            text=text,
            phonemes=phonemes.split(),
            speaker_id=speaker,
            duration_path=path.parent / durpath,
        ))
    if not records:
        raise DataError(f"manifest {path} has no records")
    ids = [r.utt_id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError(f"manifest {path} has duplicate utterance ids")
    return records


def read_alignment(path) -> list[tuple[str, int, int]]:
    """Alignment file: one `phoneme start_frame end_frame` per line."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read alignment {path}: {e}") from e
    spans = []
    for ln, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{ln}: expected `phoneme start end`")
        spans.append((parts[0], int(parts[1]), int(parts[2])))
    return spans


def ingest_durations(alignment, phonemes: list[str], frames: int) -> np.ndarray:
    """Turn an alignment (file path or span list) into integer durations
    that sum to ``frames``.

    Drift against the mel frame count is absorbed by the final phonemes:
    a shortfall extends the last phoneme, an excess is trimmed from the
    end, never below zero.
    """
    spans = read_alignment(alignment) if isinstance(alignment, (str, Path)) else alignment
    if len(spans) != len(phonemes):
        raise DataError(
            f"alignment has {len(spans)} phonemes, utterance has {len(phonemes)}"
        )
    durations = []
    for (sym, start, end), expected in zip(spans, phonemes):
        if sym != expected:
            raise DataError(f"alignment phoneme {sym!r} does not match {expected!r}")
        if end < start:
            raise DataError(f"negative span for phoneme {sym!r}: [{start}, {end})")
        durations.append(end - start)
    durations = np.asarray(durations, dtype=np.int64)
    total = int(durations.sum())
    if total < frames:
        durations[-1] += frames - total
    elif total > frames:
        excess = total - frames
        for i in range(len(durations) - 1, -1, -1):
            take = min(excess, int(durations[i]))
            durations[i] -= take
            excess -= take
            if excess == 0:
                break
        if excess > 0:
            raise DataError(f"alignment spans exceed {frames} frames beyond repair")
    return durations


class _StatsAccumulator:
    """Streaming population statistics for mel channels and per-speaker
    pitch (voiced log-F0) and energy."""

    def __init__(self, n_mels: int):
        self.mel_sum = np.zeros(n_mels)
        self.mel_sumsq = np.zeros(n_mels)
        self.frames = 0
        self.speakers: dict[str, dict[str, float]] = {}

    def add(self, speaker: str, mel: np.ndarray, f0: np.ndarray, energy: np.ndarray):
        self.mel_sum += mel.sum(axis=0)
        self.mel_sumsq += (mel ** 2).sum(axis=0)
        self.frames += mel.shape[0]
        acc = self.speakers.setdefault(speaker, {
            "p_sum": 0.0, "p_sumsq": 0.0, "p_n": 0,
            "e_sum": 0.0, "e_sumsq": 0.0, "e_n": 0,
        })
        voiced = np.log(f0[f0 > 0]) if (f0 > 0).any() else np.zeros(0)
        acc["p_sum"] += float(voiced.sum())
        acc["p_sumsq"] += float((voiced ** 2).sum())
        acc["p_n"] += int(voiced.size)
        acc["e_sum"] += float(energy.sum())
        acc["e_sumsq"] += float((energy ** 2).sum())
        acc["e_n"] += int(energy.size)

    @staticmethod
    def _mean_std(s, sq, n):
        if n == 0:
            return 0.0, 1.0
        mean = s / n
        var = max(sq / n - mean * mean, 0.0)
        return float(mean), float(max(np.sqrt(var), 1e-6))

    def finalize(self) -> dict:
        if self.frames == 0:
            raise DataError("no frames accumulated, empty corpus")
        mean = self.mel_sum / self.frames
        var = np.maximum(self.mel_sumsq / self.frames - mean ** 2, 0.0)
        std = np.maximum(np.sqrt(var), 1e-6)
        speakers = {}
        for sid, acc in sorted(self.speakers.items()):
            p_mean, p_std = self._mean_std(acc["p_sum"], acc["p_sumsq"], acc["p_n"])
            e_mean, e_std = self._mean_std(acc["e_sum"], acc["e_sumsq"], acc["e_n"])
            speakers[sid] = {
                "pitch_mean": p_mean, "pitch_std": p_std,
                "energy_mean": e_mean, "energy_std": e_std,
            }
        return {
            "mel_mean": mean.tolist(),
            "mel_std": std.tolist(),
            "frames": self.frames,
            "speakers": speakers,
        }


def compute_norm_stats(utterances) -> dict:
    """Pooled statistics over (speaker_id, mel, f0, energy) tuples."""
    acc = None
    count = 0
    for speaker, mel, f0, energy in utterances:
        if acc is None:
            acc = _StatsAccumulator(mel.shape[1])
        acc.add(speaker, mel, f0, energy)
        count += 1
    if acc is None or count == 0:
        raise DataError("cannot compute statistics over an empty corpus")
    stats = acc.finalize()
    stats["n_utterances"] = count
    return stats


def process_utterance(record: ManifestRecord, cfg: RunConfig):
    """Extract all features for one utterance; frame counts are forced to
    agree across mel / f0 / energy / durations."""
    known = vocab_ids(cfg.model.vocab)
    for sym in record.phonemes:
        if sym not in known:
            raise DataError(f"{record.utt_id}: phoneme {sym!r} not in the configured vocabulary")
    wav, _ = load_audio(record.audio_path, cfg.feature.sample_rate)
    mel = extract_mel(wav, cfg.feature)
    f0 = extract_f0(wav, cfg.feature)
    energy = extract_energy(wav, cfg.feature)
    if not (mel.shape[0] == f0.shape[0] == energy.shape[0]):
        raise DataError(f"{record.utt_id}: inconsistent frame counts")
    spans = read_alignment(record.duration_path)
    durations = ingest_durations(spans, record.phonemes, mel.shape[0])
    return mel, f0, energy, durations


def run_preprocess(cfg: RunConfig, manifest_path, out_dir, workers: int = 4,
                   speaker_embeddings: dict | None = None) -> dict:
    """Full preprocessing pass; returns the statistics record.

    ``speaker_embeddings`` (id -> vector) is required when the model is
    configured for precomputed speaker vectors.
    """
    records = sorted(read_manifest(manifest_path), key=lambda r: r.utt_id)
    out = Path(out_dir)
    for feature in FEATURES:
        (out / feature).mkdir(parents=True, exist_ok=True)

    def work(record):
        mel, f0, energy, durations = process_utterance(record, cfg)
        save_tensor(out / "mel" / f"{record.utt_id}.bin", mel)
        save_tensor(out / "f0" / f"{record.utt_id}.bin", f0)
        save_tensor(out / "energy" / f"{record.utt_id}.bin", energy)
        save_tensor(out / "duration" / f"{record.utt_id}.bin", durations.astype(np.float32))
        return record.utt_id, record.speaker_id, mel, f0, energy

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(work, records))
    results.sort(key=lambda item: item[0])

    stats = compute_norm_stats(
        (speaker, mel, f0, energy) for _, speaker, mel, f0, energy in results
    )
    (out / "stats.json").write_text(json.dumps(stats, indent=2))

    speaker_ids = sorted({r.speaker_id for r in records})
    store = SpeakerStore(speaker_ids, cfg.model.speaker_dim,
                         mode=cfg.model.speaker_mode, embeddings=speaker_embeddings)
    store.save_manifest(out / "speakers.json")

    lines = [f"{r.utt_id}|{' '.join(r.phonemes)}|{r.speaker_id}" for r in records]
    (out / "utterances.txt").write_text("\n".join(lines) + "\n")
    return stats
