"""Synthetic demo corpus: short harmonic "utterances" with known
phoneme alignments, enough to exercise the whole pipeline end to end.

Run ``python -m diffmel.toydata --out data/toy`` to write wavs, per
utterance alignment files, and a manifest.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .audio import save_wav

# each toy "phoneme" is a pitch factor over the speaker's base F0 and an
# amplitude; sp is silence
TOY_PHONES = {
    "AA": (1.00, 0.55),
    "IY": (1.26, 0.45),
    "UW": (0.84, 0.50),
    "EH": (1.12, 0.40),
    "N": (0.94, 0.30),
    "S": (0.0, 0.12),   # noise burst, unvoiced
    "sp": (0.0, 0.0),
}

SPEAKER_F0 = {"sp01": 130.0, "sp02": 210.0}


def _segment(phone, seconds, base_f0, rate, rng):
    n = int(seconds * rate)
    t = np.arange(n) / rate
    factor, amp = TOY_PHONES[phone]
    if amp == 0.0:
        return np.zeros(n)
    if factor == 0.0:
        return amp * rng.standard_normal(n) * 0.5
    f0 = base_f0 * factor
    # sawtooth-ish harmonic stack gives the pitch tracker something real
    wave = sum((1.0 / k) * np.sin(2 * np.pi * k * f0 * t) for k in range(1, 6))
    return amp * wave / 2.0


def make_toy_corpus(out_dir, n_utterances: int = 10, rate: int = 22050,
                    hop: int = 256, seed: int = 0) -> Path:
    """Write wavs + alignments + manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "wavs").mkdir(parents=True, exist_ok=True)
    (out / "durations").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    phones = [p for p in TOY_PHONES if p != "sp"]
    speakers = sorted(SPEAKER_F0)
    lines = []
    for i in range(n_utterances):
        utt_id = f"utt{i:03d}"
        speaker = speakers[i % len(speakers)]
        length = int(rng.integers(4, 8))
        seq = ["sp"] + [phones[int(rng.integers(len(phones)))] for _ in range(length)] + ["sp"]
        pieces, bounds = [], [0]
        for phone in seq:
            seconds = 0.06 if phone == "sp" else float(rng.uniform(0.08, 0.18))
            piece = _segment(phone, seconds, SPEAKER_F0[speaker], rate, rng)
            pieces.append(piece)
            bounds.append(bounds[-1] + len(piece))
        wav = np.concatenate(pieces)
        save_wav(out / "wavs" / f"{utt_id}.wav", wav, rate)

        frames = 1 + len(wav) // hop
        starts = [min(b // hop, frames) for b in bounds[:-1]]
        ends = starts[1:] + [frames]
        spans = [f"{p} {s} {e}" for p, s, e in zip(seq, starts, ends)]
        (out / "durations" / f"{utt_id}.lab").write_text("\n".join(spans) + "\n")

        lines.append(
            f"{utt_id}|wavs/{utt_id}.wav|toy utterance {i}|{' '.join(seq)}|{speaker}|durations/{utt_id}.lab"
        )
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def main(argv=None):
    parser = argparse.ArgumentParser(description="Write the synthetic demo corpus.")
    parser.add_argument("--out", required=True)
    parser.add_argument("--utterances", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    manifest = make_toy_corpus(args.out, n_utterances=args.utterances, seed=args.seed)
    print(f"wrote {manifest}")


if __name__ == "__main__":
    main()
