"""Speaker identities and their embeddings.

Two modes: ``lookup`` keeps a trainable embedding row per known speaker
(trained together with the generator); ``precomputed`` serves fixed
vectors ingested from an external speaker encoder.  Either way the
embedding feeds the decoder's per-block conditioning and the spectrogram
discriminator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .errors import DataError


@dataclass
class SpeakerRef:
    speaker_id: str
    embedding: torch.Tensor  # (dim,) trainable row in lookup mode


class SpeakerStore(nn.Module):
    def __init__(self, speaker_ids: list[str], dim: int, mode: str = "lookup",
                 embeddings: dict[str, list[float]] | None = None):
        super().__init__()
        if mode not in ("lookup", "precomputed"):
            raise DataError(f"unknown speaker mode {mode!r}")
        self.speaker_ids = list(speaker_ids)
        self.index = {sid: i for i, sid in enumerate(self.speaker_ids)}
        self.mode = mode
        self.dim = dim
        if mode == "lookup":
            self.table = nn.Embedding(len(self.speaker_ids), dim)
            nn.init.uniform_(self.table.weight, -1.0 / math.sqrt(dim), 1.0 / math.sqrt(dim))
        else:
            if embeddings is None:
                raise DataError("precomputed speaker mode requires stored embeddings")
            rows = []
            for sid in self.speaker_ids:
                if sid not in embeddings:
                    raise DataError(f"no embedding stored for speaker {sid!r}")
                vec = torch.tensor(embeddings[sid], dtype=torch.float32)
                if vec.shape != (dim,) or not torch.isfinite(vec).all():
                    raise DataError(f"embedding for speaker {sid!r} must be a finite vector of dim {dim}")
                rows.append(vec)
            self.register_buffer("fixed", torch.stack(rows))

    def index_of(self, speaker_id: str) -> int:
        if speaker_id not in self.index:
            raise DataError(f"unknown speaker {speaker_id!r} in {self.mode} mode")
        return self.index[speaker_id]

    def forward(self, indices: torch.Tensor) -> torch.Tensor:
        if self.mode == "lookup":
            return self.table(indices)
        return self.fixed[indices]

    def resolve(self, speaker_id: str) -> SpeakerRef:
        i = self.index_of(speaker_id)
        row = self.table.weight[i] if self.mode == "lookup" else self.fixed[i]
        return SpeakerRef(speaker_id=speaker_id, embedding=row)

    def save_manifest(self, path, embeddings: dict | None = None) -> None:
        data = {"mode": self.mode, "dim": self.dim, "speakers": self.speaker_ids}
        if self.mode == "precomputed":
            data["embeddings"] = {
                sid: self.fixed[i].tolist() for i, sid in enumerate(self.speaker_ids)
            }
        Path(path).write_text(json.dumps(data, indent=2))

    @classmethod
    def from_manifest(cls, path) -> "SpeakerStore":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read speaker manifest {path}: {e}") from e
        return cls(data["speakers"], data["dim"], data["mode"], data.get("embeddings"))


def resolve_speaker(speaker_id: str, mode: str, store: SpeakerStore) -> SpeakerRef:
    """Look up one speaker's embedding; errors name the id and mode."""
    if store.mode != mode:
        raise DataError(f"store is in {store.mode!r} mode, requested {mode!r}")
    return store.resolve(speaker_id)
