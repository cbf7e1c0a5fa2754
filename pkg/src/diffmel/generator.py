"""Text-to-mel generator: transformer encoder, variance adaptor, and a
WaveNet-style decoder that predicts the clean mel from a noised one.

Tensor layout is batch-first throughout: phoneme hiddens are (B, P, D),
mels are (B, F, C).  Padding uses id 0 for phonemes; masks hold True at
valid positions.  The generator is conditioned on a noised mel x_t, the
phoneme sequence, a speaker embedding, and the diffusion step t, and
returns its clean-mel prediction plus the variance-adaptor outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import DataError


def sinusoidal_encoding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard fixed sin/cos encoding; positions (...,) -> (..., dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    ).to(positions.device)
    args = positions.double().unsqueeze(-1) * freqs
    enc = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        enc = torch.nn.functional.pad(enc, (0, 1))
    return enc


def timestep_embedding(t, dim: int, device=None) -> torch.Tensor:
    """Deterministic embedding of the diffusion step index, shape (B, dim)."""
    if isinstance(t, int):
        t = torch.tensor([t], device=device)
    return sinusoidal_encoding(t, dim)


def length_regulate(hidden: torch.Tensor, durations: torch.Tensor) -> torch.Tensor:
    """Expand (P, D) phoneme hiddens to (F, D) frames, F = sum(durations)."""
    if durations.shape[0] != hidden.shape[0]:
        raise ValueError(
            f"durations length {durations.shape[0]} != hidden length {hidden.shape[0]}"
        )
    if (durations < 0).any():
        raise ValueError("durations must be non-negative")
    if int(durations.sum()) == 0:
        raise DataError("all durations are zero, nothing to expand")
    return torch.repeat_interleave(hidden, durations.long(), dim=0)


def length_regulate_batch(hidden: torch.Tensor, durations: torch.Tensor):
    """Batched expansion with padding.

    hidden (B, P, D), durations (B, P) -> (B, Fmax, D) plus a (B, Fmax)
    validity mask.
    """
    lengths = durations.long().sum(dim=1)
    if (lengths == 0).any():
        raise DataError("a batch item expanded to zero frames")
    f_max = int(lengths.max())
    out = hidden.new_zeros(hidden.shape[0], f_max, hidden.shape[2])
    for b in range(hidden.shape[0]):
        out[b, : lengths[b]] = torch.repeat_interleave(hidden[b], durations[b].long(), dim=0)
    mask = torch.arange(f_max, device=hidden.device)[None, :] < lengths[:, None]
    return out, mask


class ConvFFN(nn.Module):
    """Two-conv position-wise feed-forward used inside encoder layers."""

    def __init__(self, d_model, d_ff, kernel, dropout):
        super().__init__()
        self.conv1 = nn.Conv1d(d_model, d_ff, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(d_ff, d_model, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):  # (B, P, D)
        y = x.transpose(1, 2)
        y = self.conv2(torch.relu(self.conv1(y)))
        return self.dropout(y.transpose(1, 2))


class EncoderLayer(nn.Module):
    def __init__(self, d_model, heads, d_ff, kernel, dropout):
        super().__init__()
        self.attn = nn.MultiheadAttention(d_model, heads, dropout=dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(d_model)
        self.ffn = ConvFFN(d_model, d_ff, kernel, dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):  # mask: (B, P) True = valid
        pad = ~mask
        att, _ = self.attn(x, x, x, key_padding_mask=pad, need_weights=False)
        x = self.norm1(x + self.dropout(att))
        x = x * mask.unsqueeze(-1)
        x = self.norm2(x + self.ffn(x))
        return x * mask.unsqueeze(-1)


class TextEncoder(nn.Module):
    """Phoneme ids -> hidden sequence (B, P, D); padded rows are zero."""

    def __init__(self, vocab_size, d_model, layers, heads, d_ff, kernel, dropout):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, d_model, padding_idx=0)
        nn.init.uniform_(self.embed.weight, -1.0 / math.sqrt(d_model), 1.0 / math.sqrt(d_model))
        with torch.no_grad():
            self.embed.weight[0].zero_()
        self.layers = nn.ModuleList(
            EncoderLayer(d_model, heads, d_ff, kernel, dropout) for _ in range(layers)
        )
        self.d_model = d_model

    def forward(self, phoneme_ids: torch.Tensor):
        if phoneme_ids.dim() != 2 or phoneme_ids.shape[1] == 0:
            raise DataError("phoneme sequence must be a non-empty (B, P) id tensor")
        mask = phoneme_ids != 0
        if not mask.any(dim=1).all():
            raise DataError("a batch item has no phonemes")
        pos = torch.arange(phoneme_ids.shape[1], device=phoneme_ids.device)
        x = self.embed(phoneme_ids) + sinusoidal_encoding(pos, self.d_model).to(
            self.embed.weight.dtype
        )
        x = x * mask.unsqueeze(-1)
        for layer in self.layers:
            x = layer(x, mask)
        return x, mask


class VariancePredictor(nn.Module):
    """Conv stack predicting one scalar per phoneme position."""

    def __init__(self, d_model, hidden, kernel, dropout):
        super().__init__()
        self.conv1 = nn.Conv1d(d_model, hidden, kernel, padding=kernel // 2)
        self.norm1 = nn.LayerNorm(hidden)
        self.conv2 = nn.Conv1d(hidden, hidden, kernel, padding=kernel // 2)
        self.norm2 = nn.LayerNorm(hidden)
        self.dropout = nn.Dropout(dropout)
        self.out = nn.Linear(hidden, 1)

    def forward(self, x, mask):  # (B, P, D) -> (B, P)
        y = torch.relu(self.conv1(x.transpose(1, 2))).transpose(1, 2)
        y = self.dropout(self.norm1(y)) * mask.unsqueeze(-1)
        y = torch.relu(self.conv2(y.transpose(1, 2))).transpose(1, 2)
        y = self.dropout(self.norm2(y)) * mask.unsqueeze(-1)
        return self.out(y).squeeze(-1) * mask


@dataclass
class VarianceOutputs:
    log_durations: torch.Tensor  # (B, P) predictions, for the loss
    pitch: torch.Tensor          # (B, P) predictions
    energy: torch.Tensor         # (B, P) predictions
    expanded_frames: torch.Tensor  # (B,) frame counts actually used


class VarianceAdaptor(nn.Module):
    """Duration/pitch/energy predictors plus the length regulator.

    In train mode ground-truth values drive expansion and conditioning
    (teacher forcing) while predictions are returned for the loss; in
    infer mode the predictions themselves are used.
    """

    def __init__(self, d_model, hidden, kernels, dropout, min_frames=1):
        super().__init__()
        k_dur, k_pitch, k_energy = kernels
        self.duration = VariancePredictor(d_model, hidden, k_dur, dropout)
        self.pitch = VariancePredictor(d_model, hidden, k_pitch, dropout)
        self.energy = VariancePredictor(d_model, hidden, k_energy, dropout)
        self.pitch_proj = nn.Linear(1, d_model)
        self.energy_proj = nn.Linear(1, d_model)
        self.min_frames = min_frames

    def forward(self, hidden, mask, mode="train", durations=None, pitch=None,
                energy=None, duration_override=None):
        if mode == "train" and (durations is None or pitch is None or energy is None):
            raise DataError("train mode requires duration, pitch, and energy targets")
        log_dur_pred = self.duration(hidden, mask)
        pitch_pred = self.pitch(hidden, mask)
        energy_pred = self.energy(hidden, mask)

        if mode == "train":
            use_dur, use_pitch, use_energy = durations, pitch, energy
        else:
            if duration_override is not None:
                use_dur = duration_override.long()
            else:
                # round half up, clamp to the configured minimum on real positions
                use_dur = torch.floor(torch.exp(log_dur_pred) + 0.5).clamp(min=self.min_frames)
                use_dur = (use_dur * mask).long()
            use_pitch, use_energy = pitch_pred, energy_pred

        cond = hidden + self.pitch_proj(use_pitch.unsqueeze(-1).to(hidden.dtype))
        cond = cond + self.energy_proj(use_energy.unsqueeze(-1).to(hidden.dtype))
        cond = cond * mask.unsqueeze(-1)
        expanded, mel_mask = length_regulate_batch(cond, use_dur)
        outputs = VarianceOutputs(
            log_durations=log_dur_pred,
            pitch=pitch_pred,
            energy=energy_pred,
            expanded_frames=use_dur.long().sum(dim=1),
        )
        return expanded, mel_mask, outputs


class ResidualBlock(nn.Module):
    """Gated conv block with per-block timestep/speaker/text conditioning."""

    def __init__(self, channels, d_model, d_spk, kernel):
        super().__init__()
        self.conv = nn.Conv1d(channels, 2 * channels, kernel, padding=kernel // 2)
        self.cond_conv = nn.Conv1d(d_model, 2 * channels, 1)
        self.spk_proj = nn.Linear(d_spk, 2 * channels)
        self.t_proj = nn.Linear(d_model, channels)
        self.res_conv = nn.Conv1d(channels, channels, 1)
        self.skip_conv = nn.Conv1d(channels, channels, 1)
        self.channels = channels

    def forward(self, h, cond, spk, t_emb):
        # h (B, ch, F); cond (B, D, F); spk (B, d_spk); t_emb (B, D)
        x = h + self.t_proj(t_emb).unsqueeze(-1)
        gates = self.conv(x) + self.cond_conv(cond) + self.spk_proj(spk).unsqueeze(-1)
        a, b = gates.split(self.channels, dim=1)
        out = torch.tanh(a) * torch.sigmoid(b)
        res = (h + self.res_conv(out)) * (1.0 / math.sqrt(2.0))
        return res, self.skip_conv(out)


class DiffusionDecoder(nn.Module):
    """Predicts the clean mel from (x_t, adapted text, speaker, t)."""

    def __init__(self, n_mels, d_model, d_spk, channels, blocks, kernel):
        super().__init__()
        self.input_proj = nn.Conv1d(n_mels, channels, 1)
        self.cond_proj = nn.Conv1d(d_model, d_model, 1)
        self.t_mlp = nn.Sequential(
            nn.Linear(d_model, d_model), nn.SiLU(), nn.Linear(d_model, d_model)
        )
        self.blocks = nn.ModuleList(
            ResidualBlock(channels, d_model, d_spk, kernel) for _ in range(blocks)
        )
        self.out1 = nn.Conv1d(channels, channels, 1)
        self.out2 = nn.Conv1d(channels, n_mels, 1)
        self.d_model = d_model

    def forward(self, x_t, cond, spk, t, mel_mask=None):
        # x_t (B, F, C); cond (B, F, D)
        if x_t.shape[1] != cond.shape[1]:
            raise DataError(
                f"frame mismatch: x_t has {x_t.shape[1]} frames, conditioning has {cond.shape[1]}"
            )
        if isinstance(t, int):
            t = torch.full((x_t.shape[0],), t, device=x_t.device, dtype=torch.long)
        t_emb = self.t_mlp(timestep_embedding(t, self.d_model).to(x_t.dtype))
        c = self.cond_proj(cond.transpose(1, 2))
        h = torch.relu(self.input_proj(x_t.transpose(1, 2)))
        skip_sum = torch.zeros_like(h)
        for block in self.blocks:
            h, skip = block(h, c, spk, t_emb)
            skip_sum = skip_sum + skip
        y = skip_sum * (1.0 / math.sqrt(len(self.blocks)))
        y = self.out2(torch.relu(self.out1(torch.relu(y))))
        y = y.transpose(1, 2)
        if mel_mask is not None:
            y = y * mel_mask.unsqueeze(-1)
        return y


class AcousticGenerator(nn.Module):
    """Full generator G(x_t, phonemes, speaker, t) -> clean-mel prediction."""

    def __init__(self, vocab_size, n_mels, d_model, d_spk, *,
                 encoder_layers=4, encoder_heads=2, encoder_ff=1024,
                 encoder_kernel=9, encoder_dropout=0.1,
                 variance_hidden=256, variance_kernels=(3, 5, 5),
                 variance_dropout=0.1, min_frames=1,
                 decoder_blocks=20, decoder_channels=256, decoder_kernel=3):
        super().__init__()
        self.encoder = TextEncoder(
            vocab_size, d_model, encoder_layers, encoder_heads,
            encoder_ff, encoder_kernel, encoder_dropout,
        )
        self.adaptor = VarianceAdaptor(
            d_model, variance_hidden, variance_kernels, variance_dropout, min_frames
        )
        self.decoder = DiffusionDecoder(
            n_mels, d_model, d_spk, decoder_channels, decoder_blocks, decoder_kernel
        )

    def forward(self, x_t, phoneme_ids, spk, t, mode="train",
                durations=None, pitch=None, energy=None):
        hidden, mask = self.encoder(phoneme_ids)
        cond, mel_mask, var_out = self.adaptor(
            hidden, mask, mode=mode, durations=durations, pitch=pitch, energy=energy
        )
        if mode == "train" and x_t.shape[1] != cond.shape[1]:
            raise DataError(
                f"teacher-forced length {cond.shape[1]} != mel frames {x_t.shape[1]}"
            )
        x0_pred = self.decoder(x_t, cond, spk, t, mel_mask)
        return x0_pred, var_out, mel_mask


def build_generator(cfg) -> AcousticGenerator:
    """Construct the generator from a RunConfig."""
    mo = cfg.model
    return AcousticGenerator(
        vocab_size=len(mo.vocab) + 1,
        n_mels=cfg.feature.n_mels,
        d_model=mo.d_model,
        d_spk=mo.speaker_dim,
        encoder_layers=mo.encoder_layers,
        encoder_heads=mo.encoder_heads,
        encoder_ff=mo.encoder_ff_dim,
        encoder_kernel=mo.encoder_kernel,
        encoder_dropout=mo.encoder_dropout,
        variance_hidden=mo.variance_hidden,
        variance_kernels=tuple(mo.variance_kernels),
        variance_dropout=mo.variance_dropout,
        min_frames=mo.min_frames_per_phoneme,
        decoder_blocks=mo.decoder_blocks,
        decoder_channels=mo.decoder_channels,
        decoder_kernel=mo.decoder_kernel,
    )
