"""The two adversaries.

The transition discriminator judges whether (x_{t-1}, x_t) is a plausible
reverse-process step at timestep t; the spectrogram discriminator judges
clean mels conditioned on a speaker embedding.  Both return a per-sample
scalar score plus the ordered intermediate feature maps used by the
feature-matching loss.  Mels arrive as (B, F, C) and are handled
internally as one-channel images (B, 1, C, F): height = mel bin,
width = frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .generator import timestep_embedding


@dataclass
class DiscriminatorOutput:
    score: torch.Tensor          # (B,)
    features: list[torch.Tensor]


def minibatch_stddev(features: torch.Tensor) -> torch.Tensor:
    """Append one channel holding the batch-wide mean feature stddev.

    Population standard deviation across the batch, averaged over all
    feature positions, broadcast everywhere.  Zero for batch size 1 and
    for batches of identical samples.
    """
    std = features.std(dim=0, correction=0)
    stat = std.mean()
    extra = stat.expand(features.shape[0], 1, *features.shape[2:])
    return torch.cat([features, extra.to(features.dtype)], dim=1)


class DownsampleBlock(nn.Module):
    """One dual-path block: a conditioned and an unconditioned downsampling
    conv whose outputs are summed."""

    def __init__(self, in_ch, out_ch, kernel, d_cond, d_spk=None):
        super().__init__()
        pad = kernel // 2
        self.conv_cond = nn.Conv2d(in_ch, out_ch, kernel, stride=2, padding=pad)
        self.conv_plain = nn.Conv2d(in_ch, out_ch, kernel, stride=2, padding=pad)
        self.t_proj = nn.Linear(d_cond, in_ch)
        self.spk_proj = nn.Linear(d_spk, in_ch) if d_spk else None
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x, t_emb, spk=None):
        c = x + self.t_proj(t_emb)[:, :, None, None]
        if self.spk_proj is not None and spk is not None:
            c = c + self.spk_proj(spk)[:, :, None, None]
        return self.act(self.conv_cond(c)) + self.act(self.conv_plain(x))


class DiffusionDiscriminator(nn.Module):
    """Scores transition pairs; six downsampling blocks, timestep-aware.

    The pair is concatenated on the channel axis, so its order matters.
    When ``d_spk`` is set (ablation routing) the speaker embedding joins
    the conditioned path of every block.
    """

    N_FEATURES = 6

    def __init__(self, blocks=6, kernel=3, base_channels=32, max_channels=256,
                 d_cond=128, d_spk=None):
        super().__init__()
        chans = [2] + [min(base_channels * (2 ** i), max_channels) for i in range(blocks)]
        self.blocks = nn.ModuleList(
            DownsampleBlock(chans[i], chans[i + 1], kernel, d_cond, d_spk)
            for i in range(blocks)
        )
        self.head = nn.Linear(chans[-1] + 1, 1)
        self.d_cond = d_cond
        self.uses_speaker = d_spk is not None

    def forward(self, x_prev, x_t, t, spk=None) -> DiscriminatorOutput:
        if x_prev.shape != x_t.shape:
            raise ValueError(
                f"pair shape mismatch: {tuple(x_prev.shape)} vs {tuple(x_t.shape)}"
            )
        if self.uses_speaker and spk is None:
            raise ValueError("this discriminator is configured to take a speaker embedding")
        if isinstance(t, int):
            t = torch.full((x_prev.shape[0],), t, device=x_prev.device, dtype=torch.long)
        t_emb = timestep_embedding(t, self.d_cond).to(x_prev.dtype)
        x = torch.stack([x_prev.transpose(1, 2), x_t.transpose(1, 2)], dim=1)
        features = []
        for block in self.blocks:
            x = block(x, t_emb, spk)
            features.append(x)
        pooled = minibatch_stddev(x).mean(dim=(2, 3))
        return DiscriminatorOutput(score=self.head(pooled).squeeze(-1), features=features)


class SpectrogramDiscriminator(nn.Module):
    """Scores clean mels conditioned on the speaker.

    The mel passes a 2D conv and the linearly-projected speaker embedding
    is broadcast-added; the fused map then runs through the strided and
    plain conv stages, which are the reported feature maps.
    """

    def __init__(self, channels=32, conv2d_strided=3, conv2d_plain=2,
                 kernel_strided=(3, 9), kernel_plain=(3, 3),
                 stride_height=1, stride_widths=(1, 2),
                 padding_height=1, padding_widths=(1, 4), d_spk=256):
        super().__init__()
        self.mel_conv = nn.Conv2d(1, channels, tuple(kernel_plain),
                                  padding=(padding_height, padding_widths[0]))
        self.spk_proj = nn.Linear(d_spk, channels)
        stages = []
        for _ in range(conv2d_strided):
            stages.append(nn.Conv2d(channels, channels, tuple(kernel_strided),
                                    stride=(stride_height, stride_widths[1]),
                                    padding=(padding_height, padding_widths[1])))
        for _ in range(conv2d_plain):
            stages.append(nn.Conv2d(channels, channels, tuple(kernel_plain),
                                    stride=(stride_height, stride_widths[0]),
                                    padding=(padding_height, padding_widths[0])))
        self.stages = nn.ModuleList(stages)
        self.act = nn.LeakyReLU(0.2)
        self.head = nn.Linear(channels, 1)

    @property
    def n_features(self):
        return len(self.stages)

    def forward(self, x0, spk) -> DiscriminatorOutput:
        x = x0.transpose(1, 2).unsqueeze(1)  # (B, 1, C, F)
        x = self.mel_conv(x) + self.spk_proj(spk)[:, :, None, None]
        features = []
        for stage in self.stages:
            x = self.act(stage(x))
            features.append(x)
        pooled = x.mean(dim=(2, 3))
        return DiscriminatorOutput(score=self.head(pooled).squeeze(-1), features=features)


def build_discriminators(cfg):
    """Construct (diffusion disc, spectrogram disc or None) per config.

    The two ablation presets drop the spectrogram discriminator; one of
    them reroutes the speaker embedding into the transition discriminator.
    """
    mode = cfg.train.ablation_mode
    dd = cfg.model.disc_diffusion
    d_spk = cfg.model.speaker_dim if mode == "no_spec_disc_spk_to_diff" else None
    disc_d = DiffusionDiscriminator(
        blocks=dd.blocks, kernel=dd.kernel, base_channels=dd.base_channels,
        max_channels=dd.max_channels, d_spk=d_spk,
    )
    if mode != "full":
        return disc_d, None
    ds = cfg.model.disc_spectrogram
    disc_s = SpectrogramDiscriminator(
        channels=ds.channels, conv2d_strided=ds.conv2d_strided,
        conv2d_plain=ds.conv2d_plain, kernel_strided=ds.kernel_strided,
        kernel_plain=ds.kernel_plain, stride_height=ds.stride_height,
        stride_widths=ds.stride_widths, padding_height=ds.padding_height,
        padding_widths=ds.padding_widths, d_spk=cfg.model.speaker_dim,
    )
    return disc_d, disc_s
