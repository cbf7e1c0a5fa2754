"""Waveform I/O and feature extraction (mel, F0, energy, Griffin-Lim).

Conventions, fixed here and relied on by tests:
  * STFT is centered with reflect padding, Hann window, n_fft == window,
    so a waveform of n samples yields 1 + n // hop frames.
  * Mel filters are unit-peak triangles on the HTK mel scale
    (mel = 2595 * log10(1 + f / 700)).
  * Mel values are natural-log magnitudes, clamped at ``log_floor``
    before the log.
  * Energy is the per-frame L2 norm of the linear magnitude spectrum.
  * F0 is autocorrelation-based; 0 marks unvoiced frames.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .config import FeatureConfig
from .errors import DataError


def load_audio(path, target_rate: int) -> tuple[np.ndarray, int]:
    """Load a wav file as mono float64 at target_rate, peak |x| <= 1."""
    try:
        rate, data = scipy.io.wavfile.read(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read audio file {path}: {e}") from e
    if data.size == 0:
        raise DataError(f"audio file {path} is empty")
    x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        x = x / float(np.iinfo(data.dtype).max)
    if rate != target_rate:
        g = math.gcd(target_rate, rate)
        x = scipy.signal.resample_poly(x, target_rate // g, rate // g)
    peak = np.abs(x).max()
    if peak > 1.0:
        x = x / peak
    return x, target_rate


def save_wav(path, waveform: np.ndarray, rate: int) -> None:
    """Write 16-bit PCM."""
    x = np.clip(waveform, -1.0, 1.0)
    scipy.io.wavfile.write(path, rate, (x * 32767.0).astype(np.int16))


def stft_magnitude(waveform: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Centered magnitude STFT, shape (frames, window // 2 + 1)."""
    return np.abs(_stft(waveform, config))


def _stft(waveform: np.ndarray, config: FeatureConfig) -> np.ndarray:
    win, hop = config.window, config.hop
    if len(waveform) < win:
        raise DataError(f"waveform has {len(waveform)} samples, shorter than one window ({win})")
    pad = win // 2
    x = np.pad(waveform, (pad, pad), mode="reflect")
    n_frames = 1 + len(waveform) // hop
    window = scipy.signal.get_window("hann", win, fftbins=True)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    return np.fft.rfft(frames * window, axis=1)


def _istft(spec: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Overlap-add inverse of _stft; trims the center padding."""
    win, hop = config.window, config.hop
    n_frames = spec.shape[0]
    window = scipy.signal.get_window("hann", win, fftbins=True)
    frames = np.fft.irfft(spec, n=win, axis=1) * window
    length = (n_frames - 1) * hop + win
    out = np.zeros(length)
    norm = np.zeros(length)
    for i in range(n_frames):
        out[i * hop:i * hop + win] += frames[i]
        norm[i * hop:i * hop + win] += window**2
    out /= np.maximum(norm, 1e-8)
    pad = win // 2
    return out[pad:length - pad]


def mel_scale(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: FeatureConfig) -> np.ndarray:
    """Center frequency (Hz) of each of the n_mels triangular filters."""
    pts = np.linspace(mel_scale(config.fmin), mel_scale(config.fmax), config.n_mels + 2)
    return mel_to_hz(pts)[1:-1]


def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """(n_mels, window // 2 + 1) matrix of unit-peak triangular filters."""
    n_bins = config.window // 2 + 1
    fft_freqs = np.linspace(0.0, config.sample_rate / 2.0, n_bins)
    pts = mel_to_hz(np.linspace(mel_scale(config.fmin), mel_scale(config.fmax), config.n_mels + 2))
    fb = np.zeros((config.n_mels, n_bins))
    for m in range(config.n_mels):
        lo, center, hi = pts[m], pts[m + 1], pts[m + 2]
        up = (fft_freqs - lo) / max(center - lo, 1e-10)
        down = (hi - fft_freqs) / max(hi - center, 1e-10)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def extract_mel(waveform: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Log mel-spectrogram, shape (frames, n_mels)."""
    mag = stft_magnitude(waveform, config)
    mel = mag @ mel_filterbank(config).T
    return np.log(np.maximum(mel, config.log_floor))


def extract_energy(waveform: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Per-frame L2 magnitude of the linear spectrum, shape (frames,)."""
    mag = stft_magnitude(waveform, config)
    return np.linalg.norm(mag, axis=1)


def extract_f0(waveform: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Autocorrelation F0 track on the mel frame grid; 0 = unvoiced."""
    win, hop = config.window, config.hop
    if len(waveform) < win:
        raise DataError(f"waveform has {len(waveform)} samples, shorter than one window ({win})")
    pad = win // 2
    x = np.pad(waveform, (pad, pad), mode="reflect")
    n_frames = 1 + len(waveform) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames].copy()
    frames -= frames.mean(axis=1, keepdims=True)

    lag_min = max(2, int(config.sample_rate / config.f0_max))
    lag_max = min(win - 1, int(math.ceil(config.sample_rate / config.f0_min)))
    # biased autocorrelation via FFT; the constant 1/N normalization makes
    # longer lags decay, so the fundamental beats its subharmonics
    n_fft = 1 << (2 * win - 1).bit_length()
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    ac = np.fft.irfft(spec * np.conj(spec), axis=1)[:, : lag_max + 1]

    r0 = ac[:, 0]
    rms = np.sqrt(np.maximum(r0 / win, 0.0))
    silence = rms < 1e-4
    ac_norm = ac / np.maximum(r0[:, None], 1e-12)

    f0 = np.zeros(n_frames)
    band = ac_norm[:, lag_min: lag_max + 1]
    best = np.argmax(band, axis=1) + lag_min
    peak = ac_norm[np.arange(n_frames), best]
    for i in range(n_frames):
        if silence[i] or peak[i] < 0.3:
            continue
        lag = best[i]
        # parabolic interpolation around the peak
        if 1 <= lag < lag_max:
            a, b, c = ac_norm[i, lag - 1], ac_norm[i, lag], ac_norm[i, lag + 1]
            denom = a - 2 * b + c
            if abs(denom) > 1e-12:
                lag = lag + 0.5 * (a - c) / denom
        hz = config.sample_rate / lag
        if config.f0_min <= hz <= config.f0_max:
            f0[i] = hz
    return f0


def mel_to_linear(log_mel: np.ndarray, config: FeatureConfig, n_iter: int = 100) -> np.ndarray:
    """Invert the mel projection by multiplicative-update NNLS.

    Returns a non-negative linear magnitude spectrogram (frames, bins).
    """
    fb = mel_filterbank(config)  # (n_mels, n_bins)
    target = np.exp(log_mel).T  # (n_mels, frames)
    s = fb.T @ target  # non-negative init
    fbtb = fb.T @ fb
    num = fb.T @ target
    for _ in range(n_iter):
        s *= num / np.maximum(fbtb @ s, 1e-12)
    return s.T


def griffin_lim(log_mel: np.ndarray, config: FeatureConfig, n_iter: int = 60,
                seed: int = 0) -> np.ndarray:
    """Reconstruct a waveform from a log mel-spectrogram.

    Magnitudes come from the NNLS mel inversion; phases start random and
    are refined by iterative analysis/synthesis.
    """
    mag = mel_to_linear(log_mel, config)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    spec = mag * phase
    for _ in range(n_iter):
        wav = _istft(spec, config)
        reana = _stft(wav, config)
        if reana.shape[0] != mag.shape[0]:  # guard against off-by-one framing
            reana = reana[: mag.shape[0]]
        phase = np.exp(1j * np.angle(reana))
        spec = mag * phase
    wav = _istft(spec, config)
    peak = np.abs(wav).max()
    if peak > 1.0:
        wav = wav / peak
    return wav
