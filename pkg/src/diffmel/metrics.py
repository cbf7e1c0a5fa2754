"""Objective metrics: mel-cepstral distortion, F0 RMSE, spectrogram SSIM,
DTW alignment, external STOI/PESQ adapters, and the corpus report.

Conventions:
  * Cepstra are orthonormal DCT-II coefficients of log-mel frames.
  * MCD is the standard per-frame dB distance, (10/ln 10) *
    sqrt(2 * sum_d (c_d - c'_d)^2), averaged over aligned frames, with
    the energy coefficient c0 excluded by default.
  * F0 RMSE is in Hz over frames voiced in both tracks.
  * SSIM treats mels as images: 7x7 Gaussian window (sigma 1.5),
    stabilizers from the reference's data range (C1=(0.01 L)^2,
    C2=(0.03 L)^2), local maps averaged over the full (reflect-padded)
    image.
"""

from __future__ import annotations

import json
import math
import shutil
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.ndimage

from .audio import extract_f0, extract_mel, load_audio
from .config import RunConfig
from .errors import DataError
from .tensorio import load_sidecar, load_tensor


class MetricSkipped(Exception):
    """A metric could not be computed for one utterance; carries the reason."""


def mel_cepstrum(mel_or_audio: np.ndarray, order: int = 24, config=None) -> np.ndarray:
    """Per-frame cepstra, shape (frames, order + 1) including c0.

    A 1-D input is treated as a waveform and converted to a log mel first.
    """
    x = np.asarray(mel_or_audio, dtype=np.float64)
    if x.ndim == 1:
        from .config import FeatureConfig

        x = extract_mel(x, config or FeatureConfig())
    if order < 1:
        raise ValueError("order must be >= 1")
    cep = scipy.fft.dct(x, type=2, norm="ortho", axis=1)
    return cep[:, : order + 1]


def _frame_mcd(delta: np.ndarray) -> np.ndarray:
    return (10.0 / math.log(10.0)) * np.sqrt(2.0 * (delta ** 2).sum(axis=1))


def metric_mcd(ref_cepstra: np.ndarray, gen_cepstra: np.ndarray,
               alignment: str = "truncate", exclude_c0: bool = True) -> float:
    """Mean per-frame mel-cepstral distortion in dB."""
    ref = np.asarray(ref_cepstra, dtype=np.float64)
    gen = np.asarray(gen_cepstra, dtype=np.float64)
    if ref.size == 0 or gen.size == 0:
        raise MetricSkipped("empty cepstra")
    lo = 1 if exclude_c0 else 0
    ref, gen = ref[:, lo:], gen[:, lo:]
    if alignment == "truncate":
        n = min(ref.shape[0], gen.shape[0])
        pairs = ref[:n] - gen[:n]
    elif alignment == "dtw":
        path = dtw_align(ref, gen)
        pairs = np.stack([ref[i] - gen[j] for i, j in path])
    else:
        raise ValueError(f"unknown alignment {alignment!r}")
    if pairs.shape[0] == 0:
        raise MetricSkipped("empty alignment")
    return float(_frame_mcd(pairs).mean())


def metric_f0_rmse(ref_f0: np.ndarray, gen_f0: np.ndarray) -> float:
    """RMSE in Hz over jointly voiced frames of pre-aligned tracks."""
    ref = np.asarray(ref_f0, dtype=np.float64)
    gen = np.asarray(gen_f0, dtype=np.float64)
    n = min(ref.size, gen.size)
    ref, gen = ref[:n], gen[:n]
    both = (ref > 0) & (gen > 0)
    if not both.any():
        raise MetricSkipped("no jointly voiced frames")
    return float(np.sqrt(((ref[both] - gen[both]) ** 2).mean()))


def _gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def metric_ssim(ref_mel: np.ndarray, gen_mel: np.ndarray,
                data_range: float | None = None) -> float:
    """Mean local structural similarity between two equal-shape mels."""
    x = np.asarray(ref_mel, dtype=np.float64)
    y = np.asarray(gen_mel, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError(f"SSIM needs equal shapes, got {x.shape} vs {y.shape}")
    L = float(x.max() - x.min()) if data_range is None else float(data_range)
    L = max(L, 1e-8)
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    w = _gaussian_window()

    def smooth(a):
        return scipy.ndimage.correlate(a, w, mode="reflect")

    mx, my = smooth(x), smooth(y)
    vx = smooth(x * x) - mx * mx
    vy = smooth(y * y) - my * my
    cxy = smooth(x * y) - mx * my
    ssim_map = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(ssim_map.mean())


def dtw_align(ref_seq: np.ndarray, gen_seq: np.ndarray) -> list[tuple[int, int]]:
    """Monotonic minimum-cost alignment path covering both endpoints.

    Frames are compared with euclidean distance; moves are diagonal,
    vertical, horizontal.
    """
    a = np.asarray(ref_seq, dtype=np.float64)
    b = np.asarray(gen_seq, dtype=np.float64)
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        raise DataError("cannot align empty sequences")
    # python-float DP: for the small matrices this sees, scalar list ops
    # are several times faster than numpy element indexing
    if a.ndim == 1:
        cost = np.abs(a[:, None] - b[None, :]).tolist()
    else:
        cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)).tolist()
    inf = math.inf
    D = [[inf] * m for _ in range(n)]
    move = [[0] * m for _ in range(n)]  # 1=up, 2=left, 3=diag
    D[0][0] = cost[0][0]
    for i in range(n):
        Di, Ci, Mi = D[i], cost[i], move[i]
        Dup = D[i - 1] if i > 0 else None
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best, arg = inf, 0
            if Dup is not None and Dup[j] < best:
                best, arg = Dup[j], 1
            if j > 0 and Di[j - 1] < best:
                best, arg = Di[j - 1], 2
            if Dup is not None and j > 0 and Dup[j - 1] <= best:
                best, arg = Dup[j - 1], 3
            Di[j] = Ci[j] + best
            Mi[j] = arg
    path = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while (i, j) != (0, 0):
        arg = move[i][j]
        if arg == 1:
            i -= 1
        elif arg == 2:
            j -= 1
        else:
            i, j = i - 1, j - 1
        path.append((i, j))
    path.reverse()
    return path


def dtw_path_cost(path, ref_seq, gen_seq) -> float:
    a = np.atleast_2d(np.asarray(ref_seq, dtype=np.float64))
    b = np.atleast_2d(np.asarray(gen_seq, dtype=np.float64))
    if np.asarray(ref_seq).ndim == 1:
        a = a.reshape(-1, 1)
    if np.asarray(gen_seq).ndim == 1:
        b = b.reshape(-1, 1)
    return float(sum(np.sqrt(((a[i] - b[j]) ** 2).sum()) for i, j in path))


def external_metric_adapter(tool_spec: list[str], ref_wav, gen_wav) -> float | None:
    """Run an external scoring tool and parse a scalar off its stdout.

    Returns None (metric omitted) when the executable is missing; raises
    MetricSkipped when the tool fails or prints nothing parseable.
    """
    if not tool_spec:
        return None
    argv = [arg.format(ref=str(ref_wav), gen=str(gen_wav)) for arg in tool_spec]
    if shutil.which(argv[0]) is None and not Path(argv[0]).exists():
        return None
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=120)
    except (OSError, subprocess.TimeoutExpired) as e:
        raise MetricSkipped(f"tool failed: {e}") from e
    if proc.returncode != 0:
        raise MetricSkipped(f"tool exited with status {proc.returncode}")
    for token in proc.stdout.split():
        try:
            return float(token)
        except ValueError:
            continue
    raise MetricSkipped("tool output had no parseable number")


@dataclass
class MetricsReport:
    alignment_mode: str
    per_utterance: dict = field(default_factory=dict)  # id -> {metric: value}
    means: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)        # (utt_id, metric, reason)
    n_scored: int = 0
    n_skipped: int = 0


def _load_side(directory: Path, utt_id: str, cfg: RunConfig):
    """Load one utterance side as (mel, f0 or None, wav path or None)."""
    wav_path = directory / f"{utt_id}.wav"
    bin_path = directory / f"{utt_id}.bin"
    if wav_path.exists():
        wav, _ = load_audio(wav_path, cfg.feature.sample_rate)
        return extract_mel(wav, cfg.feature), extract_f0(wav, cfg.feature), wav_path
    if bin_path.exists():
        return load_tensor(bin_path).astype(np.float64), None, None
    raise DataError(f"no .wav or .bin for {utt_id} in {directory}")


def _matched_ids(ref_dir: Path, gen_dir: Path) -> list[str]:
    def ids(d):
        return {p.stem for p in d.iterdir() if p.suffix in (".wav", ".bin")}

    matched = sorted(ids(ref_dir) & ids(gen_dir))
    if not matched:
        raise DataError(f"no matched utterance ids between {ref_dir} and {gen_dir}")
    return matched


def evaluate_corpus(ref_dir, gen_dir, cfg: RunConfig) -> MetricsReport:
    """Score every matched utterance id; partial failures become skips."""
    ref_dir, gen_dir = Path(ref_dir), Path(gen_dir)
    ev = cfg.eval
    report = MetricsReport(alignment_mode=ev.align)
    tool_specs = {"stoi": ev.stoi_tool, "pesq": ev.pesq_tool}

    for utt_id in _matched_ids(ref_dir, gen_dir):
        values = {}
        try:
            ref_mel, ref_f0, ref_wav = _load_side(ref_dir, utt_id, cfg)
            gen_mel, gen_f0, gen_wav = _load_side(gen_dir, utt_id, cfg)
        except DataError as e:
            report.skipped.append((utt_id, "all", str(e)))
            report.n_skipped += 1
            continue

        dtw_path = None
        if ev.align == "dtw":
            ref_cep = mel_cepstrum(ref_mel, ev.mcd_order)
            gen_cep = mel_cepstrum(gen_mel, ev.mcd_order)
            lo = 1 if ev.mcd_exclude_c0 else 0
            dtw_path = dtw_align(ref_cep[:, lo:], gen_cep[:, lo:])

        for metric in ev.metrics:
            try:
                if metric == "ssim":
                    a, b = _aligned_mels(ref_mel, gen_mel, dtw_path)
                    values["ssim"] = metric_ssim(a, b)
                elif metric == "mcd":
                    ref_cep = mel_cepstrum(ref_mel, ev.mcd_order)
                    gen_cep = mel_cepstrum(gen_mel, ev.mcd_order)
                    if dtw_path is None:
                        values["mcd_db"] = metric_mcd(
                            ref_cep, gen_cep, "truncate", ev.mcd_exclude_c0)
                    else:
                        lo = 1 if ev.mcd_exclude_c0 else 0
                        deltas = np.stack([ref_cep[i, lo:] - gen_cep[j, lo:]
                                           for i, j in dtw_path])
                        values["mcd_db"] = float(_frame_mcd(deltas).mean())
                elif metric == "f0rmse":
                    if ref_f0 is None or gen_f0 is None:
                        raise MetricSkipped("F0 needs audio on both sides")
                    a, b = _aligned_tracks(ref_f0, gen_f0, dtw_path)
                    values["f0_rmse_hz"] = metric_f0_rmse(a, b)
                elif metric in tool_specs:
                    if ref_wav is None or gen_wav is None:
                        raise MetricSkipped(f"{metric} needs audio on both sides")
                    score = external_metric_adapter(tool_specs[metric], ref_wav, gen_wav)
                    if score is not None:
                        values[metric] = score
            except MetricSkipped as e:
                report.skipped.append((utt_id, metric, str(e)))

        sidecar = load_sidecar(gen_dir / f"{utt_id}.bin") or _maybe_json(gen_dir / f"{utt_id}.json")
        if sidecar and "rtf" in sidecar:
            values["rtf"] = float(sidecar["rtf"])

        report.per_utterance[utt_id] = values
        report.n_scored += 1

    metrics_seen = sorted({m for v in report.per_utterance.values() for m in v})
    for metric in metrics_seen:
        scored = [v[metric] for v in report.per_utterance.values() if metric in v]
        report.means[metric] = float(np.mean(scored)) if scored else None
    return report


def _maybe_json(path: Path):
    if path.exists():
        return json.loads(path.read_text())
    return None


def _aligned_mels(ref_mel, gen_mel, dtw_path):
    if dtw_path is not None:
        a = np.stack([ref_mel[i] for i, _ in dtw_path])
        b = np.stack([gen_mel[j] for _, j in dtw_path])
        return a, b
    n = min(ref_mel.shape[0], gen_mel.shape[0])
    return ref_mel[:n], gen_mel[:n]


def _aligned_tracks(ref_f0, gen_f0, dtw_path):
    if dtw_path is not None:
        a = np.array([ref_f0[i] for i, _ in dtw_path if i < len(ref_f0)])
        b = np.array([gen_f0[j] for _, j in dtw_path if j < len(gen_f0)])
        n = min(len(a), len(b))
        return a[:n], b[:n]
    return ref_f0, gen_f0


_COLUMNS = ("ssim", "mcd_db", "f0_rmse_hz", "stoi", "pesq", "rtf")


def format_report_text(report: MetricsReport) -> str:
    cols = [c for c in _COLUMNS if any(c in v for v in report.per_utterance.values())]
    lines = [
        f"alignment: {report.alignment_mode}",
        f"utterances: {report.n_scored} scored, {report.n_skipped} skipped",
        "",
        "\t".join(["utt_id"] + cols),
    ]
    for utt_id in sorted(report.per_utterance):
        row = [utt_id]
        for c in cols:
            v = report.per_utterance[utt_id].get(c)
            row.append("-" if v is None else f"{v:.4f}")
        lines.append("\t".join(row))
    lines.append("\t".join(["mean"] + [
        "-" if report.means.get(c) is None else f"{report.means[c]:.4f}" for c in cols
    ]))
    if report.skipped:
        lines.append("")
        lines.append("skipped:")
        for utt_id, metric, reason in report.skipped:
            lines.append(f"  {utt_id} {metric}: {reason}")
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, out_path) -> Path:
    """Write the tab-delimited report plus a JSON twin next to it."""
    out_path = Path(out_path)
    out_path.write_text(format_report_text(report))
    machine = {
        "alignment": report.alignment_mode,
        "per_utterance": report.per_utterance,
        "means": report.means,
        "skipped": [list(s) for s in report.skipped],
        "n_scored": report.n_scored,
        "n_skipped": report.n_skipped,
    }
    out_path.with_suffix(".json").write_text(json.dumps(machine, indent=2, sort_keys=True))
    return out_path
