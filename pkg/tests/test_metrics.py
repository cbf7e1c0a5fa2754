import itertools
import math

import numpy as np
import pytest

from conftest import desk_config
from diffmel.audio import save_wav
from diffmel.errors import DataError
from diffmel.metrics import (
    MetricSkipped,
    dtw_align,
    evaluate_corpus,
    external_metric_adapter,
    format_report_text,
    mel_cepstrum,
    metric_f0_rmse,
    metric_mcd,
    metric_ssim,
    write_report,
)
from test_audio import sawtooth


def dct2_bruteforce(row):
    """Naive orthonormal DCT-II summation."""
    N = len(row)
    out = np.zeros(N)
    for k in range(N):
        scale = math.sqrt(1.0 / N) if k == 0 else math.sqrt(2.0 / N)
        out[k] = scale * sum(
            row[n] * math.cos(math.pi * k * (2 * n + 1) / (2 * N)) for n in range(N)
        )
    return out


class TestMelCepstrum:
    def test_constant_spectrum_only_c0(self):
        mel = np.full((5, 16), 2.5)
        cep = mel_cepstrum(mel, order=8)
        assert cep.shape == (5, 9)
        assert np.abs(cep[:, 1:]).max() < 1e-12
        assert np.abs(cep[:, 0]).min() > 0

    def test_matches_bruteforce_dct(self):
        row = np.random.default_rng(0).standard_normal(20)
        cep = mel_cepstrum(row[None, :], order=19)[0]
        assert np.allclose(cep, dct2_bruteforce(row), atol=1e-9)

    def test_linearity(self):
        mel = np.random.default_rng(1).standard_normal((4, 12))
        a = mel_cepstrum(mel, order=6)
        b = mel_cepstrum(2.0 * mel, order=6)
        assert np.allclose(b, 2.0 * a, atol=1e-12)


class TestMCD:
    def test_identity_zero(self):
        cep = np.random.default_rng(0).standard_normal((10, 25))
        assert metric_mcd(cep, cep) == 0.0

    def test_single_coefficient_hand_value(self):
        ref = np.zeros((1, 2))
        gen = np.zeros((1, 2))
        gen[0, 1] = 1.0  # c0 excluded, one included coefficient differs by 1
        value = metric_mcd(ref, gen, exclude_c0=True)
        assert abs(value - (10.0 / math.log(10)) * math.sqrt(2.0)) < 1e-3
        assert abs(value - 6.1419) < 1e-3

    def test_frame_mean_law(self):
        ref = np.zeros((2, 3))
        gen = np.zeros((2, 3))
        gen[:, 1] = 1.0  # same per-frame value v on both frames -> mean v
        two = metric_mcd(ref, gen)
        one = metric_mcd(ref[:1], gen[:1])
        assert abs(two - one) < 1e-12

    def test_scale_law(self):
        rng = np.random.default_rng(2)
        ref, gen = rng.standard_normal((6, 10)), rng.standard_normal((6, 10))
        base = metric_mcd(ref, gen)
        scaled = metric_mcd(3.0 * ref, 3.0 * gen)
        assert abs(scaled - 3.0 * base) < 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        ref, gen = rng.standard_normal((5, 8)), rng.standard_normal((5, 8))
        assert abs(metric_mcd(ref, gen) - metric_mcd(gen, ref)) < 1e-12

    def test_truncate_alignment(self):
        rng = np.random.default_rng(4)
        ref = rng.standard_normal((10, 8))
        assert metric_mcd(ref, ref[:7]) == 0.0


class TestF0RMSE:
    def test_identity(self):
        f0 = np.array([100.0, 0.0, 220.0])
        assert metric_f0_rmse(f0, f0) == 0.0

    def test_hand_value(self):
        assert metric_f0_rmse(np.array([100.0, 200.0]), np.array([110.0, 190.0])) == 10.0

    def test_symmetry(self):
        a = np.array([120.0, 150.0, 0.0, 300.0])
        b = np.array([130.0, 140.0, 200.0, 310.0])
        assert metric_f0_rmse(a, b) == metric_f0_rmse(b, a)

    def test_jointly_unvoiced_skipped(self):
        with pytest.raises(MetricSkipped, match="jointly voiced"):
            metric_f0_rmse(np.array([100.0, 120.0]), np.zeros(2))

    def test_only_joint_frames_count(self):
        ref = np.array([100.0, 0.0, 100.0])
        gen = np.array([110.0, 500.0, 0.0])
        assert metric_f0_rmse(ref, gen) == 10.0


class TestSSIM:
    def test_identity_exact_one(self):
        mel = np.random.default_rng(0).standard_normal((40, 32))
        assert metric_ssim(mel, mel) == 1.0

    def test_offset_monotonic_decrease(self):
        # positive-mean input, as log-mels are after denormalization
        mel = np.random.default_rng(1).standard_normal((30, 20)) + 10.0
        rng_span = float(mel.max() - mel.min())
        values = [metric_ssim(mel, mel + c, data_range=rng_span)
                  for c in (0.5, 1.5, 3.0)]
        assert values[0] < 1.0
        assert values[0] > values[1] > values[2]

    def test_anticorrelated_negative(self):
        # checkerboard windows are zero-mean, so negating flips the sign of
        # the structure term and the score goes negative
        i = np.arange(16)
        patch = (i[:, None] + i[None, :]) % 2 * 2.0 - 1.0
        assert metric_ssim(patch, -patch) < 0.0

    def test_matches_bruteforce_window_oracle(self):
        # direct per-window formula evaluation with explicit reflect padding
        rng = np.random.default_rng(7)
        x = rng.standard_normal((10, 9)) + 5.0
        y = x + 0.3 * rng.standard_normal((10, 9))

        L = float(x.max() - x.min())
        c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
        r = np.arange(7) - 3
        g = np.exp(-(r ** 2) / (2 * 1.5 ** 2))
        w = np.outer(g, g)
        w /= w.sum()
        xp = np.pad(x, 3, mode="reflect")
        yp = np.pad(y, 3, mode="reflect")
        total = 0.0
        for i in range(10):
            for j in range(9):
                wx = xp[i:i + 7, j:j + 7]
                wy = yp[i:i + 7, j:j + 7]
                mx, my = (w * wx).sum(), (w * wy).sum()
                vx = (w * wx * wx).sum() - mx * mx
                vy = (w * wy * wy).sum() - my * my
                cxy = (w * wx * wy).sum() - mx * my
                total += ((2 * mx * my + c1) * (2 * cxy + c2)) / (
                    (mx * mx + my * my + c1) * (vx + vy + c2))
        oracle = total / 90.0
        assert abs(metric_ssim(x, y) - oracle) < 1e-10

    def test_symmetric_under_shared_range(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((20, 20)), rng.standard_normal((20, 20))
        span = float(max(a.max(), b.max()) - min(a.min(), b.min()))
        assert abs(metric_ssim(a, b, data_range=span)
                   - metric_ssim(b, a, data_range=span)) < 1e-12

    def test_range_contract(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            a, b = rng.standard_normal((12, 12)), rng.standard_normal((12, 12))
            assert -1.0 <= metric_ssim(a, b) <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            metric_ssim(np.zeros((4, 4)), np.zeros((5, 4)))


def enumerate_paths(n, m):
    paths = []

    def rec(i, j, acc):
        if i == n - 1 and j == m - 1:
            paths.append(list(acc))
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                acc.append((i + di, j + dj))
                rec(i + di, j + dj, acc)
                acc.pop()

    rec(0, 0, [(0, 0)])
    return paths


class TestDTW:
    def test_identical_gives_diagonal(self):
        seq = np.array([1.0, 2.0, 3.0, 4.0])
        path = dtw_align(seq, seq)
        assert path == [(i, i) for i in range(4)]

    def test_repeated_frame_inserts_one_step(self):
        seq = np.array([1.0, 5.0, 2.0, 7.0])
        dup = np.array([1.0, 5.0, 5.0, 2.0, 7.0])
        path = dtw_align(seq, dup)
        assert len(path) == 5
        stalls = sum(1 for (i0, _), (i1, _) in zip(path, path[1:]) if i1 == i0)
        assert stalls == 1

    def test_beats_diagonal_truncation(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            a = rng.standard_normal(6)
            b = rng.standard_normal(8)
            path = dtw_align(a, b)
            path_cost = sum(abs(a[i] - b[j]) for i, j in path)
            diag = sum(abs(a[i] - b[i]) for i in range(6))
            # diagonal truncation is not even a complete path; the optimal
            # full path may pay more in total, so compare per-pair floor
            assert path_cost <= diag + sum(abs(a[5] - b[j]) for j in range(6, 8))

    def test_endpoints_and_monotonicity(self):
        rng = np.random.default_rng(6)
        a, b = rng.standard_normal(7), rng.standard_normal(5)
        path = dtw_align(a, b)
        assert path[0] == (0, 0) and path[-1] == (6, 4)
        for (i0, j0), (i1, j1) in zip(path, path[1:]):
            assert (i1 - i0, j1 - j0) in ((1, 0), (0, 1), (1, 1))

    def test_exhaustive_small_cases(self):
        # every sequence pair with lengths <= 3 over symbols {0, 1, 2}
        for la in range(1, 4):
            for lb in range(1, 4):
                paths = enumerate_paths(la, lb)
                for a in itertools.product(range(3), repeat=la):
                    for b in itertools.product(range(3), repeat=lb):
                        av = np.array(a, dtype=float)
                        bv = np.array(b, dtype=float)
                        got = dtw_align(av, bv)
                        got_cost = sum(abs(av[i] - bv[j]) for i, j in got)
                        best = min(
                            sum(abs(av[i] - bv[j]) for i, j in p) for p in paths
                        )
                        assert got_cost == best, (a, b)


class TestExternalAdapter:
    def make_tool(self, tmp_path, body):
        tool = tmp_path / "tool.sh"
        tool.write_text(f"#!/bin/sh\n{body}\n")
        tool.chmod(0o755)
        return str(tool)

    def test_absent_tool_omitted(self, tmp_path):
        spec = [str(tmp_path / "missing"), "{ref}", "{gen}"]
        assert external_metric_adapter(spec, "a.wav", "b.wav") is None

    def test_stub_scalar_parsed(self, tmp_path):
        tool = self.make_tool(tmp_path, "echo 0.87")
        assert external_metric_adapter([tool, "{ref}", "{gen}"], "a.wav", "b.wav") == 0.87

    def test_garbage_output_skips(self, tmp_path):
        tool = self.make_tool(tmp_path, "echo not a number")
        with pytest.raises(MetricSkipped, match="parseable"):
            external_metric_adapter([tool, "{ref}", "{gen}"], "a.wav", "b.wav")

    def test_crash_skips(self, tmp_path):
        tool = self.make_tool(tmp_path, "exit 3")
        with pytest.raises(MetricSkipped, match="status 3"):
            external_metric_adapter([tool, "{ref}", "{gen}"], "a.wav", "b.wav")


@pytest.fixture()
def wav_dirs(tmp_path):
    ref = tmp_path / "ref"
    gen = tmp_path / "gen"
    ref.mkdir()
    gen.mkdir()
    rng = np.random.default_rng(0)
    for i in range(4):
        wav = sawtooth(180 + 30 * i, seconds=0.4) + 0.01 * rng.standard_normal(int(0.4 * 22050))
        save_wav(ref / f"utt{i}.wav", wav, 22050)
        save_wav(gen / f"utt{i}.wav", wav, 22050)
    return ref, gen


class TestEvaluateCorpus:
    def test_identity_corpus_perfect_scores(self, wav_dirs):
        ref, gen = wav_dirs
        cfg = desk_config()
        report = evaluate_corpus(ref, gen, cfg)
        assert report.n_scored == 4 and report.n_skipped == 0
        assert report.means["ssim"] == 1.0
        assert report.means["mcd_db"] == 0.0
        assert report.means["f0_rmse_hz"] == 0.0

    def test_means_match_per_utterance_values(self, wav_dirs, tmp_path):
        ref, gen = wav_dirs
        # perturb one generated file so values differ
        wav = sawtooth(200, seconds=0.4)
        save_wav(gen / "utt0.wav", wav, 22050)
        cfg = desk_config()
        report = evaluate_corpus(ref, gen, cfg)
        for metric, mean in report.means.items():
            values = [v[metric] for v in report.per_utterance.values() if metric in v]
            assert mean == pytest.approx(float(np.mean(values)))
        path = write_report(report, tmp_path / "report.txt")
        text = path.read_text()
        assert "mean" in text and "utt0" in text
        assert (tmp_path / "report.json").exists()

    def test_corrupt_utterance_skipped_with_reason(self, wav_dirs):
        ref, gen = wav_dirs
        (gen / "utt2.wav").write_bytes(b"not audio")
        cfg = desk_config()
        report = evaluate_corpus(ref, gen, cfg)
        assert report.n_scored == 3
        assert report.n_skipped == 1
        assert any(u == "utt2" for u, _, _ in report.skipped)
        assert report.means["mcd_db"] == 0.0  # others unaffected

    def test_no_matched_ids(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        with pytest.raises(DataError, match="matched"):
            evaluate_corpus(tmp_path / "a", tmp_path / "b", desk_config())

    def test_dtw_mode_handles_length_mismatch(self, wav_dirs):
        ref, gen = wav_dirs
        wav = sawtooth(180, seconds=0.5)  # longer than the reference
        save_wav(gen / "utt0.wav", wav, 22050)
        cfg = desk_config(eval={"align": "dtw"})
        report = evaluate_corpus(ref, gen, cfg)
        assert "mcd_db" in report.per_utterance["utt0"]
        assert report.per_utterance["utt0"]["mcd_db"] >= 0.0

    def test_report_text_format(self, wav_dirs):
        ref, gen = wav_dirs
        report = evaluate_corpus(ref, gen, desk_config())
        text = format_report_text(report)
        lines = text.splitlines()
        assert lines[0] == "alignment: teacher"
        header = lines[3].split("\t")
        assert header[0] == "utt_id" and "ssim" in header
