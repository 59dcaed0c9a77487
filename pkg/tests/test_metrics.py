import logging
import math
import sys
import textwrap

import numpy as np
import pytest

from hfsda import metrics
from hfsda.data import write_wav
from hfsda.errors import ConfigError, CorpusError, InvalidInputError


def speech_like(rng, seconds=3.0, sr=16000):
    t = np.arange(int(seconds * sr)) / sr
    f0 = 140.0
    x = sum(np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 6.3)) / h for h in range(1, 6))
    env = np.clip(np.sin(2 * np.pi * 3.0 * t), 0, None) ** 2      # syllables with pauses
    return 0.3 * x * env


def mix(clean, rng, snr_db):
    noise = rng.standard_normal(len(clean))
    noise *= math.sqrt((clean @ clean) / (noise @ noise) / 10 ** (snr_db / 10))
    return clean + noise


class TestStoi:
    def test_identity(self, rng):
        x = speech_like(rng)
        assert metrics.stoi(x, x) >= 0.99

    def test_amplitude_invariant(self, rng):
        x = speech_like(rng)
        y = mix(x, rng, 0)
        assert abs(metrics.stoi(3 * y, x) - metrics.stoi(y, x)) < 1e-9

    def test_monotone_in_snr(self, rng):
        x = speech_like(rng)
        scores = [metrics.stoi(mix(x, np.random.default_rng(7), s), x) for s in (-5, 0, 5, 10)]
        assert all(a < b for a, b in zip(scores, scores[1:]))

    def test_white_noise_at_minus_10_db(self, mini_pairs, rng):
        for pair in mini_pairs[:4]:
            assert metrics.stoi(mix(pair.clean, rng, -10), pair.clean) < 0.5

    @pytest.mark.parametrize("snr", [-5, 5, 20])
    def test_matches_reference_implementation(self, rng, snr):
        pystoi = pytest.importorskip("pystoi")
        x = speech_like(rng)
        y = mix(x, rng, snr)
        assert abs(metrics.stoi(y, x) - pystoi.stoi(x, y, 16000)) < 1e-2

    def test_too_short(self, rng):
        with pytest.raises(InvalidInputError):
            metrics.stoi(np.ones(2000), np.ones(2000))

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            metrics.stoi(np.ones(20000), np.ones(20001))

    def test_band_matrix(self):
        m = metrics.third_octave_matrix()
        assert m.shape == (15, 257)
        assert set(np.unique(m)) <= {0.0, 1.0}
        assert (m.sum(axis=0) <= 1).all()


class TestSiSdr:
    def test_identity_capped(self, rng):
        x = rng.standard_normal(1000)
        assert metrics.si_sdr(x, x) == 100.0
        assert metrics.si_sdr(3 * x, x) == 100.0

    def test_orthogonal_noise_at_tenth_amplitude(self, rng):
        x = rng.standard_normal(16000)
        n = rng.standard_normal(16000)
        n -= (n @ x) / (x @ x) * x
        n *= np.linalg.norm(x) / np.linalg.norm(n) / 10
        assert abs(metrics.si_sdr(x + n, x) - 20.0) < 0.01

    @pytest.mark.parametrize("a", [-2.0, 0.01, 7.0])
    def test_scale_invariant(self, rng, a):
        x, y = rng.standard_normal(4000), rng.standard_normal(4000)
        assert abs(metrics.si_sdr(a * (x + y), x) - metrics.si_sdr(x + y, x)) < 1e-9

    def test_zero_estimate_floor(self, rng):
        assert metrics.si_sdr(np.zeros(100), rng.standard_normal(100)) == -100.0

    def test_zero_reference(self):
        with pytest.raises(InvalidInputError):
            metrics.si_sdr(np.ones(10), np.zeros(10))


class TestSegSnr:
    def test_identity_upper_clamp(self, rng):
        x = rng.standard_normal(4800)
        assert metrics.seg_snr(x, x) == 35.0

    def test_zero_estimate(self, rng):
        # error equals the reference in every frame: 0 dB per frame
        assert metrics.seg_snr(np.zeros(4800), rng.standard_normal(4800)) == 0.0

    def test_lower_clamp(self, rng):
        x = rng.standard_normal(4800)
        assert metrics.seg_snr(-20 * x, x) == -10.0

    def test_two_frame_mean(self, rng):
        r = rng.standard_normal(960)
        e = np.empty(960)
        e[:480] = r[:480] * 0.0                        # error = ref -> 0 dB
        e[480:] = r[480:] * (1 - 0.1)                  # error = 0.1 ref -> 20 dB
        assert abs(metrics.seg_snr(e, r) - 10.0) < 1e-9

    def test_shorter_than_one_frame(self, rng):
        x = rng.standard_normal(100)
        assert metrics.seg_snr(x, x) == 35.0


PESQ_TOOL = textwrap.dedent("""
    import sys
    from pesq import pesq
    from scipy.io import wavfile
    sr, ref = wavfile.read(sys.argv[1])
    _, est = wavfile.read(sys.argv[2])
    print("PESQ (wb):", pesq(sr, ref, est, "wb"))
""")


class TestExternal:
    @pytest.fixture
    def wavs(self, tmp_path, rng):
        x = speech_like(rng)
        write_wav(tmp_path / "ref.wav", x)
        write_wav(tmp_path / "est.wav", x)
        return tmp_path / "ref.wav", tmp_path / "est.wav"

    def test_identity_through_pesq_tool(self, tmp_path, wavs):
        pytest.importorskip("pesq")
        tool = tmp_path / "pesq_tool.py"
        tool.write_text(PESQ_TOOL)
        ref, est = wavs
        score = metrics.external_pesq(est, ref, f"{sys.executable} {tool} {{ref}} {{est}}")
        assert score >= 4.5

    def test_composite_parses_last_three(self, wavs):
        ref, est = wavs
        cmd = f"{sys.executable} -c \"print('version 2'); print('3.1 2.2 2.9')\" {{ref}} {{est}}"
        assert metrics.external_composite(est, ref, cmd) == {"csig": 3.1, "cbak": 2.2, "covl": 2.9}

    def test_absent_tool(self, wavs, caplog):
        ref, est = wavs
        with caplog.at_level(logging.WARNING):
            assert metrics.external_pesq(est, ref, "no-such-binary-xyz {ref} {est}") is None
        assert "unavailable" in caplog.text

    def test_failing_tool(self, wavs):
        ref, est = wavs
        cmd = f"{sys.executable} -c \"import sys; sys.exit(3)\" {{ref}} {{est}}"
        assert metrics.external_pesq(est, ref, cmd) is None

    def test_unparsable_output(self, wavs):
        ref, est = wavs
        cmd = f"{sys.executable} -c \"print('n/a')\" {{ref}} {{est}}"
        assert metrics.external_pesq(est, ref, cmd) is None

    def test_unconfigured(self, wavs):
        assert metrics.external_pesq(*wavs, None) is None

    def test_template_validation(self):
        with pytest.raises(ConfigError):
            metrics.check_command_template("pesq {ref}", "metrics.pesq_cmd")


class TestReport:
    def test_means_over_present_fields(self):
        rep = metrics.ScoreReport({"a": {"stoi": 0.5, "pesq": 2.0}, "b": {"stoi": 0.7}})
        assert rep.corpus_mean == pytest.approx({"stoi": 0.6, "pesq": 2.0})

    def test_round_trip(self, tmp_path):
        rep = metrics.ScoreReport({"b": {"stoi": 0.25, "si_sdr": 3.5}, "a": {"stoi": 1.0}})
        rep.write(tmp_path / "r.jsonl")
        assert metrics.ScoreReport.read(tmp_path / "r.jsonl") == rep
        assert "stoi" in rep.summary_table()

    def test_score_directories(self, tmp_path, rng):
        for d in ("est", "ref"):
            (tmp_path / d).mkdir()
        x = speech_like(rng, 1.0)
        write_wav(tmp_path / "ref" / "u1.wav", x)
        write_wav(tmp_path / "est" / "u1.wav", x)
        write_wav(tmp_path / "est" / "u2.wav", x)
        rep = metrics.score_directories(tmp_path / "est", tmp_path / "ref")
        assert list(rep.per_file) == ["u1"]
        assert rep.per_file["u1"]["si_sdr"] == 100.0
        assert "pesq" not in rep.per_file["u1"]

    def test_no_overlap(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        with pytest.raises(CorpusError):
            metrics.score_directories(tmp_path / "a", tmp_path / "b")

