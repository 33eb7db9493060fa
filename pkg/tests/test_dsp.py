"""DSP front-end tests: TDOA, beamforming, log-mel spectrograms, file formats."""

import numpy as np
import pytest

from occusense.dsp import (
    MonoClip,
    MultichannelClip,
    Spectrogram,
    SpectrogramConfig,
    beamform,
    frame_count,
    gcc_phat_tdoa,
    log_mel_spectrogram,
    mel_center_freqs,
    read_wav,
    write_wav,
)
from occusense.errors import DataError, NoSignalError
from occusense.io import read_matrix, write_matrix


def brute_force_xcorr_argmax(x: np.ndarray, y: np.ndarray, max_lag: int) -> int:
    """Independent oracle: time-domain cross-correlation argmax."""
    best_lag, best_val = 0, -np.inf
    for lag in range(-max_lag, max_lag + 1):
        if lag >= 0:
            v = np.dot(x[: len(x) - lag], y[lag:])
        else:
            v = np.dot(x[-lag:], y[: len(y) + lag])
        if v > best_val:
            best_val, best_lag = v, lag
    return best_lag


def delayed_copy(x: np.ndarray, d: int) -> np.ndarray:
    y = np.zeros_like(x)
    if d >= 0:
        y[d:] = x[: len(x) - d] if d else x
    else:
        y[:d] = x[-d:]
    return y


class TestGccPhat:
    def test_identical_clips_zero_lag(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(2048)
        assert gcc_phat_tdoa(MonoClip(16000, x), MonoClip(16000, x.copy()), 32) == 0

    def test_delayed_by_five(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(2048)
        y = delayed_copy(x, 5)
        assert brute_force_xcorr_argmax(x, y, 32) == 5
        assert gcc_phat_tdoa(MonoClip(16000, x), MonoClip(16000, y), 32) == 5

    def test_advanced_by_seven_is_negative(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(2048)
        y = delayed_copy(x, -7)
        assert brute_force_xcorr_argmax(x, y, 32) == -7
        assert gcc_phat_tdoa(MonoClip(16000, x), MonoClip(16000, y), 32) == -7

    def test_matches_brute_force_on_random_pairs(self):
        # oracle equivalence over 200 random (signal, delay) pairs
        rng = np.random.default_rng(3)
        for _ in range(200):
            x = rng.standard_normal(1500)
            d = int(rng.integers(-32, 33))
            y = delayed_copy(x, d) + 0.05 * rng.standard_normal(1500)
            got = gcc_phat_tdoa(MonoClip(8000, x), MonoClip(8000, y), 32)
            assert got == brute_force_xcorr_argmax(x, y, 32)

    def test_length_mismatch_rejected(self):
        with pytest.raises(DataError):
            gcc_phat_tdoa(MonoClip(8000, np.ones(100)), MonoClip(8000, np.ones(101)), 10)

    def test_max_lag_out_of_range(self):
        x = np.random.default_rng(4).standard_normal(100)
        with pytest.raises(DataError):
            gcc_phat_tdoa(MonoClip(8000, x), MonoClip(8000, x), 50)
        with pytest.raises(DataError):
            gcc_phat_tdoa(MonoClip(8000, x), MonoClip(8000, x), 0)

    def test_all_zero_input_is_no_signal(self):
        z = np.zeros(256)
        x = np.random.default_rng(5).standard_normal(256)
        with pytest.raises(NoSignalError):
            gcc_phat_tdoa(MonoClip(8000, z), MonoClip(8000, x), 16)
        with pytest.raises(NoSignalError):
            gcc_phat_tdoa(MonoClip(8000, x), MonoClip(8000, z), 16)

    def test_sample_rate_mismatch_rejected(self):
        x = np.random.default_rng(6).standard_normal(256)
        with pytest.raises(DataError):
            gcc_phat_tdoa(MonoClip(8000, x), MonoClip(16000, x), 16)


class TestBeamform:
    def test_identical_channels_zero_lags(self):
        x = np.random.default_rng(0).standard_normal(500)
        clip = MultichannelClip(8000, np.stack([x, x, x]))
        out = beamform(clip, [0, 0, 0])
        np.testing.assert_allclose(out.samples, x)

    def test_two_channel_delay_alignment(self):
        # ch2 = ch1 delayed by d; aligning recovers ch1 except d edge samples
        rng = np.random.default_rng(1)
        x = rng.standard_normal(1000)
        d = 7
        clip = MultichannelClip(8000, np.stack([x, delayed_copy(x, d)]))
        out = beamform(clip, [0, d])
        np.testing.assert_allclose(out.samples[:-d], x[:-d])
        np.testing.assert_allclose(out.samples[-d:], x[-d:] / 2)

    def test_single_channel_identity(self):
        x = np.random.default_rng(2).standard_normal(300)
        out = beamform(MultichannelClip(8000, x[None]), [0])
        np.testing.assert_array_equal(out.samples, x)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        ch = rng.standard_normal((3, 400))
        lags = [0, 4, -2]
        a = 3.7
        out1 = beamform(MultichannelClip(8000, ch), lags)
        out2 = beamform(MultichannelClip(8000, a * ch), lags)
        np.testing.assert_allclose(out2.samples, a * out1.samples, rtol=1e-12)

    def test_lag_count_mismatch(self):
        clip = MultichannelClip(8000, np.random.default_rng(4).standard_normal((2, 100)))
        with pytest.raises(DataError):
            beamform(clip, [0])


class TestLogMel:
    CFG = SpectrogramConfig()

    def test_zero_clip_is_log_floor(self):
        s = log_mel_spectrogram(MonoClip(16000, np.zeros(16000)), self.CFG)
        np.testing.assert_allclose(s.frames, np.log(self.CFG.log_floor))

    def test_sine_at_band_center_dominates_row(self):
        # oracle: direct DFT of one windowed frame, no np.fft involved
        centers = mel_center_freqs(self.CFG)
        band = 24
        t = np.arange(16000) / 16000.0
        x = np.sin(2 * np.pi * centers[band] * t)
        s = log_mel_spectrogram(MonoClip(16000, x), self.CFG)
        assert (s.frames.argmax(axis=1) == band).all()

        n = self.CFG.window_len
        frame = x[:n] * np.hanning(n)
        k = np.arange(n // 2 + 1)
        dft = np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n) @ frame
        fft_power = np.abs(np.fft.rfft(x[:n] * np.hanning(n))) ** 2
        np.testing.assert_allclose(np.abs(dft) ** 2, fft_power, rtol=1e-8, atol=1e-10)

    def test_single_frame_when_len_equals_window(self):
        cfg = SpectrogramConfig(window_len=400, hop_len=400)
        s = log_mel_spectrogram(MonoClip(16000, np.random.default_rng(0).standard_normal(400)), cfg)
        assert s.frames.shape[0] == 1

    def test_frame_count_formula(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            window = int(rng.integers(8, 100))
            hop = int(rng.integers(1, window + 1))
            length = int(rng.integers(window, 5 * window))
            assert frame_count(length, window, hop) == 1 + (length - window) // hop

    def test_finite_output_and_amplitude_doubling(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(16000)
        s1 = log_mel_spectrogram(MonoClip(16000, x), self.CFG)
        s2 = log_mel_spectrogram(MonoClip(16000, 2 * x), self.CFG)
        assert np.isfinite(s1.frames).all()
        energy = np.exp(s1.frames) - self.CFG.log_floor
        dominant = energy > 1e8 * self.CFG.log_floor
        diff = (s2.frames - s1.frames)[dominant]
        np.testing.assert_allclose(diff, np.log(4.0), atol=1e-6)

    def test_clip_too_short(self):
        with pytest.raises(DataError):
            log_mel_spectrogram(MonoClip(16000, np.zeros(100)), self.CFG)

    def test_invalid_config(self):
        with pytest.raises(Exception):
            SpectrogramConfig(fmin=5000, fmax=100)
        with pytest.raises(Exception):
            SpectrogramConfig(hop_len=0)
        with pytest.raises(Exception):
            SpectrogramConfig(log_floor=0.0)

    def test_spectrogram_shape_validation(self):
        with pytest.raises(DataError):
            Spectrogram(np.zeros((4, 3)), self.CFG)  # n_mels mismatch


class TestFileFormats:
    def test_wav_roundtrip_multichannel(self, tmp_path):
        rng = np.random.default_rng(0)
        clip = MultichannelClip(8000, rng.uniform(-0.9, 0.9, size=(3, 4000)))
        write_wav(tmp_path / "x.wav", clip)
        back = read_wav(tmp_path / "x.wav")
        assert back.sample_rate == 8000
        assert back.channels.shape == (3, 4000)
        np.testing.assert_allclose(back.channels, clip.channels, atol=1e-6)

    def test_wav_reads_int16(self, tmp_path):
        from scipy.io import wavfile

        data = (np.random.default_rng(1).uniform(-0.5, 0.5, 1000) * 32767).astype(np.int16)
        wavfile.write(tmp_path / "i.wav", 16000, data)
        clip = read_wav(tmp_path / "i.wav")
        assert clip.n_channels == 1
        assert np.abs(clip.channels).max() <= 1.0

    def test_matrix_roundtrip(self, tmp_path):
        m = np.random.default_rng(2).standard_normal((7, 5))
        write_matrix(tmp_path / "m.omx", m)
        back, dp = read_matrix(tmp_path / "m.omx")
        np.testing.assert_array_equal(back, m)
        assert dp is None

    def test_matrix_dp_flag(self, tmp_path):
        m = np.random.default_rng(3).standard_normal((4, 4))
        write_matrix(tmp_path / "m.omx", m, dp_params=(1.0, 0.5))
        back, dp = read_matrix(tmp_path / "m.omx")
        np.testing.assert_array_equal(back, m)
        assert dp == (1.0, 0.5)

    def test_matrix_bad_magic(self, tmp_path):
        (tmp_path / "bad.omx").write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(DataError):
            read_matrix(tmp_path / "bad.omx")


class TestClipTypes:
    def test_multichannel_invariants(self):
        with pytest.raises(DataError):
            MultichannelClip(8000, np.zeros((2, 10)) * np.nan)
        with pytest.raises(DataError):
            MultichannelClip(0, np.zeros((2, 10)))
        with pytest.raises(DataError):
            MultichannelClip(8000, np.zeros(10))  # not 2-D

    def test_mono_invariants(self):
        with pytest.raises(DataError):
            MonoClip(8000, np.array([]))
        with pytest.raises(DataError):
            MonoClip(8000, np.array([1.0, np.inf]))
