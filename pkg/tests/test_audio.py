import numpy as np
import pytest

from spikedisc.audio import (
    FrontendConfig,
    MelConfig,
    StftConfig,
    frame_count,
    hz_to_mel,
    log_mel,
    mel_filterbank,
    mel_to_hz,
    network_input,
    power_to_db,
    read_wave,
    stft,
    write_wave,
)
from spikedisc.errors import ConfigError, ContractError


def bin_sine(m, cfg, length):
    t = np.arange(length) / cfg.sample_rate
    return np.sin(2 * np.pi * m * cfg.sample_rate / cfg.n_fft * t)


class TestStft:
    def test_bin_centre_sine_main_lobe(self):
        cfg = StftConfig()
        p = stft(bin_sine(40, cfg, 4096), cfg)
        frac = p[:, 40] / p.sum(axis=1)
        lobe = p[:, 39:42].sum(axis=1) / p.sum(axis=1)
        # periodic Hann: centre bin holds 1/(1 + 2/4) of the energy, the lobe all of it
        np.testing.assert_allclose(frac, 2 / 3, rtol=1e-9)
        np.testing.assert_allclose(lobe, 1.0, rtol=1e-9)
        assert np.all(p.argmax(axis=1) == 40)

    def test_zero_signal(self):
        assert stft(np.zeros(3000), StftConfig()).sum() == 0.0

    @pytest.mark.parametrize("length", [1024, 1025, 1279, 1280, 5000])
    def test_frame_count(self, length):
        cfg = StftConfig()
        assert stft(np.ones(length), cfg).shape == (1 + (length - 1024) // 256, 513)
        assert frame_count(length, 1024, 256) == 1 + (length - 1024) // 256

    def test_too_short(self):
        with pytest.raises(ContractError):
            stft(np.zeros(1000), StftConfig())

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            StftConfig(n_fft=1000)
        with pytest.raises(ConfigError):
            StftConfig(hop=2048)


class TestMel:
    def test_scale(self):
        assert hz_to_mel(0.0) == 0.0
        assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2), abs=1e-12)
        assert hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)
        np.testing.assert_allclose(mel_to_hz(hz_to_mel([10.0, 440.0, 7999.0])), [10.0, 440.0, 7999.0])

    def test_filterbank(self):
        fb = mel_filterbank(MelConfig(), 1024, 16000)
        assert fb.shape == (64, 513)
        assert np.all(fb >= 0) and np.all(fb.sum(axis=1) > 0)
        freqs = np.linspace(0, 8000, 513)
        assert np.all(fb[:, freqs > 8000] == 0)
        support = (fb > 0).sum(axis=1)
        assert support[-1] > support[0]

    def test_f_max_constrained(self):
        fb = mel_filterbank(MelConfig(f_max=4000), 1024, 16000)
        assert np.all(fb[:, np.linspace(0, 8000, 513) >= 4000] == 0)

    def test_nyquist(self):
        with pytest.raises(ConfigError):
            mel_filterbank(MelConfig(f_max=8000), 1024, 11025)


class TestDb:
    def test_identities(self):
        for ref in (1.0, 0.37, 3e-4):
            assert power_to_db(ref, ref, top_db=None) == 0.0
            assert power_to_db(100 * ref, ref, top_db=None) == 20.0

    def test_monotone(self):
        p = np.sort(np.random.default_rng(0).uniform(0, 10, 100))
        assert np.all(np.diff(power_to_db(p, top_db=None)) >= 0)

    def test_clamp(self):
        db = power_to_db(np.array([1.0, 1e-3, 1e-12]), top_db=80.0)
        assert db.max() - db.min() <= 80.0
        np.testing.assert_allclose(db, [0.0, -30.0, -80.0])

    def test_callable_ref(self):
        p = np.array([2.0, 4.0])
        assert power_to_db(p, np.max)[1] == 0.0


class TestPipeline:
    def test_log_mel_shape_and_range(self):
        cfg = FrontendConfig(frames=28)
        w = np.random.default_rng(0).normal(size=8000)
        db = log_mel(w, cfg)
        assert db.shape == (64, 28)
        assert db.max() == 0.0 and db.min() >= -80.0
        x = network_input(db)
        assert x.min() >= 0.0 and x.max() == 1.0

    def test_pad(self):
        db = log_mel(np.random.default_rng(0).normal(size=2048), FrontendConfig(frames=10))
        assert db.shape == (64, 10)

    def test_paper_frames(self):
        assert frame_count(22050 * 5, 1024, 256) == 427

    def test_wave_io(self, tmp_path):
        w = np.random.default_rng(0).normal(size=(3, 100)).astype(np.float32)
        write_wave(tmp_path / "a.f32", w, 16000)
        back, sr = read_wave(tmp_path / "a.f32")
        assert sr == 16000
        np.testing.assert_array_equal(back, w.astype(np.float64))
        write_wave(tmp_path / "b.f32", w[0], 8000)
        assert read_wave(tmp_path / "b.f32")[0].shape == (100,)

    def test_wave_truncated(self, tmp_path):
        write_wave(tmp_path / "a.f32", np.zeros(10), 16000)
        (tmp_path / "a.f32").write_bytes(b"\0" * 12)
        with pytest.raises(ContractError):
            read_wave(tmp_path / "a.f32")
