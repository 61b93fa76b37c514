import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neuroencode import encoder as enc
from neuroencode import featurize as fz

CFG = enc.EncoderConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, sample_rate=200, frame_size=20,
                        frame_stride=20, window_s=0.5, readout_layer=2, seed=1)


def wave(duration, rate=100, seed=0):
    return fz.Waveform(np.random.default_rng(seed).normal(size=int(round(duration * rate))), rate)


class TestWindows:
    def test_exact_one_window(self):
        assert len(fz.slide_windows(wave(2.0))) == 1

    def test_three_seconds(self):
        w = fz.slide_windows(wave(3.0))
        assert len(w) == 11
        np.testing.assert_allclose(w.times, 2.0 + 0.1 * np.arange(11), atol=1e-12)

    @pytest.mark.parametrize("dur", [2.0, 2.55, 3.0, 7.3])
    def test_count_formula(self, dur):
        assert len(fz.slide_windows(wave(dur))) == int(np.floor((dur - 2.0) / 0.1 + 1e-9)) + 1

    def test_segments_are_slices(self):
        w = wave(3.0)
        win = fz.slide_windows(w)
        for i in (0, 5, 10):
            np.testing.assert_array_equal(win.segments[i], w.samples[i * 10:i * 10 + 200])

    def test_too_short(self):
        with pytest.raises(ValueError):
            fz.slide_windows(wave(1.5))

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            fz.Waveform(np.zeros(4), 0)


class TestExtract:
    def test_zero_lora_matches_base(self):
        w = enc.init_encoder(CFG)
        win = fz.slide_windows(wave(1.0, 200), 0.5, 0.1)
        a = fz.extract_features(w, enc.init_lora(CFG), win).matrix
        b = fz.extract_features(w, None, win).matrix
        assert a.tobytes() == b.tobytes()

    def test_identical_windows_identical_rows(self):
        w = enc.init_encoder(CFG)
        seg = np.random.default_rng(0).normal(size=(1, CFG.window_samples))
        win = fz.Windows(np.repeat(seg, 3, axis=0), np.arange(3.0), np.arange(3))
        m = fz.extract_features(w, None, win).matrix
        assert m[0].tobytes() == m[1].tobytes() == m[2].tobytes()

    def test_deterministic(self):
        w = enc.init_encoder(CFG)
        win = fz.slide_windows(wave(1.2, 200), 0.5, 0.1)
        assert (fz.extract_features(w, None, win).matrix.tobytes()
                == fz.extract_features(w, None, win).matrix.tobytes())


class TestLanczos:
    def test_sinusoid(self):
        src = np.arange(0, 200.0001, 0.1)
        f = fz.WindowedFeatures(src, np.sin(2 * np.pi * 0.05 * src)[:, None])
        tgt = np.arange(10.0, 190.0, 2.0)
        out = fz.lanczos_resample(f, tgt, cutoff_hz=0.5).matrix[:, 0]
        assert np.abs(out - np.sin(2 * np.pi * 0.05 * tgt)).max() < 1e-3

    def test_constant_preserved(self):
        src = np.linspace(0, 30, 301)
        f = fz.WindowedFeatures(src, np.full((301, 2), 3.7))
        out = fz.lanczos_resample(f, np.arange(0, 30.001, 2.0)).matrix
        assert np.abs(out - 3.7).max() < 1e-10

    def test_hits_source_sample(self):
        src = np.arange(0, 10.0001, 0.1)
        x = np.random.default_rng(0).normal(size=(len(src), 3))
        out = fz.lanczos_resample(fz.WindowedFeatures(src, x), [src[40]], cutoff_hz=5.0).matrix
        np.testing.assert_allclose(out[0], x[40], atol=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (41, 2), elements=st.floats(-5, 5)),
           arrays(np.float64, (41, 2), elements=st.floats(-5, 5)),
           st.floats(-3, 3), st.floats(-3, 3))
    def test_linear(self, f, g, a, b):
        src = np.linspace(0, 8, 41)
        tgt = np.arange(0, 8.001, 2.0)
        r = lambda m: fz.lanczos_resample(fz.WindowedFeatures(src, m), tgt).matrix
        np.testing.assert_allclose(r(a * f + b * g), a * r(f) + b * r(g), atol=1e-10)

    def test_outside_support(self):
        f = fz.WindowedFeatures(np.arange(2.0, 10.0, 0.1), np.zeros((80, 1)))
        with pytest.raises(ValueError):
            fz.lanczos_resample(f, [1.0, 3.0])

    def test_kernel_zero_outside_lobes(self):
        assert fz.lanczos_kernel(np.array([3.0, -3.5, 10.0])).tolist() == [0.0, 0.0, 0.0]
        assert fz.lanczos_kernel(np.array([0.0]))[0] == 1.0


class TestDelays:
    def test_shifts(self):
        assert fz.delay_shifts([2, 4, 6, 8], 2.0) == [1, 2, 3, 4]

    def test_not_divisible(self):
        with pytest.raises(ValueError):
            fz.delay_shifts([3.0], 2.0)

    def test_impulse(self):
        x = np.zeros((8, 1))
        x[0] = 1.0
        out = fz.delay_stack(fz.VolumeFeatures(x)).matrix
        expect = np.zeros((8, 4))
        for i in range(4):
            expect[i + 1, i] = 1.0
        np.testing.assert_array_equal(out, expect)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(5, 20), st.integers(1, 4), st.integers(0, 10_000))
    def test_unshift_recovers(self, t, p, seed):
        x = np.random.default_rng(seed).normal(size=(t, p))
        out = fz.delay_stack(fz.VolumeFeatures(x)).matrix
        assert out.shape == (t, 4 * p)
        for i, k in enumerate([1, 2, 3, 4]):
            np.testing.assert_array_equal(out[k:, i * p:(i + 1) * p], x[:t - k])

    def test_indices_match_stack(self):
        x = np.arange(12.0).reshape(6, 2)
        idx = fz.delay_indices(6, [1, 2, 3, 4])
        ref = fz.delay_stack(fz.VolumeFeatures(x)).matrix
        for i in range(4):
            got = np.where(idx[:, i:i + 1] >= 0, x[idx[:, i]], 0.0)
            np.testing.assert_array_equal(got, ref[:, 2 * i:2 * i + 2])


class TestStory:
    def test_zscore_zero_variance(self):
        z = fz.zscore(np.c_[np.ones(5), np.arange(5.0)])
        assert np.all(z[:, 0] == 0) and abs(z[:, 1].std() - 1) < 1e-12

    def test_story_pipeline_deterministic(self):
        w = enc.init_encoder(CFG)
        st_ = fz.prepare_story("s", wave(12.0, 200, 3), 5, win_s=0.5)
        a = fz.story_volume_features(w, None, st_)
        assert a.shape == (5, CFG.d_model)
        assert a.tobytes() == fz.story_volume_features(w, None, st_).tobytes()

    def test_window_span_covers_weights(self):
        st_ = fz.prepare_story("s", wave(30.0), 12)
        lo, hi = st_.window_span(3, 6)
        m = st_.lanczos[3:6]
        assert np.all(m[:, :lo] == 0) and np.all(m[:, hi:] == 0)
        assert np.any(m[:, lo] != 0) and np.any(m[:, hi - 1] != 0)


class TestFiles:
    def test_wav_round_trip(self, tmp_path):
        w = fz.Waveform(np.random.default_rng(0).uniform(-0.9, 0.9, 500), 1600)
        fz.write_wav(tmp_path / "a.wav", w)
        r = fz.read_wav(tmp_path / "a.wav")
        assert r.sample_rate == 1600
        assert np.abs(r.samples - w.samples).max() <= 0.5 / 32767 + 1e-12

    def test_wav_clips(self, tmp_path):
        fz.write_wav(tmp_path / "a.wav", fz.Waveform(np.array([2.0, -2.0]), 100))
        np.testing.assert_allclose(fz.read_wav(tmp_path / "a.wav").samples, [1.0, -32768 / 32767])

    @pytest.mark.parametrize("single", [False, True])
    def test_feature_file(self, tmp_path, single):
        m = np.random.default_rng(0).normal(size=(6, 3))
        fz.save_features(tmp_path / "f.bin", m, tr=2.0, delays=[2, 4], single=single)
        got, header = fz.load_features(tmp_path / "f.bin")
        assert header["shape"] == [6, 3] and header["tr"] == 2.0
        np.testing.assert_allclose(got, m, rtol=1e-6 if single else 0)
        assert open(tmp_path / "f.bin", "rb").read(4) == b"NEFM"
