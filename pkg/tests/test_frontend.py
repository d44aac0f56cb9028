"""Audio and feature I/O, log-mel features, convolutional subsampling."""
import wave

import numpy as np
import pytest

from rwkv_asr import numerics as nx
from rwkv_asr.frontend import (LOG_FLOOR, N_MELS, AudioBuffer, FeatureSequence, FrontendError,
                               SubsampleStream, conv_subsample, init_subsample, log_mel_filterbank,
                               read_feature_file, read_wav, subsampled_length, write_feature_file,
                               write_wav)

LOG_1E_10 = -23.025850929940457


def _write_pcm(path, samples_i16, channels=1, width=2, rate=16000):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(np.asarray(samples_i16, dtype="<i2").tobytes())


class TestWav:
    def test_zeros(self, tmp_path):
        p = tmp_path / "z.wav"
        _write_pcm(p, np.zeros(16000))
        audio = read_wav(p)
        assert audio.samples.shape == (16000,) and audio.sample_rate == 16000
        assert not audio.samples.any()

    def test_scaling_extremum(self, tmp_path):
        p = tmp_path / "x.wav"
        _write_pcm(p, [-32768, 0, 32767])
        np.testing.assert_array_equal(read_wav(p).samples, [-1.0, 0.0, 32767 / 32768])

    def test_sine_round_trip(self, tmp_path):
        t = np.arange(16000) / 16000
        sine = 0.5 * np.sin(2 * np.pi * 440 * t)
        p = tmp_path / "s.wav"
        write_wav(p, AudioBuffer(sine))
        assert np.max(np.abs(read_wav(p).samples - sine)) < 1 / 32768

    def test_stereo_rejected(self, tmp_path):
        p = tmp_path / "st.wav"
        _write_pcm(p, np.zeros(200), channels=2)
        with pytest.raises(FrontendError, match="mono"):
            read_wav(p)

    def test_8bit_rejected(self, tmp_path):
        p = tmp_path / "b.wav"
        with wave.open(str(p), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(1)
            w.setframerate(16000)
            w.writeframes(bytes(100))
        with pytest.raises(FrontendError, match="16-bit"):
            read_wav(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.wav"
        _write_pcm(p, np.arange(1000))
        blob = p.read_bytes()
        p.write_bytes(blob[:-501])
        with pytest.raises(FrontendError):
            read_wav(p)


class TestLogMel:
    def test_single_window(self):
        feats = log_mel_filterbank(AudioBuffer(np.random.default_rng(0).normal(size=400) * 0.1))
        assert feats.frames.shape == (1, N_MELS)

    def test_too_short(self):
        with pytest.raises(FrontendError):
            log_mel_filterbank(AudioBuffer(np.ones(399)))

    def test_silence_hits_floor(self):
        feats = log_mel_filterbank(AudioBuffer(np.zeros(4000)))
        assert np.all(feats.frames == np.log(LOG_FLOOR))
        assert abs(np.log(LOG_FLOOR) - LOG_1E_10) < 1e-14

    def test_one_second_noise(self):
        feats = log_mel_filterbank(AudioBuffer(np.random.default_rng(1).uniform(-0.5, 0.5, 16000)))
        assert feats.frames.shape == (98, N_MELS)
        assert np.isfinite(feats.frames).all()

    def test_frame_count_formula(self):
        for n in (400, 559, 560, 561, 16000, 16159, 16160):
            expected = 1 + (n - 400) // 160
            assert log_mel_filterbank(AudioBuffer(np.ones(n) * 0.01)).num_frames == expected

    def test_deterministic(self):
        audio = AudioBuffer(np.random.default_rng(2).normal(size=3000) * 0.1)
        assert log_mel_filterbank(audio).frames.tobytes() == log_mel_filterbank(audio).frames.tobytes()

    def test_tone_lands_in_matching_band(self):
        t = np.arange(16000) / 16000
        lo = log_mel_filterbank(AudioBuffer(0.5 * np.sin(2 * np.pi * 300 * t))).frames.mean(0)
        hi = log_mel_filterbank(AudioBuffer(0.5 * np.sin(2 * np.pi * 5000 * t))).frames.mean(0)
        assert np.argmax(lo) < np.argmax(hi)


class TestFeatureFile:
    def test_header_example(self, tmp_path):
        p = tmp_path / "a.feat"
        vals = np.arange(240, dtype="<f4")
        p.write_bytes(b"FEAT 3 80\n" + vals.tobytes())
        feats = read_feature_file(p)
        assert feats.frames.shape == (3, 80)
        np.testing.assert_array_equal(feats.frames.reshape(-1), vals)

    def test_round_trip_bit_identical(self, tmp_path, rng):
        p = tmp_path / "b.feat"
        feats = FeatureSequence(rng.normal(size=(17, 80)).astype(np.float32))
        write_feature_file(p, feats)
        assert read_feature_file(p).frames.tobytes() == feats.frames.tobytes()
        blob = p.read_bytes()
        write_feature_file(p, read_feature_file(p))
        assert p.read_bytes() == blob

    def test_short_payload(self, tmp_path):
        p = tmp_path / "c.feat"
        p.write_bytes(b"FEAT 3 80\n" + np.zeros(239, dtype="<f4").tobytes())
        with pytest.raises(FrontendError):
            read_feature_file(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "d.feat"
        p.write_bytes(b"FEET 1 80\n" + np.zeros(80, dtype="<f4").tobytes())
        with pytest.raises(FrontendError, match="magic"):
            read_feature_file(p)

    def test_wrong_width_rejected(self, tmp_path):
        p = tmp_path / "e.feat"
        p.write_bytes(b"FEAT 2 40\n" + np.zeros(80, dtype="<f4").tobytes())
        with pytest.raises(FrontendError):
            read_feature_file(p)

    def test_non_finite_rejected(self):
        bad = np.zeros((2, 80))
        bad[1, 3] = np.nan
        with pytest.raises(FrontendError):
            FeatureSequence(bad)


class TestSubsample:
    def test_length_formula_exhaustive(self):
        prev = -1
        for t in range(7, 4001):
            n = subsampled_length(t)
            assert n == ((t - 1) // 2 - 1) // 2
            assert n >= prev
            prev = n
        # 98 raw frames: (97 // 2 - 1) // 2 = 23, as two unpadded 3x3 stride-2 convolutions give
        assert subsampled_length(98) == 23
        assert subsampled_length(7) == 1

    def test_output_shapes(self, rng):
        params = init_subsample(rng, d_io=16, channels=3)
        for t in (7, 8, 98, 131):
            out = conv_subsample(rng.normal(size=(t, 80)), params)
            assert out.shape == (subsampled_length(t), 16)

    def test_zero_input_zero_bias(self, rng):
        params = init_subsample(rng, d_io=16, channels=3)
        out = conv_subsample(np.zeros((30, 80)), params)
        assert not out.data.any()

    def test_too_short(self, rng):
        with pytest.raises(FrontendError):
            conv_subsample(np.zeros((6, 80)), init_subsample(rng, 8, 2))

    def test_batch_matches_single_and_padding_is_harmless(self, rng):
        params = init_subsample(rng, d_io=8, channels=2)
        a = rng.normal(size=(40, 80))
        batch = np.zeros((2, 60, 80))
        batch[0, :40] = a
        batch[1] = rng.normal(size=(60, 80))
        out = conv_subsample(batch, params).data
        single = conv_subsample(a, params).data
        np.testing.assert_allclose(out[0, :len(single)], single, atol=1e-13)

    def test_streaming_matches_parallel(self, rng):
        params = init_subsample(rng, d_io=8, channels=2)
        x = rng.normal(size=(57, 80))
        par = conv_subsample(x, params).data
        stream = SubsampleStream(params)
        outs = [o for o in (stream.push(f) for f in x) if o is not None]
        np.testing.assert_allclose(np.array(outs), par, atol=1e-12)

    def test_gradient(self, rng):
        params = init_subsample(rng, d_io=4, channels=2)
        x = nx.tensor(rng.normal(size=(9, 80)), requires_grad=True)
        r = rng.normal(size=(subsampled_length(9), 4))
        named = list(params.named().values()) + [x]

        def f():
            return (conv_subsample(x, params) * r).sum()

        grads = nx.backward(f(), named)
        for p, g in zip(named, grads):
            assert nx.max_rel_error(g, nx.numerical_grad(f, p)) < 1e-4
