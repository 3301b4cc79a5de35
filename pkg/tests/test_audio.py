import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from sepkit.audio import (
    AudioError,
    AudioSignal,
    SampleRateMismatch,
    chunk,
    overlap_add,
    overlap_add_weights,
    read_wav,
    stft,
    stft_window,
    unchunk,
    write_wav,
)


def test_float32_round_trip(tmp_path):
    ramp = np.linspace(-1, 1, 8000, dtype=np.float32)
    write_wav(tmp_path / "ramp.wav", AudioSignal(ramp, 8000))
    back = read_wav(tmp_path / "ramp.wav")
    assert back.samples.dtype == np.float32
    assert np.array_equal(back.samples, ramp)
    assert back.sample_rate_hz == 8000


def test_rate_mismatch_is_reported(tmp_path):
    write_wav(tmp_path / "a.wav", AudioSignal(np.zeros(160, dtype=np.float32), 16000))
    with pytest.raises(SampleRateMismatch):
        read_wav(tmp_path / "a.wav", 8000)


def test_pcm16_square_scaling(tmp_path):
    square = np.tile(np.array([32767, -32768], dtype=np.int16), 100)
    wavfile.write(tmp_path / "sq.wav", 8000, square)
    got = read_wav(tmp_path / "sq.wav").samples
    assert set(np.unique(got).tolist()) == {-1.0, 32767 / 32768}


def test_unsupported_encoding(tmp_path):
    wavfile.write(tmp_path / "i32.wav", 8000, np.zeros(100, dtype=np.int32))
    with pytest.raises(AudioError):
        read_wav(tmp_path / "i32.wav")


def test_signal_validation():
    with pytest.raises(AudioError):
        AudioSignal(np.array([]))
    with pytest.raises(AudioError):
        AudioSignal(np.array([0.0, np.nan]))
    with pytest.raises(AudioError):
        AudioSignal(np.zeros(4), 0)


def test_stft_zero_signal():
    spec = stft(np.zeros(1000), 512, 50, 240)
    assert np.all(spec.magnitude == 0)


@pytest.mark.parametrize("fft,hop,win", [(512, 50, 240), (1024, 120, 600), (2048, 240, 1200)])
def test_stft_shapes_for_loss_resolutions(fft, hop, win):
    x = np.random.default_rng(0).standard_normal(8000)
    spec = stft(x, fft, hop, win)
    assert spec.bins.shape == (fft // 2 + 1, 8000 // hop + 1)
    assert np.all(np.isfinite(spec.magnitude))


def test_stft_rejects_bad_params():
    with pytest.raises(ValueError):
        stft(np.ones(100), 256, 300, 200)
    with pytest.raises(AudioError):
        stft(np.array([]), 256, 64, 128)


def test_stft_sine_peak_matches_direct_dft():
    fs, fft = 8000, 512
    t = np.arange(fs) / fs
    x = np.sin(2 * np.pi * 1000 * t)
    spec = stft(x, fft, 128, fft)
    frame = 20
    # Oracle: explicit DFT sum over one windowed frame.
    start = frame * 128 - fft // 2
    seg = x[start:start + fft] * stft_window(fft, fft)
    n = np.arange(fft)
    oracle = np.array([np.sum(seg * np.exp(-2j * np.pi * k * n / fft)) for k in range(fft // 2 + 1)])
    assert np.argmax(np.abs(oracle)) == 64
    assert np.argmax(spec.magnitude[:, frame]) == 64
    np.testing.assert_allclose(spec.bins[:, frame], oracle, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 2**31))
def test_stft_linearity(a, seed):
    x = np.random.default_rng(seed).standard_normal(600)
    m1 = stft(x, 256, 64, 200).magnitude
    m2 = stft(a * x, 256, 64, 200).magnitude
    np.testing.assert_allclose(m2, a * m1, rtol=1e-6, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_stft_parseval(seed):
    x = np.random.default_rng(seed).standard_normal(2000)
    fft, hop, win = 512, 120, 400
    spec = stft(x, fft, hop, win)
    padded = np.pad(x, (fft // 2, fft // 2))
    w = stft_window(fft, win)
    for m in range(0, spec.bins.shape[1], 3):
        frame_energy = np.sum((padded[m * hop:m * hop + fft] * w) ** 2)
        mag2 = spec.magnitude[:, m] ** 2
        two_sided = mag2[0] + mag2[-1] + 2 * mag2[1:-1].sum()
        assert abs(two_sided / fft - frame_energy) <= 0.01 * frame_energy + 1e-12


def test_chunk_even_split():
    feats = np.arange(8, dtype=float)[None, :]
    c = chunk(feats, 4, 2)
    assert c.data.shape == (1, 4, 3)
    assert c.pad_len == 0
    for r, off in enumerate([0, 2, 4]):
        np.testing.assert_array_equal(c.data[0, :, r], feats[0, off:off + 4])


def test_chunk_pads_minimally():
    c = chunk(np.ones((2, 7)), 4, 2)
    assert c.pad_len == 1
    assert c.num_chunks == 3


def test_chunk_identity_when_length_equals_chunk():
    feats = np.random.default_rng(0).standard_normal((3, 5))
    c = chunk(feats, 5, 2)
    assert c.num_chunks == 1
    np.testing.assert_array_equal(c.data[:, :, 0], feats)


def test_chunk_rejects_bad_sizes():
    with pytest.raises(ValueError):
        chunk(np.ones((1, 5)), 0, 1)
    with pytest.raises(ValueError):
        chunk(np.ones((1, 5)), 2, 3)


def test_overlap_add_hand_example():
    np.testing.assert_array_equal(overlap_add(np.ones((4, 2)), 2), [1, 1, 2, 2, 1, 1])


def test_overlap_add_single_frame_identity():
    frame = np.arange(5.0)[:, None]
    np.testing.assert_array_equal(overlap_add(frame, 3), np.arange(5.0))


def test_overlap_add_matches_loop_oracle(rng):
    frames = rng.standard_normal((6, 9))
    hop = 4
    oracle = np.zeros((9 - 1) * hop + 6)
    for m in range(9):
        for i in range(6):
            oracle[m * hop + i] += frames[i, m]
    np.testing.assert_allclose(overlap_add(frames, hop), oracle, atol=1e-12)
    np.testing.assert_array_equal(overlap_add_weights(6, 9, hop), overlap_add(np.ones((6, 9)), hop))


def test_overlap_add_errors():
    with pytest.raises(ValueError):
        overlap_add(np.zeros((4, 0)), 2)
    with pytest.raises(ValueError):
        overlap_add(np.zeros((4, 2)), 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(1, 200), st.integers(0, 2**31))
def test_chunk_round_trip_property(k, p, length, seed):
    if p > k:
        k, p = p, k
    feats = np.random.default_rng(seed).standard_normal((3, length))
    back = unchunk(chunk(feats, k, p))
    assert back.shape == feats.shape
    assert np.max(np.abs(back - feats)) <= 1e-6 * max(1.0, np.max(np.abs(feats)))
