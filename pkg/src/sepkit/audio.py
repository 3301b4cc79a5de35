"""Sample-level primitives: WAV I/O, STFT, chunking and overlap-add."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

DEFAULT_SAMPLE_RATE = 8000


class AudioError(ValueError):
    pass


class SampleRateMismatch(AudioError):
    pass


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise AudioError(f"expected mono samples, got shape {samples.shape}")
        if samples.size < 1:
            raise AudioError("empty signal")
        if not np.all(np.isfinite(samples)):
            raise AudioError("signal contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise AudioError(f"invalid sample rate {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


def read_wav(path, sample_rate_hz: int | None = DEFAULT_SAMPLE_RATE) -> AudioSignal:
    """Read a mono PCM16 or float32 WAV file.

    PCM16 is scaled by 1/32768. A file whose rate differs from
    ``sample_rate_hz`` raises :class:`SampleRateMismatch`; pass ``None`` to
    accept any rate.
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises a zoo of types for bad files
        raise AudioError(f"cannot read {path}: {exc}") from exc

    if sample_rate_hz is not None and rate != sample_rate_hz:
        raise SampleRateMismatch(
            f"{path}: sample rate {rate} Hz, expected {sample_rate_hz} Hz"
        )
    if data.ndim != 1:
        raise AudioError(f"{path}: only mono WAV is supported (got {data.shape[1]} channels)")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    else:
        raise AudioError(f"{path}: unsupported encoding {data.dtype}")
    return AudioSignal(samples, int(rate))


def write_wav(path, signal: AudioSignal, pcm16: bool = False) -> None:
    """Write ``signal`` as float32 (bit-exact) or clipped PCM16."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pcm16:
        data = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = np.asarray(signal.samples, dtype=np.float32)
    wavfile.write(path, signal.sample_rate_hz, data)


@dataclass(frozen=True)
class ComplexSpectrogram:
    bins: np.ndarray  # (fft_size // 2 + 1, frames)
    fft_size: int
    hop: int
    win_length: int

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)


def check_stft_params(fft_size: int, hop: int, win_length: int) -> None:
    if min(fft_size, hop, win_length) <= 0:
        raise ValueError("STFT parameters must be positive")
    if not hop <= win_length <= fft_size:
        raise ValueError(
            f"need hop <= win_length <= fft_size, got {hop}, {win_length}, {fft_size}"
        )


def stft_window(fft_size: int, win_length: int) -> np.ndarray:
    """Periodic Hann of ``win_length`` zero-padded (centered) to ``fft_size``."""
    n = np.arange(win_length)
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_length)
    left = (fft_size - win_length) // 2
    out = np.zeros(fft_size)
    out[left:left + win_length] = win
    return out


def stft(signal, fft_size: int, hop: int, win_length: int) -> ComplexSpectrogram:
    """Center-padded STFT with a Hann analysis window.

    The signal is zero-padded by ``fft_size // 2`` on both sides, which gives
    ``len(signal) // hop + 1`` frames.
    """
    check_stft_params(fft_size, hop, win_length)
    x = signal.samples if isinstance(signal, AudioSignal) else np.asarray(signal)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise AudioError("stft needs a non-empty 1-D signal")
    half = fft_size // 2
    padded = np.pad(x, (half, half))
    n_frames = x.size // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(padded, fft_size)[::hop][:n_frames]
    spec = np.fft.rfft(frames * stft_window(fft_size, win_length), axis=-1)
    return ComplexSpectrogram(spec.T, fft_size, hop, win_length)


@dataclass(frozen=True)
class ChunkTensor:
    data: np.ndarray  # (N, K, R)
    pad_len: int
    step: int

    @property
    def num_chunks(self) -> int:
        return self.data.shape[2]


def chunk_padding(length: int, chunk_size: int, step: int) -> int:
    """Minimal right padding so chunks of ``chunk_size`` at ``step`` tile exactly."""
    if chunk_size < 1 or step < 1:
        raise ValueError("chunk size and step must be positive")
    if step > chunk_size:
        raise ValueError(f"step {step} larger than chunk size {chunk_size}")
    if length < 1:
        raise ValueError("cannot chunk an empty sequence")
    if length <= chunk_size:
        return chunk_size - length
    return (-(length - chunk_size)) % step


def chunk(features: np.ndarray, chunk_size: int, step: int) -> ChunkTensor:
    """Split an N x T' feature map into overlapping chunks, N x K x R."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise ValueError("features must be 2-D (N x T')")
    pad = chunk_padding(features.shape[1], chunk_size, step)
    padded = np.pad(features, ((0, 0), (0, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, chunk_size, axis=1)[:, ::step]
    # windows: (N, R, K)
    return ChunkTensor(np.ascontiguousarray(windows.transpose(0, 2, 1)), pad, step)


def overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    """Sum frames (L_f x M, one frame per column) placed ``hop`` samples apart."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] == 0 or frames.shape[0] == 0:
        raise ValueError("need a non-empty 2-D frame array")
    if hop < 1:
        raise ValueError("hop must be >= 1")
    frame_len, n_frames = frames.shape
    out = np.zeros((n_frames - 1) * hop + frame_len, dtype=np.result_type(frames, np.float64))
    for m in range(n_frames):
        out[m * hop:m * hop + frame_len] += frames[:, m]
    return out


def overlap_add_weights(frame_len: int, n_frames: int, hop: int) -> np.ndarray:
    return overlap_add(np.ones((frame_len, n_frames)), hop)


def unchunk(chunks: ChunkTensor, length: int | None = None) -> np.ndarray:
    """Weight-normalized overlap-add of a ChunkTensor back to N x T'."""
    n_feat, k, r = chunks.data.shape
    weights = overlap_add_weights(k, r, chunks.step)
    out = np.stack([overlap_add(chunks.data[i], chunks.step) for i in range(n_feat)]) / weights
    end = out.shape[1] - chunks.pad_len if length is None else length
    return out[:, :end]
