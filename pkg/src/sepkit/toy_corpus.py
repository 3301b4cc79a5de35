"""Synthetic speech-like and noise corpora for tests and demos.

Each "speaker" has a fixed pitch range and formant set; utterances are
sequences of voiced syllables with gliding pitch, breathy aspiration and
short pauses, on top of a faint broadband recording floor. The
noise files are band-limited noise with a slow random envelope, which keeps
them non-stationary.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import AudioSignal, write_wav


BREATH_LEVEL = 0.03  # aspiration noise relative to the voiced peak
FLOOR_LEVEL = 1e-3  # recording noise floor (about -60 dB re full scale)


def _formant_gain(freqs, formants, bandwidth=120.0):
    gain = np.zeros_like(freqs)
    for f in formants:
        gain += np.exp(-0.5 * ((freqs - f) / bandwidth) ** 2)
    return 0.05 + gain


def speaker_profile(rng: np.random.Generator) -> dict:
    return {
        "f0": float(rng.uniform(90, 260)),
        "formants": sorted(rng.uniform(300, 3300, size=3).tolist()),
        "rate": float(rng.uniform(3.0, 6.0)),  # syllables per second
    }


def synth_utterance(profile: dict, duration_s: float, fs: int, rng: np.random.Generator) -> np.ndarray:
    n = int(round(duration_s * fs))
    out = np.zeros(n)
    pos = int(rng.uniform(0, 0.1) * fs)
    while pos < n:
        syl = int(fs * rng.uniform(0.6, 1.4) / profile["rate"])
        syl = min(syl, n - pos)
        t = np.arange(syl) / fs
        f0 = profile["f0"] * rng.uniform(0.85, 1.15) * (1 + rng.uniform(-0.15, 0.15) * t / max(t[-1], 1e-3))
        phase = 2 * np.pi * np.cumsum(f0) / fs
        formants = [f * rng.uniform(0.85, 1.15) for f in profile["formants"]]
        seg = np.zeros(syl)
        for h in range(1, int(0.45 * fs / profile["f0"])):
            seg += _formant_gain(h * f0, formants) * np.sin(h * phase) / np.sqrt(h)
        seg /= max(np.max(np.abs(seg)), 1e-12)
        seg += BREATH_LEVEL * rng.standard_normal(syl)
        env = np.sin(np.pi * np.arange(syl) / max(syl, 1)) ** 2
        out[pos:pos + syl] = seg * env * rng.uniform(0.5, 1.0)
        pos += syl + int(fs * rng.uniform(0.03, 0.2))
    out += FLOOR_LEVEL * rng.standard_normal(n)
    peak = np.max(np.abs(out))
    return out / peak * 0.5 if peak > 0 else out


def synth_noise(duration_s: float, fs: int, rng: np.random.Generator) -> np.ndarray:
    n = int(round(duration_s * fs))
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1 / fs)
    spec *= 1.0 / np.sqrt(1.0 + freqs / rng.uniform(200, 1500))
    noise = np.fft.irfft(spec, n)
    knots = rng.uniform(0.3, 1.0, size=max(2, int(duration_s * 4)))
    env = np.interp(np.linspace(0, len(knots) - 1, n), np.arange(len(knots)), knots)
    noise *= env
    return noise / np.max(np.abs(noise)) * 0.5


def make_toy_corpus(
    root,
    num_speakers: int = 30,
    utterances_per_speaker: int = 3,
    num_noise: int = 10,
    duration_s: float = 5.0,
    fs: int = 8000,
    seed: int = 0,
) -> tuple[Path, Path]:
    """Write ``<root>/speech/<speaker>/*.wav`` and ``<root>/noise/*.wav``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    speech_root, noise_root = root / "speech", root / "noise"
    for s in range(num_speakers):
        profile = speaker_profile(rng)
        for u in range(utterances_per_speaker):
            samples = synth_utterance(profile, duration_s, fs, rng)
            write_wav(speech_root / f"spk{s:03d}" / f"utt{u:02d}.wav", AudioSignal(samples, fs))
    for i in range(num_noise):
        write_wav(noise_root / f"noise{i:03d}.wav", AudioSignal(synth_noise(duration_s, fs, rng), fs))
    return speech_root, noise_root
