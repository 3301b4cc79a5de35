import math

import numpy as np
import pytest

from sepkit.audio import AudioSignal
from sepkit.mixer import (
    DatasetSpec,
    InsufficientSpeakers,
    MixtureRecord,
    build_dataset,
    energy,
    fit_length,
    read_manifest,
    render_record,
    scale_noise_to_snr,
    synthesize_clean,
    synthesize_reverberant,
)
from sepkit.room import RoomSpec, room_rirs, sample_room_spec


def snr_db(sig, noise):
    return 10 * np.log10(energy(sig) / energy(noise))


def test_snr_zero_db(rng):
    s, n = rng.standard_normal(1000), rng.standard_normal(1000) * 3
    scaled = scale_noise_to_snr(s, n, 0.0)
    assert energy(scaled) == pytest.approx(energy(s), rel=1e-12)


@pytest.mark.parametrize("snr", [0.0, 7.3, 15.0])
def test_snr_exact(rng, snr):
    s, n = rng.standard_normal(4000), rng.standard_normal(4000)
    assert snr_db(s, scale_noise_to_snr(s, n, snr)) == pytest.approx(snr, abs=1e-6)


def test_snr_audio_signal(rng):
    out = scale_noise_to_snr(AudioSignal(rng.standard_normal(100)), AudioSignal(rng.standard_normal(100)), 5)
    assert isinstance(out, AudioSignal)


def test_snr_errors(rng):
    with pytest.raises(ValueError):
        scale_noise_to_snr(np.zeros(10), rng.standard_normal(10), 5)
    with pytest.raises(ValueError):
        scale_noise_to_snr(rng.standard_normal(10), np.zeros(10), 5)
    with pytest.raises(ValueError):
        scale_noise_to_snr(rng.standard_normal(10), rng.standard_normal(12), 5)


def test_fit_length_loops():
    np.testing.assert_array_equal(fit_length(np.arange(3), 7, 1), [1, 2, 0, 1, 2, 0, 1])


def test_clean_identical_sources():
    s = np.sin(np.linspace(0, 20, 500)) * 0.3
    mix = synthesize_clean([s, s], [0.0, 0.0])
    np.testing.assert_allclose(mix.mixture, 2 * s)
    assert mix.peak_scale == 1.0


def test_clean_gain_ratio(rng):
    a, b = rng.standard_normal(800) * 0.1, rng.standard_normal(800) * 0.1
    b *= np.sqrt(energy(a) / energy(b))
    mix = synthesize_clean([a, b], [0.0, -5.0])
    assert 10 * np.log10(energy(mix.targets[0]) / energy(mix.targets[1])) == pytest.approx(5.0, abs=1e-9)
    assert np.array_equal(mix.mixture, mix.targets.sum(axis=0))


def test_clean_five_sources_and_clipping(rng):
    sources = [rng.uniform(-0.9, 0.9, 400) for _ in range(5)]
    mix = synthesize_clean(sources, [0.0] * 5)
    assert mix.num_speakers == 5
    assert np.max(np.abs(mix.mixture)) == pytest.approx(0.9)
    assert mix.peak_scale < 1
    np.testing.assert_allclose(mix.mixture, mix.targets.sum(axis=0), atol=1e-12)


def test_clean_rejects_counts(rng):
    with pytest.raises(ValueError):
        synthesize_clean([rng.standard_normal(10)], [0.0])


def test_clean_crops_to_shortest(rng):
    mix = synthesize_clean([rng.standard_normal(100) * 0.1, rng.standard_normal(80) * 0.1], [0, 0])
    assert mix.mixture.shape == (80,)


def _room(distances, t60=0.2, snr=10.0):
    return RoomSpec(
        room_dims=(6.0, 5.0, 2.5),
        t60_s=t60,
        mic_pos=(3.0, 2.5, 1.5),
        source_angles_deg=[0.0, 90.0, 180.0][: len(distances)],
        source_distances_m=distances,
        snr_db=snr,
    )


def test_reverberant_degenerate_room(rng):
    # Integer-sample distances so the direct path is an exact scaled delay.
    dists = [343 * 45 / 8000, 343 * 52 / 8000]
    room = _room(dists)
    sources = [rng.standard_normal(1000) * 0.05, rng.standard_normal(1000) * 0.05]
    mix = synthesize_reverberant(sources, [0.0, 0.0], room, noise=None, max_order=0)
    expected = np.zeros(1000)
    for s, d, k in zip(sources, dists, (45, 52)):
        expected[k:] += s[:1000 - k] / (4 * math.pi * d)
    np.testing.assert_allclose(mix.mixture, expected, atol=1e-12)


def test_reverberant_targets_are_dry_and_aligned(rng):
    room = sample_room_spec(5, 2)
    sources = [rng.standard_normal(2000) * 0.1, rng.standard_normal(2000) * 0.1]
    gains = [1.0, -1.0]
    mix = synthesize_reverberant(sources, gains, room, rng.standard_normal(2000))
    rirs, _ = room_rirs(room, 8000)
    for j in range(2):
        k = rirs[j].direct_delay_samples
        expected = np.zeros(2000)
        expected[k:] = sources[j][:2000 - k] * 10 ** (gains[j] / 20) * mix.peak_scale
        np.testing.assert_allclose(mix.targets[j], expected, atol=1e-12)
        assert not np.allclose(mix.targets[j], mix.reverberant[j])


def test_reverberant_consistency_and_snr(rng):
    room = sample_room_spec(11, 3)
    sources = [rng.standard_normal(3000) * 0.1 for _ in range(3)]
    mix = synthesize_reverberant(sources, [0.5, -0.5, 0.0], room, rng.standard_normal(1000))
    resid = mix.mixture - mix.reverberant.sum(axis=0) - mix.noise
    assert np.max(np.abs(resid)) < 1e-6
    assert snr_db(mix.reverberant.sum(axis=0), mix.noise) == pytest.approx(room.snr_db, abs=0.1)


def test_reverberant_source_count_mismatch(rng):
    with pytest.raises(ValueError):
        synthesize_reverberant([rng.standard_normal(100)] * 3, [0, 0, 0], sample_room_spec(0, 2))


def _spec(corpus, **kw):
    speech, noise = corpus
    base = dict(speech_root=str(speech), noise_root=str(noise), train_size=12, val_size=4, test_size=4, duration_s=1.0)
    base.update(kw)
    return DatasetSpec(**base)


def test_build_dataset_deterministic(toy_corpus, tmp_path):
    spec = _spec(toy_corpus, seed=3)
    build_dataset(spec, noisy=True, out_dir=tmp_path / "a")
    build_dataset(spec, noisy=True, out_dir=tmp_path / "b")
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
    build_dataset(_spec(toy_corpus, seed=4), noisy=True, out_dir=tmp_path / "c")
    assert (tmp_path / "a/manifest.jsonl").read_bytes() != (tmp_path / "c/manifest.jsonl").read_bytes()


def test_build_dataset_sizes_and_disjoint_speakers(toy_corpus):
    records = build_dataset(_spec(toy_corpus, train_size=30, val_size=10, test_size=10))
    by = {s: [r for r in records if r.split == s] for s in ("train", "val", "test")}
    assert [len(by[s]) for s in ("train", "val", "test")] == [30, 10, 10]
    spk = {s: {p for r in by[s] for p in r.speakers} for s in by}
    assert not spk["train"] & spk["val"]
    assert not spk["train"] & spk["test"]
    assert not spk["val"] & spk["test"]
    for r in records:
        assert len(set(r.speakers)) == r.num_speakers
        assert r.num_speakers in (2, 3, 4, 5)
        assert r.room is None and r.noise_ref is None


def test_insufficient_speakers(tiny_corpus):
    with pytest.raises(InsufficientSpeakers):
        build_dataset(_spec(tiny_corpus, fixed_count=5))


def test_manifest_round_trip_and_rerender(toy_corpus, tmp_path):
    records = build_dataset(_spec(toy_corpus), noisy=True, out_dir=tmp_path, render=True)
    again = read_manifest(tmp_path / "manifest.jsonl")
    assert [r.to_json() for r in again] == [r.to_json() for r in records]
    rec = again[0]
    a, b = render_record(rec), render_record(records[0])
    assert np.array_equal(a.mixture, b.mixture)
    d = tmp_path / rec.split / rec.id
    assert (d / "mix.wav").exists() and (d / "noise.wav").exists()
    assert all((d / f"s{j}.wav").exists() for j in range(1, rec.num_speakers + 1))


def test_record_invariants():
    with pytest.raises(ValueError):
        MixtureRecord("x", "train", 2, [], [0.0, 0.0], 0, 8000, 10)


def test_gains_are_mean_centred(toy_corpus):
    for r in build_dataset(_spec(toy_corpus)):
        assert abs(sum(r.gains_db)) < 1e-9
        assert all(abs(g) <= 5.0 for g in r.gains_db)


def test_profile_sizes():
    spec = DatasetSpec.from_profile("paper", speech_root="x")
    assert (spec.train_size, spec.val_size, spec.test_size) == (20000, 5000, 3000)
    desk = DatasetSpec.from_profile("desk", speech_root="x")
    assert (desk.train_size, desk.val_size, desk.test_size) == (200, 50, 50)
