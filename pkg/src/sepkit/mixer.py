"""Clean and noisy-reverberant mixture synthesis and dataset manifests."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio import AudioSignal, read_wav, write_wav
from .room import SUPPORTED_COUNTS, RoomSpec, convolve, room_rirs, sample_room_spec

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")
GAIN_SPREAD_DB = 2.5
SILENCE_DBFS = -60.0
CLIP_TARGET = 0.9
MAX_OFFSET_TRIES = 20


class InsufficientSpeakers(ValueError):
    pass


class SilentSource(ValueError):
    pass


def _samples(x) -> np.ndarray:
    return np.asarray(x.samples if isinstance(x, AudioSignal) else x, dtype=np.float64)


def energy(x) -> float:
    return float(np.sum(_samples(x) ** 2))


def level_dbfs(x) -> float:
    x = _samples(x)
    power = np.mean(x ** 2)
    return -np.inf if power == 0 else 10 * np.log10(power)


def fit_length(x: np.ndarray, n: int, offset: int = 0) -> np.ndarray:
    """Crop ``x`` to ``n`` samples from ``offset``, looping if it runs short."""
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot fit an empty signal")
    idx = (offset + np.arange(n)) % x.size
    return x[idx]


def scale_noise_to_snr(signal_ref, noise, snr_db: float):
    """Scale ``noise`` so that 10 log10(E_signal / E_noise) equals ``snr_db``."""
    e_sig, e_noise = energy(signal_ref), energy(noise)
    if e_sig == 0:
        raise ValueError("reference signal has zero energy")
    if e_noise == 0:
        raise ValueError("noise has zero energy")
    if len(_samples(signal_ref)) != len(_samples(noise)):
        raise ValueError("signal and noise lengths differ; fit the noise first")
    gain = np.sqrt(e_sig / (e_noise * 10 ** (snr_db / 10)))
    if isinstance(noise, AudioSignal):
        return AudioSignal(noise.samples * gain, noise.sample_rate_hz)
    return _samples(noise) * gain


@dataclass
class Mixture:
    """A rendered mixture. ``targets`` is C x T; ``reverberant`` only in the noisy setting."""

    mixture: np.ndarray
    targets: np.ndarray
    sample_rate_hz: int
    reverberant: np.ndarray | None = None
    noise: np.ndarray | None = None
    peak_scale: float = 1.0
    absorption_clamped: bool = False

    @property
    def num_speakers(self) -> int:
        return self.targets.shape[0]

    @property
    def reference_sum(self) -> np.ndarray:
        """Reconstruction-loss reference: the clean sum (equals the mixture when clean)."""
        return self.targets.sum(axis=0)


def _stack_sources(sources) -> tuple[np.ndarray, int | None]:
    rate = None
    arrays = []
    for s in sources:
        if isinstance(s, AudioSignal):
            rate = s.sample_rate_hz
        arrays.append(_samples(s))
    n = min(a.size for a in arrays)
    return np.stack([a[:n] for a in arrays]), rate


def _check_count(c: int) -> None:
    if c not in SUPPORTED_COUNTS:
        raise ValueError(f"number of sources must be one of {SUPPORTED_COUNTS}, got {c}")


def _declip(mix: Mixture) -> Mixture:
    peak = np.max(np.abs(mix.mixture))
    if peak > 1.0:
        scale = CLIP_TARGET / peak
        mix.mixture = mix.mixture * scale
        mix.targets = mix.targets * scale
        if mix.reverberant is not None:
            mix.reverberant = mix.reverberant * scale
        if mix.noise is not None:
            mix.noise = mix.noise * scale
        mix.peak_scale = scale
    return mix


def synthesize_clean(sources, gains_db, sample_rate_hz: int = 8000) -> Mixture:
    """Anechoic mixture: targets are gain-scaled sources, mixture is their sum."""
    stacked, rate = _stack_sources(sources)
    _check_count(stacked.shape[0])
    if len(gains_db) != stacked.shape[0]:
        raise ValueError("one gain per source")
    gains = 10 ** (np.asarray(gains_db, dtype=np.float64) / 20)
    targets = stacked * gains[:, None]
    return _declip(Mixture(targets.sum(axis=0), targets, rate or sample_rate_hz))


def _delay(x: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros_like(x)
    if k < x.size:
        out[k:] = x[: x.size - k]
    return out


def synthesize_reverberant(
    sources,
    gains_db,
    room: RoomSpec,
    noise=None,
    sample_rate_hz: int = 8000,
    max_order: int | None = None,
    rir_len: int | None = None,
) -> Mixture:
    """Reverberant mixture plus noise at ``room.snr_db``, with dry aligned targets.

    Each scaled source is convolved with its RIR and cropped to the
    utterance length. Noise is scaled against the sum of reverberant
    speech. Target j is the scaled dry source delayed by its direct-path
    delay. ``noise=None`` gives a noiseless reverberant mixture.
    """
    stacked, rate = _stack_sources(sources)
    fs = rate or sample_rate_hz
    c, n = stacked.shape
    _check_count(c)
    if room.num_sources != c:
        raise ValueError(f"room has {room.num_sources} source positions for {c} sources")
    if len(gains_db) != c:
        raise ValueError("one gain per source")
    gains = 10 ** (np.asarray(gains_db, dtype=np.float64) / 20)
    dry = stacked * gains[:, None]
    rirs, clamped = room_rirs(room, fs, max_order=max_order, rir_len=rir_len)
    reverberant = np.stack([convolve(dry[j], rirs[j])[:n] for j in range(c)])
    targets = np.stack([_delay(dry[j], rirs[j].direct_delay_samples) for j in range(c)])
    speech = reverberant.sum(axis=0)
    scaled_noise = None
    mixture = speech
    if noise is not None:
        scaled_noise = scale_noise_to_snr(speech, fit_length(_samples(noise), n), room.snr_db)
        mixture = speech + scaled_noise
    mix = Mixture(mixture, targets, fs, reverberant, scaled_noise, absorption_clamped=clamped)
    return _declip(mix)


@dataclass
class SourceRef:
    path: str
    offset: int
    num_samples: int


@dataclass
class MixtureRecord:
    id: str
    split: str
    num_speakers: int
    source_refs: list[SourceRef]
    gains_db: list[float]
    seed: int
    sample_rate_hz: int
    num_samples: int
    room: RoomSpec | None = None
    noise_ref: tuple[str, int] | None = None
    speakers: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not (self.num_speakers == len(self.source_refs) == len(self.gains_db)):
            raise ValueError(f"{self.id}: inconsistent source count")
        _check_count(self.num_speakers)
        if (self.room is None) != (self.noise_ref is None):
            raise ValueError(f"{self.id}: room and noise must be given together")

    @property
    def noisy(self) -> bool:
        return self.room is not None

    def to_json(self) -> str:
        d = {
            "schema_version": SCHEMA_VERSION,
            "id": self.id,
            "split": self.split,
            "num_speakers": self.num_speakers,
            "speakers": list(self.speakers),
            "source_refs": [asdict(r) for r in self.source_refs],
            "gains_db": list(self.gains_db),
            "room": None if self.room is None else self.room.to_dict(),
            "noise_ref": None if self.noise_ref is None else list(self.noise_ref),
            "seed": self.seed,
            "sample_rate_hz": self.sample_rate_hz,
            "num_samples": self.num_samples,
        }
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MixtureRecord":
        d = json.loads(line)
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema version {version}")
        return cls(
            id=d["id"],
            split=d["split"],
            num_speakers=d["num_speakers"],
            source_refs=[SourceRef(**r) for r in d["source_refs"]],
            gains_db=d["gains_db"],
            seed=d["seed"],
            sample_rate_hz=d["sample_rate_hz"],
            num_samples=d["num_samples"],
            room=None if d["room"] is None else RoomSpec.from_dict(d["room"]),
            noise_ref=None if d["noise_ref"] is None else tuple(d["noise_ref"]),
            speakers=d.get("speakers", []),
        )


@dataclass
class DatasetSpec:
    speech_root: str
    noise_root: str | None = None
    train_size: int = 200
    val_size: int = 50
    test_size: int = 50
    sample_rate_hz: int = 8000
    duration_s: float = 4.0
    seed: int = 0
    counts: tuple[int, ...] = SUPPORTED_COUNTS
    fixed_count: int | None = None
    speaker_split: tuple[float, float, float] = (0.7, 0.15, 0.15)

    PROFILES = {"desk": (200, 50, 50), "paper": (20000, 5000, 3000)}

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        for c in self.counts:
            _check_count(c)
        if self.fixed_count is not None:
            _check_count(self.fixed_count)
        if min(self.train_size, self.val_size, self.test_size) < 0:
            raise ValueError("split sizes must be nonnegative")
        if self.sample_rate_hz <= 0 or self.duration_s <= 0:
            raise ValueError("sample rate and duration must be positive")

    @classmethod
    def from_profile(cls, profile: str, **kwargs) -> "DatasetSpec":
        train, val, test = cls.PROFILES[profile]
        return cls(train_size=train, val_size=val, test_size=test, **kwargs)

    def split_size(self, split: str) -> int:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}[split]

    @property
    def num_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate_hz))


@lru_cache(maxsize=512)
def _load(path: str, rate: int) -> np.ndarray:
    return read_wav(path, rate).samples


def _speakers(speech_root: Path) -> dict[str, list[str]]:
    if not speech_root.is_dir():
        raise FileNotFoundError(f"speech corpus root not found: {speech_root}")
    speakers = {}
    for d in sorted(p for p in speech_root.iterdir() if p.is_dir()):
        files = sorted(str(f) for f in d.rglob("*.wav"))
        if files:
            speakers[d.name] = files
    if not speakers:
        raise FileNotFoundError(f"no speaker directories with WAV files under {speech_root}")
    return speakers


def partition_speakers(names: list[str], fractions, seed: int) -> dict[str, list[str]]:
    """Deterministically split speaker names into disjoint train/val/test pools."""
    rng = np.random.default_rng([seed, 7919])
    order = [names[i] for i in rng.permutation(len(names))]
    n = len(order)
    n_val = max(1, int(round(fractions[1] * n)))
    n_test = max(1, int(round(fractions[2] * n)))
    n_train = max(n - n_val - n_test, 0)
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:n_train + n_val + n_test]),
    }


def child_seed(master_seed: int, split: str, index: int) -> int:
    seq = np.random.SeedSequence([master_seed, SPLITS.index(split), index])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def _pick_segment(files, n, rate, rng) -> SourceRef:
    for _ in range(MAX_OFFSET_TRIES):
        path = files[rng.integers(len(files))]
        audio = _load(path, rate)
        offset = int(rng.integers(0, audio.size - n + 1)) if audio.size > n else 0
        seg = audio[offset:offset + n]
        if level_dbfs(seg) >= SILENCE_DBFS:
            return SourceRef(path, offset, n)
    raise SilentSource(f"could not find a non-silent segment among {len(files)} files")


def make_record(spec: DatasetSpec, split: str, index: int, pool, speakers, noise_files, noisy) -> MixtureRecord:
    seed = child_seed(spec.seed, split, index)
    rng = np.random.default_rng(seed)
    c = spec.fixed_count or int(rng.choice(spec.counts))
    chosen = [pool[i] for i in sorted(rng.choice(len(pool), size=c, replace=False))]
    n = spec.num_samples
    refs = [_pick_segment(speakers[s], n, spec.sample_rate_hz, rng) for s in chosen]
    gains = rng.uniform(-GAIN_SPREAD_DB, GAIN_SPREAD_DB, size=c)
    gains = (gains - gains.mean()).tolist()
    room = noise_ref = None
    if noisy:
        room = sample_room_spec(int(rng.integers(2**31)), c)
        path = noise_files[rng.integers(len(noise_files))]
        size = _load(path, spec.sample_rate_hz).size
        noise_ref = (path, int(rng.integers(0, max(size - n, 0) + 1)))
    return MixtureRecord(
        id=f"{split}-{index:06d}",
        split=split,
        num_speakers=c,
        source_refs=refs,
        gains_db=gains,
        seed=seed,
        sample_rate_hz=spec.sample_rate_hz,
        num_samples=n,
        room=room,
        noise_ref=noise_ref,
        speakers=chosen,
    )


def render_record(record: MixtureRecord, max_order: int | None = None) -> Mixture:
    """Rebuild a mixture from its manifest record alone."""
    rate = record.sample_rate_hz
    sources = []
    for ref in record.source_refs:
        audio = _load(ref.path, rate)
        seg = audio[ref.offset:ref.offset + ref.num_samples]
        sources.append(np.pad(seg, (0, ref.num_samples - seg.size)))
    if record.room is None:
        return synthesize_clean(sources, record.gains_db, rate)
    noise_path, offset = record.noise_ref
    noise = fit_length(_load(noise_path, rate), record.num_samples, offset)
    return synthesize_reverberant(sources, record.gains_db, record.room, noise, rate, max_order=max_order)


def write_rendered(record: MixtureRecord, mix: Mixture, out_dir) -> Path:
    d = Path(out_dir) / record.split / record.id
    fs = mix.sample_rate_hz
    write_wav(d / "mix.wav", AudioSignal(mix.mixture, fs))
    for j, target in enumerate(mix.targets, start=1):
        write_wav(d / f"s{j}.wav", AudioSignal(target, fs))
    if mix.noise is not None:
        write_wav(d / "noise.wav", AudioSignal(mix.noise, fs))
    return d


def build_dataset(
    spec: DatasetSpec,
    noisy: bool = False,
    out_dir=None,
    render: bool = False,
    splits=SPLITS,
) -> list[MixtureRecord]:
    """Draw every record of every split; optionally write the manifest and WAV tree.

    Speakers are partitioned so that no speaker appears in two splits.
    Each record's randomness derives only from (master seed, split, index).
    """
    speakers = _speakers(Path(spec.speech_root))
    noise_files = []
    if noisy:
        if spec.noise_root is None:
            raise ValueError("noisy dataset requires a noise corpus root")
        noise_root = Path(spec.noise_root)
        if not noise_root.is_dir():
            raise FileNotFoundError(f"noise corpus root not found: {noise_root}")
        noise_files = sorted(str(f) for f in noise_root.rglob("*.wav"))
        if not noise_files:
            raise FileNotFoundError(f"no noise WAV files under {noise_root}")

    pools = partition_speakers(sorted(speakers), spec.speaker_split, spec.seed)
    needed = spec.fixed_count or max(spec.counts)
    records = []
    for split in splits:
        size = spec.split_size(split)
        if size == 0:
            continue
        if len(pools[split]) < needed:
            raise InsufficientSpeakers(
                f"split '{split}' has {len(pools[split])} speakers, need {needed}"
            )
        for i in range(size):
            records.append(make_record(spec, split, i, pools[split], speakers, noise_files, noisy))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_manifest(records, out_dir / "manifest.jsonl")
        if render:
            for rec in records:
                write_rendered(rec, render_record(rec), out_dir)
    return records


def write_manifest(records, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")
    tmp.replace(path)


def read_manifest(path) -> list[MixtureRecord]:
    with open(path) as f:
        return [MixtureRecord.from_json(line) for line in f if line.strip()]
