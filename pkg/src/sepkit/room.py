"""Room sampling and image-source room impulse responses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .audio import AudioSignal

SPEED_OF_SOUND = 343.0
KERNEL_WIDTH = 81
MAX_ORDER_CAP = 30
SUPPORTED_COUNTS = (2, 3, 4, 5)

# Sampling ranges of the noisy-reverberant recipe.
ROOM_XY_RANGE = (4.0, 7.0)
ROOM_HEIGHT = 2.5
T60_RANGE = (0.16, 0.36)
MIC_JITTER = 0.2
MIC_HEIGHT = 1.5
SOURCE_HEIGHT = 1.5
ANGLE_RANGE_DEG = (0.0, 180.0)
SOURCE_DISTANCE = 1.5
DISTANCE_JITTER = 0.2
SNR_RANGE_DB = (0.0, 15.0)


class GeometryError(ValueError):
    pass


@dataclass
class RoomSpec:
    room_dims: tuple[float, float, float]
    t60_s: float
    mic_pos: tuple[float, float, float]
    source_angles_deg: list[float]
    source_distances_m: list[float]
    snr_db: float
    seed: int | None = None
    source_positions: list[tuple[float, float, float]] = field(init=False)

    def __post_init__(self):
        self.room_dims = tuple(float(v) for v in self.room_dims)
        self.mic_pos = tuple(float(v) for v in self.mic_pos)
        self.source_angles_deg = [float(v) for v in self.source_angles_deg]
        self.source_distances_m = [float(v) for v in self.source_distances_m]
        if len(self.source_angles_deg) != len(self.source_distances_m):
            raise GeometryError("one angle and one distance per source")
        mx, my, _ = self.mic_pos
        self.source_positions = [
            (
                mx + d * math.cos(math.radians(theta)),
                my + d * math.sin(math.radians(theta)),
                SOURCE_HEIGHT,
            )
            for theta, d in zip(self.source_angles_deg, self.source_distances_m)
        ]

    @property
    def num_sources(self) -> int:
        return len(self.source_angles_deg)

    def validate(self) -> None:
        check_inside(self.mic_pos, self.room_dims, "microphone")
        for i, pos in enumerate(self.source_positions):
            check_inside(pos, self.room_dims, f"source {i}")

    def to_dict(self) -> dict:
        return {
            "room_dims": list(self.room_dims),
            "t60_s": self.t60_s,
            "mic_pos": list(self.mic_pos),
            "source_angles_deg": list(self.source_angles_deg),
            "source_distances_m": list(self.source_distances_m),
            "snr_db": self.snr_db,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoomSpec":
        return cls(
            room_dims=tuple(d["room_dims"]),
            t60_s=d["t60_s"],
            mic_pos=tuple(d["mic_pos"]),
            source_angles_deg=list(d["source_angles_deg"]),
            source_distances_m=list(d["source_distances_m"]),
            snr_db=d["snr_db"],
            seed=d.get("seed"),
        )


def check_inside(pos, dims, what="point") -> None:
    for p, L in zip(pos, dims):
        if not 0.0 < p < L:
            raise GeometryError(f"{what} at {tuple(pos)} is outside room {tuple(dims)}")


def sample_room_spec(rng: np.random.Generator | int, num_speakers: int) -> RoomSpec:
    """Draw one room configuration from the Table-1 distributions.

    An integer ``rng`` is treated as a seed, so the result is a pure
    function of ``(seed, num_speakers)``.
    """
    if num_speakers not in SUPPORTED_COUNTS:
        raise ValueError(f"num_speakers must be one of {SUPPORTED_COUNTS}")
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    x, y = rng.uniform(*ROOM_XY_RANGE, size=2)
    t60 = rng.uniform(*T60_RANGE)
    mic = (
        x / 2 + rng.uniform(-MIC_JITTER, MIC_JITTER),
        y / 2 + rng.uniform(-MIC_JITTER, MIC_JITTER),
        MIC_HEIGHT,
    )
    angles = rng.uniform(*ANGLE_RANGE_DEG, size=num_speakers)
    dists = SOURCE_DISTANCE + rng.uniform(-DISTANCE_JITTER, DISTANCE_JITTER, size=num_speakers)
    snr = rng.uniform(*SNR_RANGE_DB)
    return RoomSpec(
        room_dims=(x, y, ROOM_HEIGHT),
        t60_s=float(t60),
        mic_pos=mic,
        source_angles_deg=angles.tolist(),
        source_distances_m=dists.tolist(),
        snr_db=float(snr),
        seed=seed,
    )


def t60_to_absorption(t60_s: float, room_dims) -> tuple[float, bool]:
    """Invert Sabine's formula for a uniform wall absorption coefficient.

    Returns ``(alpha, clamped)``; ``clamped`` is True when the requested
    T60 is unreachable and alpha was limited to 1.
    """
    if t60_s <= 0:
        raise ValueError("t60 must be positive")
    x, y, z = room_dims
    if min(x, y, z) <= 0:
        raise GeometryError("room dimensions must be positive")
    volume = x * y * z
    surface = 2 * (x * y + x * z + y * z)
    alpha = 0.161 * volume / (surface * t60_s)
    if alpha > 1.0:
        return 1.0, True
    return alpha, False


def default_max_order(t60_s: float, room_dims) -> int:
    return min(MAX_ORDER_CAP, math.ceil(SPEED_OF_SOUND * t60_s / min(room_dims)))


def default_rir_len(t60_s: float, fs: int) -> int:
    return math.ceil(t60_s * fs) + KERNEL_WIDTH


@dataclass
class Rir:
    taps: np.ndarray
    direct_delay_samples: int
    sample_rate_hz: int


def _axis_images(src: float, length: float, max_order: int):
    """Image coordinates and wall-hit counts along one axis, up to max_order hits."""
    coords, hits = [], []
    for n in range(-(max_order // 2) - 1, max_order // 2 + 2):
        for u in (0, 1):
            k = abs(n - u) + abs(n)
            if k <= max_order:
                coords.append((1 - 2 * u) * src + 2 * n * length)
                hits.append(k)
    return np.array(coords), np.array(hits)


def simulate_rir(
    room_dims,
    absorption: float,
    source_pos,
    mic_pos,
    fs: int,
    max_order: int,
    rir_len: int,
    c: float = SPEED_OF_SOUND,
) -> Rir:
    """Shoebox image-source RIR with windowed-sinc fractional delays.

    Every wall has reflection coefficient sqrt(1 - absorption). Each image
    contributes beta**hits / (4 pi d) spread over an 81-tap Hann-windowed
    sinc centred on its delay d / c.
    """
    room_dims = np.asarray(room_dims, dtype=float)
    source_pos = np.asarray(source_pos, dtype=float)
    mic_pos = np.asarray(mic_pos, dtype=float)
    check_inside(source_pos, room_dims, "source")
    check_inside(mic_pos, room_dims, "microphone")
    if max_order < 0:
        raise ValueError("max_order must be >= 0")
    if not 0.0 <= absorption <= 1.0:
        raise ValueError("absorption must lie in [0, 1]")

    direct_dist = float(np.linalg.norm(source_pos - mic_pos))
    direct_delay = round(fs * direct_dist / c)
    if rir_len <= direct_delay:
        raise GeometryError(f"rir_len {rir_len} does not reach direct delay {direct_delay}")

    beta = math.sqrt(1.0 - absorption)
    axes = [_axis_images(source_pos[i], room_dims[i], max_order) for i in range(3)]
    gx, gy, gz = np.meshgrid(axes[0][0], axes[1][0], axes[2][0], indexing="ij")
    hx, hy, hz = np.meshgrid(axes[0][1], axes[1][1], axes[2][1], indexing="ij")
    hits = (hx + hy + hz).ravel()
    keep = hits <= max_order
    hits = hits[keep]
    images = np.stack([gx.ravel()[keep], gy.ravel()[keep], gz.ravel()[keep]], axis=1)

    dist = np.linalg.norm(images - mic_pos, axis=1)
    delay = fs * dist / c
    half = KERNEL_WIDTH // 2
    in_range = delay - half < rir_len
    dist, delay, hits = dist[in_range], delay[in_range], hits[in_range]
    amp = beta ** hits / (4.0 * math.pi * dist)

    # Kernel taps sit at integer positions around each delay.
    base = np.floor(delay).astype(np.int64)
    offsets = np.arange(-half, half + 1)
    idx = base[:, None] + offsets[None, :]
    t = idx - delay[:, None]
    window = 0.5 * (1.0 + np.cos(np.pi * t / (half + 1)))
    window[np.abs(t) > half + 1] = 0.0
    contrib = amp[:, None] * np.sinc(t) * window
    valid = (idx >= 0) & (idx < rir_len)
    taps = np.zeros(rir_len)
    np.add.at(taps, idx[valid], contrib[valid])
    return Rir(taps, direct_delay, fs)


def room_rirs(
    room: RoomSpec,
    fs: int,
    max_order: int | None = None,
    rir_len: int | None = None,
) -> tuple[list[Rir], bool]:
    """One RIR per source of ``room``; second item flags a clamped absorption."""
    room.validate()
    alpha, clamped = t60_to_absorption(room.t60_s, room.room_dims)
    if max_order is None:
        max_order = default_max_order(room.t60_s, room.room_dims)
    if rir_len is None:
        rir_len = default_rir_len(room.t60_s, fs)
    rirs = []
    for pos in room.source_positions:
        direct = math.ceil(fs * math.dist(pos, room.mic_pos) / SPEED_OF_SOUND)
        n = max(rir_len, direct + KERNEL_WIDTH)
        rirs.append(simulate_rir(room.room_dims, alpha, pos, room.mic_pos, fs, max_order, n))
    return rirs, clamped


def convolve(signal, rir) -> AudioSignal | np.ndarray:
    """Full linear convolution (length len(signal) + len(rir) - 1)."""
    taps = rir.taps if isinstance(rir, Rir) else np.asarray(rir, dtype=float)
    if isinstance(signal, AudioSignal):
        return AudioSignal(fftconvolve(signal.samples, taps), signal.sample_rate_hz)
    return fftconvolve(np.asarray(signal, dtype=float), taps)


def schroeder_curve_db(taps: np.ndarray) -> np.ndarray:
    """Backward-integrated energy decay curve, normalised to 0 dB at t=0."""
    energy = np.cumsum(np.asarray(taps, dtype=float)[::-1] ** 2)[::-1]
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(energy / energy[0])


def decay_time(taps: np.ndarray, fs: int, level_db: float = -60.0) -> float:
    """Time in seconds at which the Schroeder curve first drops below ``level_db``."""
    edc = schroeder_curve_db(taps)
    below = np.nonzero(edc <= level_db)[0]
    if below.size == 0:
        return len(taps) / fs
    return below[0] / fs
