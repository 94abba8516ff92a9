"""Synthetic vibration signals, segmentation, splitting, and set I/O.

The generators stand in for gearbox accelerometer recordings: a healthy
channel is a sum of fixed gear-mesh tones plus Gaussian noise, and a faulty
channel adds a periodic train of exponentially decaying resonance bursts.
Every tone frequency is a multiple of 10 Hz so each completes an integer
number of cycles in the default 0.1 s window (4000 samples at 40 kHz),
which keeps segment means governed by the noise alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError

SENSOR_NAMES = ("AN3", "AN4", "AN5", "AN6", "AN7", "AN8", "AN9", "AN10")

DEFAULT_SEGMENT_LEN = 4000
DEFAULT_SAMPLE_RATE = 40_000.0

#: Per-sensor (frequency Hz, amplitude) tone table.  Frequencies are chosen
#: per mount point: ring-gear mesh tones for AN3/AN4, shaft bands of rising
#: speed for AN5-AN7, bearing bands for AN8/AN9, and the slow carrier band
#: for AN10.  Distinct tables keep the eight channels distinguishable.
SENSOR_TONES: dict[str, tuple[tuple[float, float], ...]] = {
    "AN3": ((320.0, 0.60), (640.0, 0.25), (960.0, 0.10)),
    "AN4": ((320.0, 0.55), (640.0, 0.30), (1280.0, 0.08)),
    "AN5": ((120.0, 0.70), (240.0, 0.20)),
    "AN6": ((480.0, 0.65), (960.0, 0.20)),
    "AN7": ((1440.0, 0.60), (2880.0, 0.15)),
    "AN8": ((1440.0, 0.40), (3200.0, 0.30)),
    "AN9": ((1440.0, 0.35), (3600.0, 0.30)),
    "AN10": ((90.0, 0.75), (180.0, 0.20)),
}

#: Standard deviation of the additive Gaussian noise.
NOISE_SIGMA = 0.3
#: Time constant (s) and carrier frequency (Hz) of a fault burst.
IMPULSE_DECAY_S = 0.002
IMPULSE_RESONANCE_HZ = 2000.0


class HealthState(Enum):
    HEALTHY = "healthy"
    DAMAGED = "damaged"


class Provenance(Enum):
    SYNTHETIC = "synthetic"
    IMPORTED = "imported"


@dataclass(frozen=True)
class Segment:
    """One fixed-length labeled vibration window for one sensor."""

    sensor_id: str
    samples: np.ndarray
    label: HealthState
    segment_index: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        object.__setattr__(self, "samples", samples)
        if not isinstance(self.label, HealthState):
            raise ValueError(f"label must be a HealthState, got {self.label!r}")
        if self.segment_index < 0:
            raise ValueError("segment_index must be nonnegative")

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class SegmentSet:
    """Segments sharing one window length and sample rate."""

    segments: tuple[Segment, ...]
    sample_rate: float
    provenance: Provenance

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        lengths = {len(s) for s in self.segments}
        if len(lengths) > 1:
            raise ValueError(f"segments have mixed lengths {sorted(lengths)}")

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def segment_length(self) -> int:
        if not self.segments:
            raise ValueError("empty segment set has no segment length")
        return len(self.segments[0])


@dataclass(frozen=True)
class SplitRatios:
    """Train/test/dev fractions; must sum to one."""

    train: float = 0.6
    test: float = 0.2
    dev: float = 0.2

    def __post_init__(self):
        for name, value in (("train", self.train), ("test", self.test), ("dev", self.dev)):
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} ratio must lie in (0, 1), got {value}")
        if abs(self.train + self.test + self.dev - 1.0) > 1e-12:
            raise ValueError("ratios must sum to 1")


def _tone_sum(sensor_id: str, n_samples: int, sample_rate: float) -> np.ndarray:
    t = np.arange(n_samples) / sample_rate
    signal = np.zeros(n_samples)
    for freq, amp in SENSOR_TONES[sensor_id]:
        signal += amp * np.sin(2.0 * math.pi * freq * t)
    return signal


def _healthy_signal(rng: np.random.Generator, sensor_id: str, n_samples: int,
                    sample_rate: float) -> np.ndarray:
    return _tone_sum(sensor_id, n_samples, sample_rate) + \
        NOISE_SIGMA * rng.standard_normal(n_samples)


def _check_generation_args(n_segments: int, segment_len: int, sample_rate: float,
                           sensor_id: str) -> None:
    if n_segments < 1:
        raise ValueError(f"n_segments must be at least 1, got {n_segments}")
    if segment_len < 2:
        raise ValueError(f"segment length must be at least 2, got {segment_len}")
    if sample_rate <= 0:
        raise ValueError(f"sample_rate must be positive, got {sample_rate}")
    if sensor_id not in SENSOR_TONES:
        raise ValueError(f"unknown sensor {sensor_id!r}; expected one of {SENSOR_NAMES}")


def generate_healthy(seed: int, n_segments: int, segment_len: int = DEFAULT_SEGMENT_LEN,
                     sample_rate: float = DEFAULT_SAMPLE_RATE,
                     sensor_id: str = "AN3") -> SegmentSet:
    """Deterministic healthy recording for one sensor, cut into segments."""
    _check_generation_args(n_segments, segment_len, sample_rate, sensor_id)
    rng = np.random.default_rng(seed)
    signal = _healthy_signal(rng, sensor_id, n_segments * segment_len, sample_rate)
    windows = segment_signal(signal, segment_len)
    segments = tuple(
        Segment(sensor_id=sensor_id, samples=w, label=HealthState.HEALTHY, segment_index=i)
        for i, w in enumerate(windows))
    return SegmentSet(segments=segments, sample_rate=sample_rate,
                      provenance=Provenance.SYNTHETIC)


def generate_faulty(seed: int, n_segments: int, segment_len: int = DEFAULT_SEGMENT_LEN,
                    sample_rate: float = DEFAULT_SAMPLE_RATE, sensor_id: str = "AN3",
                    impulse_rate: float = 25.0, impulse_gain: float = 5.0) -> SegmentSet:
    """Healthy baseline plus periodic decaying bursts, labeled damaged.

    The burst train is fully deterministic, so ``impulse_gain=0`` reproduces
    the healthy samples for the same seed bit for bit.
    """
    _check_generation_args(n_segments, segment_len, sample_rate, sensor_id)
    if impulse_rate <= 0:
        raise ValueError(f"impulse_rate must be positive, got {impulse_rate}")
    if impulse_gain < 0:
        raise ValueError(f"impulse_gain must be nonnegative, got {impulse_gain}")
    rng = np.random.default_rng(seed)
    n_samples = n_segments * segment_len
    signal = _healthy_signal(rng, sensor_id, n_samples, sample_rate)
    if impulse_gain > 0:
        burst_len = int(8.0 * IMPULSE_DECAY_S * sample_rate)
        tt = np.arange(burst_len) / sample_rate
        burst = impulse_gain * np.exp(-tt / IMPULSE_DECAY_S) * \
            np.sin(2.0 * math.pi * IMPULSE_RESONANCE_HZ * tt)
        duration = n_samples / sample_rate
        k = 0
        while True:
            t_k = (k + 0.5) / impulse_rate
            if t_k >= duration:
                break
            start = int(round(t_k * sample_rate))
            stop = min(start + burst_len, n_samples)
            signal[start:stop] += burst[:stop - start]
            k += 1
    windows = segment_signal(signal, segment_len)
    segments = tuple(
        Segment(sensor_id=sensor_id, samples=w, label=HealthState.DAMAGED, segment_index=i)
        for i, w in enumerate(windows))
    return SegmentSet(segments=segments, sample_rate=sample_rate,
                      provenance=Provenance.SYNTHETIC)


def segment_signal(signal: Sequence[float] | np.ndarray, segment_len: int) -> list[np.ndarray]:
    """Cut a signal into consecutive non-overlapping windows.

    The trailing remainder shorter than ``segment_len`` is discarded.
    """
    if segment_len < 1:
        raise ValueError(f"segment length must be at least 1, got {segment_len}")
    signal = np.asarray(signal, dtype=float)
    n_windows = signal.shape[0] // segment_len
    return [signal[i * segment_len:(i + 1) * segment_len].copy() for i in range(n_windows)]


def split_indices(n: int, ratios: SplitRatios, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seed-deterministic shuffle of range(n) partitioned train/test/dev.

    Sizes are floor(n * train) and floor(n * test); the dev split receives
    the remainder.
    """
    if n < 1:
        raise ValueError("cannot split an empty collection")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(n * ratios.train))
    n_test = int(math.floor(n * ratios.test))
    return perm[:n_train], perm[n_train:n_train + n_test], perm[n_train + n_test:]


def split_dataset(segment_set: SegmentSet, ratios: SplitRatios,
                  seed: int) -> tuple[SegmentSet, SegmentSet, SegmentSet]:
    """Partition a segment set into train/test/dev subsets."""
    if len(segment_set) == 0:
        raise ValueError("cannot split an empty segment set")
    parts = split_indices(len(segment_set), ratios, seed)
    out = []
    for idx in parts:
        subset = tuple(segment_set.segments[i] for i in idx)
        out.append(SegmentSet(segments=subset, sample_rate=segment_set.sample_rate,
                              provenance=segment_set.provenance))
    return out[0], out[1], out[2]


def import_csv(path: str | Path, sensor_id: str, label: HealthState,
               segment_len: int = DEFAULT_SEGMENT_LEN,
               sample_rate: float = DEFAULT_SAMPLE_RATE) -> SegmentSet:
    """Read one real number per line and segment with the default length."""
    path = Path(path)
    text = path.read_text(encoding="ascii")
    values = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        try:
            values.append(float(line.strip()))
        except ValueError:
            raise FormatError(
                f"{path}: line {lineno}: cannot parse {line.strip()!r} as a real number",
                line=lineno) from None
    windows = segment_signal(np.asarray(values), segment_len)
    if not windows:
        raise ValueError(
            f"{path}: only {len(values)} samples, fewer than one segment of {segment_len}")
    segments = tuple(
        Segment(sensor_id=sensor_id, samples=w, label=label, segment_index=i)
        for i, w in enumerate(windows))
    return SegmentSet(segments=segments, sample_rate=sample_rate,
                      provenance=Provenance.IMPORTED)


def save_segment_set(segment_set: SegmentSet, directory: str | Path,
                     seed: int | None = None) -> None:
    """Write a homogeneous set as manifest.json plus one float64 binary.

    The binary holds all segments concatenated in order, little-endian.
    """
    if len(segment_set) == 0:
        raise ValueError("refusing to save an empty segment set")
    sensors = {s.sensor_id for s in segment_set.segments}
    labels = {s.label for s in segment_set.segments}
    if len(sensors) != 1 or len(labels) != 1:
        raise ValueError("directory format requires a single sensor and label per set")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "sensor_id": next(iter(sensors)),
        "sample_rate": segment_set.sample_rate,
        "segment_length": segment_set.segment_length,
        "label": next(iter(labels)).value,
        "provenance": segment_set.provenance.value,
        "seed": seed,
        "n_segments": len(segment_set),
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    data = np.concatenate([s.samples for s in segment_set.segments])
    (directory / "segments.bin").write_bytes(data.astype("<f8").tobytes())


def load_segment_set(directory: str | Path) -> SegmentSet:
    """Inverse of :func:`save_segment_set`."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    raw = np.frombuffer((directory / "segments.bin").read_bytes(), dtype="<f8").copy()
    length = int(manifest["segment_length"])
    count = int(manifest["n_segments"])
    if raw.shape[0] != length * count:
        raise FormatError(
            f"{directory}: expected {length * count} samples, found {raw.shape[0]}")
    label = HealthState(manifest["label"])
    segments = tuple(
        Segment(sensor_id=manifest["sensor_id"], samples=raw[i * length:(i + 1) * length],
                label=label, segment_index=i)
        for i in range(count))
    return SegmentSet(segments=segments, sample_rate=float(manifest["sample_rate"]),
                      provenance=Provenance(manifest["provenance"]))
