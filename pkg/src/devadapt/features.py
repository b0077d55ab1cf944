"""Log-Mel feature extraction, [-1, 1] scaling, patching and classifier-side deltas."""

from __future__ import annotations

import enum
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.signal
from scipy.io import wavfile

from .errors import ConfigurationError, InvalidInputError

N_MELS = 40
PATCH_FRAMES = 11
LOG_FLOOR = 1e-10
DELTA_WIDTH = 2

FEATURE_MAGIC = b"DAFE"
FEATURE_VERSION = 1


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class ChunkMode(str, enum.Enum):
    TRAIN = "train"
    INFERENCE = "inference"


@dataclass(frozen=True)
class FeatureConfig:
    frame_size: int = 2048
    hop: int = 1024
    window: str = "hann"
    n_mels: int = N_MELS
    f_min: float = 0.0
    f_max: float | None = None  # None -> Nyquist


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInputError("AudioClip expects a mono waveform")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("AudioClip samples must be finite")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise InvalidInputError("AudioClip samples must lie in [-1, 1]")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class LogMelSpectrogram:
    values: np.ndarray  # [n_mels, n_frames], dB
    frame_rate: float = 0.0

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class NormalizedSpectrogram:
    values: np.ndarray  # [n_mels, n_frames], in [-1, 1]
    norm_stats: tuple[float, float]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class FeaturePatch:
    values: np.ndarray  # [n_mels, PATCH_FRAMES]
    domain_tag: Domain
    origin: tuple[str, int]  # (recording id, start frame)


@dataclass(frozen=True)
class DeltaStats:
    """Per-channel (min, max) used to scale classifier features into [0, 1]."""

    minimum: tuple[float, float, float]
    maximum: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"minimum": list(self.minimum), "maximum": list(self.maximum)}

    @classmethod
    def from_dict(cls, d: dict) -> "DeltaStats":
        return cls(tuple(d["minimum"]), tuple(d["maximum"]))


# -- audio I/O ---------------------------------------------------------------


def read_wav(path: str | Path) -> AudioClip:
    """Read a mono PCM-16 or float32 WAV file."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise InvalidInputError(f"{path}: multichannel audio is not supported ({data.shape[1]} channels)")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise InvalidInputError(f"{path}: unsupported sample format {data.dtype}")
    return AudioClip(samples, int(rate))


def write_wav(path: str | Path, clip: AudioClip) -> None:
    wavfile.write(str(path), clip.sample_rate, clip.samples.astype(np.float32))


# -- spectral front end --------------------------------------------------------


def compute_stft(clip: AudioClip, frame_size: int = 2048, hop: int = 1024, window: str = "hann") -> np.ndarray:
    """Centered, reflection-padded STFT.

    Returns a complex array of shape ``[frame_size // 2 + 1, ceil(len / hop)]``.
    """
    if not (frame_size >= hop > 0):
        raise InvalidInputError("need frame_size >= hop > 0")
    x = clip.samples
    if x.size == 0:
        raise InvalidInputError("cannot transform an empty clip")
    if frame_size & (frame_size - 1):
        warnings.warn(f"frame_size={frame_size} is not a power of two; FFT will be slower", stacklevel=2)

    pad = frame_size // 2
    padded = np.pad(x, pad, mode="reflect" if x.size > 1 else "edge")
    n_frames = math.ceil(x.size / hop)
    frames = np.lib.stride_tricks.sliding_window_view(padded, frame_size)[::hop][:n_frames]
    win = scipy.signal.get_window(window, frame_size, fftbins=True)
    return np.fft.rfft(frames * win, axis=1).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    points = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    return points[1:-1]


def make_mel_filterbank(n_fft_bins: int, n_mels: int, sample_rate: int, f_min: float = 0.0, f_max: float | None = None) -> np.ndarray:
    """Triangular Mel filters with unit peak, shape ``[n_mels, n_fft_bins]``."""
    nyquist = sample_rate / 2
    if f_max is None:
        f_max = nyquist
    if not (0 <= f_min < f_max <= nyquist):
        raise ConfigurationError(f"need 0 <= f_min < f_max <= {nyquist}, got ({f_min}, {f_max})")
    if n_mels < 1:
        raise ConfigurationError("n_mels must be >= 1")

    bin_freqs = np.linspace(0.0, nyquist, n_fft_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs - lo) / (center - lo)
    falling = (hi - bin_freqs) / (hi - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))

    empty = np.flatnonzero(~np.any(fb > 0, axis=1))
    if empty.size:
        raise ConfigurationError(
            f"{n_mels} Mel bands are too many for {n_fft_bins} FFT bins: rows {empty.tolist()} are empty"
        )
    return fb


def to_log_mel(power_spectrogram: np.ndarray, filterbank: np.ndarray, frame_rate: float = 0.0) -> LogMelSpectrogram:
    power_spectrogram = np.asarray(power_spectrogram, dtype=np.float64)
    if filterbank.shape[1] != power_spectrogram.shape[0]:
        raise InvalidInputError(
            f"filterbank expects {filterbank.shape[1]} bins, spectrogram has {power_spectrogram.shape[0]}"
        )
    mel = filterbank @ power_spectrogram
    return LogMelSpectrogram(10.0 * np.log10(np.maximum(mel, LOG_FLOOR)), frame_rate)


def log_mel_from_clip(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> LogMelSpectrogram:
    stft = compute_stft(clip, cfg.frame_size, cfg.hop, cfg.window)
    fb = make_mel_filterbank(stft.shape[0], cfg.n_mels, clip.sample_rate, cfg.f_min, cfg.f_max)
    return to_log_mel(np.abs(stft) ** 2, fb, clip.sample_rate / cfg.hop)


# -- scaling -----------------------------------------------------------------


def compute_norm_stats(spectrograms: Iterable[LogMelSpectrogram]) -> tuple[float, float]:
    """Global (min_dB, max_dB) over a pooled set of spectrograms."""
    lo, hi = math.inf, -math.inf
    for spec in spectrograms:
        lo = min(lo, float(spec.values.min()))
        hi = max(hi, float(spec.values.max()))
    if not math.isfinite(lo):
        raise InvalidInputError("no spectrograms to compute statistics from")
    return lo, hi


def normalize(spec: LogMelSpectrogram, stats: tuple[float, float]) -> NormalizedSpectrogram:
    lo, hi = float(stats[0]), float(stats[1])
    if not hi > lo:
        raise ConfigurationError(f"degenerate normalization stats ({lo}, {hi})")
    values = 2.0 * (spec.values - lo) / (hi - lo) - 1.0
    return NormalizedSpectrogram(np.clip(values, -1.0, 1.0), (lo, hi))


def denormalize(spec: NormalizedSpectrogram, frame_rate: float = 0.0) -> LogMelSpectrogram:
    lo, hi = spec.norm_stats
    return LogMelSpectrogram((np.asarray(spec.values, dtype=np.float64) + 1.0) * 0.5 * (hi - lo) + lo, frame_rate)


# -- patching ----------------------------------------------------------------


def _pad_frames(values: np.ndarray) -> np.ndarray:
    remainder = values.shape[1] % PATCH_FRAMES
    if remainder == 0:
        return values
    return np.pad(values, ((0, 0), (0, PATCH_FRAMES - remainder)), mode="edge")


def chunk_array(values: np.ndarray) -> np.ndarray:
    """Non-overlapping 11-frame tiles, ``[n_patches, n_mels, 11]``; last tile edge-padded."""
    if values.shape[1] < PATCH_FRAMES:
        raise InvalidInputError(f"need at least {PATCH_FRAMES} frames, got {values.shape[1]}")
    padded = _pad_frames(values)
    n = padded.shape[1] // PATCH_FRAMES
    return padded.reshape(padded.shape[0], n, PATCH_FRAMES).transpose(1, 0, 2)


def reassemble_array(tiles: np.ndarray, original_frames: int) -> np.ndarray:
    n, bands, width = tiles.shape
    return tiles.transpose(1, 0, 2).reshape(bands, n * width)[:, :original_frames]


def chunk(
    spec: NormalizedSpectrogram,
    mode: ChunkMode | str,
    *,
    recording_id: str = "",
    domain: Domain = Domain.SOURCE,
    rng: np.random.Generator | None = None,
) -> list[FeaturePatch]:
    mode = ChunkMode(mode)
    n_frames = spec.values.shape[1]
    if n_frames < PATCH_FRAMES:
        raise InvalidInputError(f"need at least {PATCH_FRAMES} frames, got {n_frames}")
    if mode is ChunkMode.TRAIN:
        rng = rng if rng is not None else np.random.default_rng()
        start = int(rng.integers(0, n_frames - PATCH_FRAMES + 1))
        return [FeaturePatch(spec.values[:, start:start + PATCH_FRAMES].copy(), domain, (recording_id, start))]
    tiles = chunk_array(spec.values)
    return [FeaturePatch(tile, domain, (recording_id, i * PATCH_FRAMES)) for i, tile in enumerate(tiles)]


def reassemble(
    patches: Sequence[FeaturePatch], original_frames: int, norm_stats: tuple[float, float]
) -> NormalizedSpectrogram:
    if not patches:
        raise InvalidInputError("no patches to reassemble")
    recording = patches[0].origin[0]
    for i, p in enumerate(patches):
        if p.origin[0] != recording:
            raise InvalidInputError(f"patch {i} comes from {p.origin[0]!r}, expected {recording!r}")
        if p.origin[1] != i * PATCH_FRAMES:
            raise InvalidInputError(
                f"patch {i} starts at frame {p.origin[1]}, expected {i * PATCH_FRAMES} (gap or overlap)"
            )
    if not (len(patches) - 1) * PATCH_FRAMES < original_frames <= len(patches) * PATCH_FRAMES:
        raise InvalidInputError(f"{len(patches)} patches cannot cover {original_frames} frames")
    tiles = np.stack([p.values for p in patches])
    return NormalizedSpectrogram(reassemble_array(tiles, original_frames), norm_stats)


# -- classifier features -----------------------------------------------------


def delta(values: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Regression-window temporal derivative along the last axis, edge-replicated."""
    n_frames = values.shape[-1]
    padded = np.pad(values, [(0, 0)] * (values.ndim - 1) + [(width, width)], mode="edge")
    out = np.zeros_like(values, dtype=np.float64)
    for n in range(1, width + 1):
        out += n * (padded[..., width + n:width + n + n_frames] - padded[..., width - n:width - n + n_frames])
    return out / (2 * sum(n * n for n in range(1, width + 1)))


def raw_delta_stack(spec: LogMelSpectrogram) -> np.ndarray:
    if spec.values.shape[1] < 2 * DELTA_WIDTH + 1:
        raise InvalidInputError(f"need at least {2 * DELTA_WIDTH + 1} frames for deltas, got {spec.values.shape[1]}")
    d1 = delta(spec.values)
    return np.stack([spec.values, d1, delta(d1)])


def fit_delta_stats(spectrograms: Iterable[LogMelSpectrogram]) -> DeltaStats:
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for spec in spectrograms:
        stacked = raw_delta_stack(spec)
        lo = np.minimum(lo, stacked.min(axis=(1, 2)))
        hi = np.maximum(hi, stacked.max(axis=(1, 2)))
    if not np.all(np.isfinite(lo)):
        raise InvalidInputError("no spectrograms to fit delta statistics")
    hi = np.where(hi > lo, hi, lo + 1.0)
    return DeltaStats(tuple(lo.tolist()), tuple(hi.tolist()))


def stack_deltas(spec: LogMelSpectrogram, stats: DeltaStats) -> np.ndarray:
    """``[3, n_mels, n_frames]`` log-Mel, delta and delta-delta, each scaled to [0, 1]."""
    stacked = raw_delta_stack(spec)
    lo = np.asarray(stats.minimum)[:, None, None]
    hi = np.asarray(stats.maximum)[:, None, None]
    return np.clip((stacked - lo) / (hi - lo), 0.0, 1.0)


# -- feature files -----------------------------------------------------------

_HEADER = struct.Struct("<4sHII")
_STATS = struct.Struct("<dd")


def write_feature_file(path: str | Path, spec: NormalizedSpectrogram) -> None:
    values = np.ascontiguousarray(spec.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, values.shape[0], values.shape[1]))
        fh.write(values.tobytes(order="C"))
        fh.write(_STATS.pack(*spec.norm_stats))


def read_feature_file(path: str | Path) -> NormalizedSpectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidInputError(f"{path}: truncated feature file")
    magic, version, bands, frames = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise InvalidInputError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise InvalidInputError(f"{path}: unsupported feature format version {version}")
    n_bytes = bands * frames * 4
    if len(raw) != _HEADER.size + n_bytes + _STATS.size:
        raise InvalidInputError(f"{path}: payload size does not match header")
    values = np.frombuffer(raw, dtype="<f4", count=bands * frames, offset=_HEADER.size).reshape(bands, frames)
    stats = _STATS.unpack_from(raw, _HEADER.size + n_bytes)
    return NormalizedSpectrogram(values.astype(np.float64), (stats[0], stats[1]))
