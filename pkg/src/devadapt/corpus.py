"""Recording metadata, source/target pairing, location-disjoint splits, batch sampling
and a synthetic paired-device corpus generator."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.signal

from .errors import ConfigurationError, CorpusIntegrityError, InvalidInputError, InvalidModeError, ParseError
from .features import PATCH_FRAMES, AudioClip, Domain, FeaturePatch, NormalizedSpectrogram, write_wav

log = logging.getLogger(__name__)

SCENES = (
    "airport",
    "bus",
    "metro",
    "metro_station",
    "park",
    "public_square",
    "shopping_mall",
    "street_pedestrian",
    "street_traffic",
    "tram",
)
SOURCE_DEVICE = "a"
DEVICES = ("a", "b", "c", "s1", "s2", "s3", "s4", "s5", "s6")
CITIES = ("barcelona", "helsinki", "lisbon", "london", "lyon", "milan", "paris", "prague", "stockholm", "vienna")

_FIELD = re.compile(r"^[a-z0-9_]+$")


class SampleMode(str, enum.Enum):
    PAIRED = "paired"
    UNPAIRED = "unpaired"


@dataclass(frozen=True)
class RecordingMeta:
    scene: str
    city: str
    location_id: int
    segment_id: int
    device_id: str
    path: str = ""

    @property
    def key(self) -> tuple[str, str, int, int]:
        return (self.scene, self.city, self.location_id, self.segment_id)

    @property
    def domain(self) -> Domain:
        return Domain.SOURCE if self.device_id == SOURCE_DEVICE else Domain.TARGET

    @property
    def recording_id(self) -> str:
        return f"{self.scene}-{self.city}-{self.location_id}-{self.segment_id}-{self.device_id}"

    @property
    def filename(self) -> str:
        return self.recording_id + ".wav"


def parse_filename(name: str) -> RecordingMeta:
    """Parse ``<scene>-<city>-<location>-<segment>-<device>.wav``."""
    base = Path(name).name
    if not base.lower().endswith(".wav"):
        raise ParseError(f"{name!r}: expected a .wav extension", "extension")
    parts = base[:-4].split("-")
    names = ("scene", "city", "location", "segment", "device")
    if len(parts) != len(names):
        raise ParseError(f"{name!r}: expected 5 hyphen-separated fields, found {len(parts)}", "name")
    scene, city, location, segment, device = parts
    for value, fname in zip(parts, names):
        if not value:
            raise ParseError(f"{name!r}: empty {fname} field", fname)
    if not _FIELD.match(scene):
        raise ParseError(f"{name!r}: bad scene {scene!r}", "scene")
    if not _FIELD.match(city.lower()):
        raise ParseError(f"{name!r}: bad city {city!r}", "city")
    for value, fname in ((location, "location"), (segment, "segment")):
        if not value.isdigit():
            raise ParseError(f"{name!r}: {fname} must be a non-negative integer, got {value!r}", fname)
    device = device.lower()
    if device not in DEVICES:
        raise ParseError(f"{name!r}: unknown device {device!r}", "device")
    return RecordingMeta(scene, city, int(location), int(segment), device, str(name))


def scan_corpus(root: str | Path) -> list[RecordingMeta]:
    """Collect every parseable WAV below ``root`` (TAU-style ``audio/`` layouts included)."""
    root = Path(root)
    records = []
    for p in sorted(root.rglob("*.wav")):
        meta = parse_filename(p.name)
        records.append(RecordingMeta(meta.scene, meta.city, meta.location_id, meta.segment_id, meta.device_id,
                                     str(p.relative_to(root))))
    return records


# -- pairing -----------------------------------------------------------------


@dataclass
class PairedIndex:
    pairs: list[tuple[RecordingMeta, RecordingMeta]]
    unpaired_source: list[RecordingMeta]
    unpaired_target: list[RecordingMeta] = field(default_factory=list)

    def sources(self) -> list[RecordingMeta]:
        seen = {}
        for s, _ in self.pairs:
            seen.setdefault(s.recording_id, s)
        for s in self.unpaired_source:
            seen.setdefault(s.recording_id, s)
        return list(seen.values())

    def targets(self) -> list[RecordingMeta]:
        return [t for _, t in self.pairs] + list(self.unpaired_target)


def build_paired_index(corpus: Iterable[RecordingMeta]) -> PairedIndex:
    corpus = list(corpus)
    if not corpus:
        raise InvalidInputError("corpus is empty")
    sources: dict[tuple, RecordingMeta] = {}
    seen: set[tuple] = set()
    for r in corpus:
        full_key = r.key + (r.device_id,)
        if full_key in seen:
            raise CorpusIntegrityError(f"duplicate recording {r.recording_id}")
        seen.add(full_key)
        if r.device_id == SOURCE_DEVICE:
            sources[r.key] = r

    pairs, orphans, matched = [], [], set()
    for r in corpus:
        if r.device_id == SOURCE_DEVICE:
            continue
        src = sources.get(r.key)
        if src is None:
            orphans.append(r)
            continue
        pairs.append((src, r))
        matched.add(r.key)
    if orphans:
        log.warning("%d target recordings have no source-device match and are excluded from pairs", len(orphans))
    unpaired = [s for k, s in sources.items() if k not in matched]
    return PairedIndex(pairs, unpaired, orphans)


# -- splits ------------------------------------------------------------------


@dataclass
class SplitSpec:
    train: list[RecordingMeta]
    validation: list[RecordingMeta]
    test: list[RecordingMeta]

    def devices(self, name: str) -> set[str]:
        return {r.device_id for r in getattr(self, name)}

    def inventory(self) -> dict[str, dict[str, int]]:
        out = {}
        for name in ("train", "validation", "test"):
            counts: dict[str, int] = {}
            for r in getattr(self, name):
                counts[r.device_id] = counts.get(r.device_id, 0) + 1
            out[name] = dict(sorted(counts.items()))
        return out

    def split_of(self) -> dict[str, str]:
        return {r.recording_id: name for name in ("train", "validation", "test") for r in getattr(self, name)}


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [f * n for f in fractions]
    counts = [math.floor(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_by_location(
    corpus: Iterable[RecordingMeta],
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    holdout_devices: Iterable[str] = ("s5", "s6"),
    seed: int = 0,
) -> SplitSpec:
    corpus = list(corpus)
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    holdout = set(holdout_devices)
    present = {r.device_id for r in corpus}
    missing = holdout - present
    if missing:
        raise ConfigurationError(f"holdout devices {sorted(missing)} do not occur in the corpus")

    locations = sorted({r.location_id for r in corpus})
    perm = np.random.default_rng(seed).permutation(len(locations))
    n_train, n_val, _ = _allocate(len(locations), fractions)
    assignment = {}
    for rank, idx in enumerate(perm):
        assignment[locations[idx]] = 0 if rank < n_train else 1 if rank < n_train + n_val else 2

    buckets: list[list[RecordingMeta]] = [[], [], []]
    for r in corpus:
        which = assignment[r.location_id]
        if which < 2 and r.device_id in holdout:
            continue
        buckets[which].append(r)
    for name, bucket in zip(("train", "validation", "test"), buckets):
        if not bucket:
            raise ConfigurationError(f"split {name!r} is empty")
    absent = holdout - {r.device_id for r in buckets[2]}
    if absent:
        log.warning("holdout devices %s have no test recordings under this split", sorted(absent))
    return SplitSpec(*buckets)


# -- sampling ----------------------------------------------------------------


def _crop(spec: NormalizedSpectrogram, start: int) -> np.ndarray:
    return spec.values[:, start:start + PATCH_FRAMES]


def sample_batch(
    index: PairedIndex,
    features: Mapping[str, NormalizedSpectrogram],
    mode: SampleMode | str,
    batch_size: int,
    rng: np.random.Generator,
) -> list[tuple[FeaturePatch, FeaturePatch]]:
    """Draw ``batch_size`` (source, target) patch pairs.

    PAIRED pairs are cut from the same recording key at the same frame offset;
    UNPAIRED pairs are independent draws that share only the scene label.
    """
    mode = SampleMode(mode)
    if batch_size < 1:
        raise InvalidInputError("batch_size must be >= 1")
    out = []
    if mode is SampleMode.PAIRED:
        if not index.pairs:
            raise InvalidModeError("PAIRED sampling requested on an index with zero pairs")
        for i in rng.integers(0, len(index.pairs), size=batch_size):
            src, tgt = index.pairs[i]
            s_spec, t_spec = features[src.recording_id], features[tgt.recording_id]
            n = min(s_spec.n_frames, t_spec.n_frames)
            start = int(rng.integers(0, n - PATCH_FRAMES + 1))
            out.append((
                FeaturePatch(_crop(s_spec, start), Domain.SOURCE, (src.recording_id, start)),
                FeaturePatch(_crop(t_spec, start), Domain.TARGET, (tgt.recording_id, start)),
            ))
        return out

    by_scene: dict[str, list[RecordingMeta]] = {}
    for s in index.sources():
        by_scene.setdefault(s.scene, []).append(s)
    targets = [t for t in index.targets() if t.scene in by_scene]
    if not targets:
        raise InvalidModeError("UNPAIRED sampling needs at least one target with a scene-matched source")
    for i in rng.integers(0, len(targets), size=batch_size):
        tgt = targets[i]
        pool = by_scene[tgt.scene]
        src = pool[int(rng.integers(0, len(pool)))]
        s_spec, t_spec = features[src.recording_id], features[tgt.recording_id]
        s0 = int(rng.integers(0, s_spec.n_frames - PATCH_FRAMES + 1))
        t0 = int(rng.integers(0, t_spec.n_frames - PATCH_FRAMES + 1))
        out.append((
            FeaturePatch(_crop(s_spec, s0), Domain.SOURCE, (src.recording_id, s0)),
            FeaturePatch(_crop(t_spec, t0), Domain.TARGET, (tgt.recording_id, t0)),
        ))
    return out


def epoch_size(index: PairedIndex, mode: SampleMode | str) -> int:
    """Number of samples that make up one training epoch for ``mode``."""
    if SampleMode(mode) is SampleMode.PAIRED:
        return len(index.pairs)
    return min(len(index.sources()), len(index.targets()))


# -- manifest ----------------------------------------------------------------

MANIFEST_COLUMNS = ("path", "scene", "city", "location_id", "segment_id", "device_id", "split")


def write_manifest(path: str | Path, records: Iterable[RecordingMeta], splits: Mapping[str, str] | None = None) -> None:
    splits = splits or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in records:
            w.writerow([r.path, r.scene, r.city, r.location_id, r.segment_id, r.device_id,
                        splits.get(r.recording_id, "")])


def read_manifest(path: str | Path) -> list[tuple[RecordingMeta, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise CorpusIntegrityError(f"{path}: expected columns {','.join(MANIFEST_COLUMNS)}")
        return [
            (RecordingMeta(row["scene"], row["city"], int(row["location_id"]), int(row["segment_id"]),
                           row["device_id"], row["path"]), row["split"])
            for row in reader
        ]


def split_from_manifest(rows: Iterable[tuple[RecordingMeta, str]]) -> SplitSpec:
    buckets: dict[str, list[RecordingMeta]] = {"train": [], "validation": [], "test": []}
    for meta, split in rows:
        if split in buckets:
            buckets[split].append(meta)
    return SplitSpec(buckets["train"], buckets["validation"], buckets["test"])


# -- device simulation -------------------------------------------------------


@dataclass
class DeviceSimSpec:
    device_id: str
    impulse_response: list[float]
    threshold_db: float = 0.0
    ratio: float = 1.0
    attack_ms: float = 5.0
    release_ms: float = 50.0
    gain_db: float = 0.0
    noise_floor_db: float | None = None

    def __post_init__(self):
        self.impulse_response = [float(c) for c in self.impulse_response]
        self.validate()

    def validate(self) -> None:
        if self.device_id not in DEVICES or self.device_id == SOURCE_DEVICE:
            raise ConfigurationError(f"device_id: {self.device_id!r} is not a target device name")
        if len(self.impulse_response) < 1:
            raise ConfigurationError("impulse_response: FIR must have at least one coefficient")
        if not all(math.isfinite(c) for c in self.impulse_response):
            raise ConfigurationError("impulse_response: coefficients must be finite")
        if not self.ratio >= 1.0:
            raise ConfigurationError(f"ratio: must be >= 1, got {self.ratio}")
        if not self.threshold_db <= 0.0:
            raise ConfigurationError(f"threshold_db: must be <= 0 dB, got {self.threshold_db}")
        if self.attack_ms <= 0 or self.release_ms <= 0:
            raise ConfigurationError("attack_ms/release_ms: must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DeviceSimSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown device spec fields: {sorted(unknown)}")
        return cls(**d)


def identity_device(device_id: str = "b") -> DeviceSimSpec:
    return DeviceSimSpec(device_id, [1.0])


def eq_fir(sample_rate: int, points: Sequence[tuple[float, float]], taps: int = 63) -> np.ndarray:
    """Linear-phase FIR through ``(frequency_hz, gain_db)`` points, flat beyond the end points."""
    nyq = sample_rate / 2
    freqs = [0.0] + [f / nyq for f, _ in points] + [1.0]
    gains_db = [points[0][1]] + [g for _, g in points] + [points[-1][1]]
    return scipy.signal.firwin2(taps, freqs, 10 ** (np.asarray(gains_db) / 20))


def default_device_specs(sample_rate: int = 22050) -> list[DeviceSimSpec]:
    """Two simulated target devices: a mid-boosted, high-cut channel and a bass-shy, bright one."""
    return [
        DeviceSimSpec("b", eq_fir(sample_rate, [(300, -2), (1000, 4), (3500, -6), (6000, -3)]).tolist(),
                      threshold_db=-28.0, ratio=2.0, gain_db=-4.0, noise_floor_db=-70.0),
        DeviceSimSpec("s1", eq_fir(sample_rate, [(250, -10), (600, -4), (2500, 0), (5000, 4)]).tolist(),
                      threshold_db=-30.0, ratio=3.0, gain_db=2.0, noise_floor_db=-65.0),
    ]


def load_device_specs(path: str | Path) -> list[DeviceSimSpec]:
    doc = json.loads(Path(path).read_text())
    entries = doc["devices"] if isinstance(doc, dict) else doc
    return [DeviceSimSpec.from_dict(e) for e in entries]


def dump_device_specs(path: str | Path, specs: Sequence[DeviceSimSpec]) -> None:
    Path(path).write_text(json.dumps({"devices": [s.to_dict() for s in specs]}, indent=2))


def compress(x: np.ndarray, sample_rate: int, threshold_db: float, ratio: float,
             attack_ms: float, release_ms: float, block_ms: float = 5.0) -> np.ndarray:
    """Feed-forward compressor on a block-RMS envelope with attack/release smoothing."""
    if ratio == 1.0:
        return x.copy()
    block = max(1, int(round(sample_rate * block_ms / 1000)))
    n_blocks = math.ceil(x.size / block)
    padded = np.pad(x, (0, n_blocks * block - x.size))
    rms = np.sqrt(np.mean(padded.reshape(n_blocks, block) ** 2, axis=1) + 1e-12)
    level = 20 * np.log10(rms)
    a_att = math.exp(-block_ms / attack_ms)
    a_rel = math.exp(-block_ms / release_ms)
    env = np.empty_like(level)
    state = level[0]
    for i, lv in enumerate(level):
        coef = a_att if lv > state else a_rel
        state = coef * state + (1 - coef) * lv
        env[i] = state
    reduction_db = np.where(env > threshold_db, (env - threshold_db) * (1 - 1 / ratio), 0.0)
    centers = (np.arange(n_blocks) + 0.5) * block
    gain_db = np.interp(np.arange(x.size), centers, -reduction_db)
    return x * 10 ** (gain_db / 20)


def apply_device(x: np.ndarray, spec: DeviceSimSpec, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    y = np.convolve(x, np.asarray(spec.impulse_response))[: x.size]
    y = compress(y, sample_rate, spec.threshold_db, spec.ratio, spec.attack_ms, spec.release_ms)
    y = y * 10 ** (spec.gain_db / 20)
    if spec.noise_floor_db is not None:
        y = y + rng.standard_normal(x.size) * 10 ** (spec.noise_floor_db / 20)
    return np.clip(y, -1.0, 1.0)


@dataclass(frozen=True)
class SceneProfile:
    slope_db_per_octave: float
    tones: tuple[tuple[float, float], ...]  # (frequency Hz, level dB relative to the noise)
    modulation_hz: float


def scene_profile(k: int, n_scenes: int) -> SceneProfile:
    # tilts sit close together so that moderate device colouring already confuses a source-only classifier
    slopes = np.linspace(-4.0, -2.0, n_scenes) if n_scenes > 1 else np.array([-3.0])
    n_tones = 1 + k % 3
    base = 220.0 * 2 ** (k / max(n_scenes, 1) * 2)
    tones = tuple((float(base * (1.5 ** j)), -12.0 - 3 * j) for j in range(n_tones))
    return SceneProfile(float(slopes[k]), tones, 0.5 + 0.3 * k)


def synth_scene_clip(profile: SceneProfile, n_samples: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    slope = profile.slope_db_per_octave + rng.uniform(-0.5, 0.5)
    freqs = np.fft.rfftfreq(n_samples, 1 / sample_rate)
    shape_db = slope * np.log2(np.maximum(freqs, 50.0) / 1000.0)
    spectrum = np.fft.rfft(rng.standard_normal(n_samples)) * 10 ** (shape_db / 20)
    noise = np.fft.irfft(spectrum, n=n_samples)
    noise /= np.sqrt(np.mean(noise ** 2))

    t = np.arange(n_samples) / sample_rate
    signal = noise
    for f, level_db in profile.tones:
        amp = 10 ** ((level_db + rng.uniform(-2, 2)) / 20) * math.sqrt(2)
        signal = signal + amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    signal = signal * (1 + 0.3 * np.sin(2 * np.pi * profile.modulation_hz * t + rng.uniform(0, 2 * np.pi)))
    level_db = -24.0 + rng.uniform(-3, 3)
    signal *= 10 ** (level_db / 20) / np.sqrt(np.mean(signal ** 2))
    return np.clip(signal, -1.0, 1.0)


def synth_generate(
    specs: Sequence[DeviceSimSpec],
    scenes: int,
    clips_per_scene: int,
    clip_seconds: float,
    sample_rate: int,
    seed: int,
    out_dir: str | Path,
    clips_per_location: int = 4,
) -> list[RecordingMeta]:
    """Write a paired synthetic corpus under ``out_dir/audio`` and return its metadata."""
    if scenes < 2 or scenes > len(SCENES):
        raise ConfigurationError(f"scenes must be in [2, {len(SCENES)}], got {scenes}")
    if not specs:
        raise ConfigurationError("at least one device spec is required")
    if len({s.device_id for s in specs}) != len(specs):
        raise ConfigurationError("device ids must be unique")
    out = Path(out_dir)
    audio = out / "audio"
    try:
        audio.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {audio}: {exc}") from exc

    n_samples = int(round(clip_seconds * sample_rate))
    records = []
    for k in range(scenes):
        scene = SCENES[k]
        profile = scene_profile(k, scenes)
        for c in range(clips_per_scene):
            loc = c // clips_per_location
            base = RecordingMeta(scene, CITIES[loc % len(CITIES)], k * 1000 + loc, c, SOURCE_DEVICE)
            raw = synth_scene_clip(profile, n_samples, sample_rate, np.random.default_rng([seed, k, c]))
            clips = [(SOURCE_DEVICE, raw)]
            for d, spec in enumerate(specs):
                rng = np.random.default_rng([seed, k, c, d + 1])
                clips.append((spec.device_id, apply_device(raw, spec, sample_rate, rng)))
            for device, samples in clips:
                meta = RecordingMeta(base.scene, base.city, base.location_id, base.segment_id, device)
                write_wav(audio / meta.filename, AudioClip(samples, sample_rate))
                records.append(RecordingMeta(meta.scene, meta.city, meta.location_id, meta.segment_id, device,
                                             f"audio/{meta.filename}"))
    return records
