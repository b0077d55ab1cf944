"""Corpus-to-feature-store plumbing and the desk-scale experiment shared by the CLI and tests."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .asc import ClassifierConfig, train_classifier
from .corpus import (
    SCENES,
    SOURCE_DEVICE,
    RecordingMeta,
    SplitSpec,
    build_paired_index,
    default_device_specs,
    read_manifest,
    split_by_location,
    split_from_manifest,
    synth_generate,
    write_manifest,
)
from .evaluation import EvaluationReport, evaluate
from .features import (
    FeatureConfig,
    LogMelSpectrogram,
    NormalizedSpectrogram,
    compute_norm_stats,
    log_mel_from_clip,
    normalize,
    read_feature_file,
    read_wav,
    write_feature_file,
)
from .trainer import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

MANIFEST = "manifest.csv"
NORM_STATS = "norm_stats.json"


@dataclass
class FeatureStore:
    root: Path
    rows: list[tuple[RecordingMeta, str]]
    features: dict[str, NormalizedSpectrogram]
    norm_stats: tuple[float, float]
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def split(self) -> SplitSpec:
        return split_from_manifest((m, s) for m, s in self.rows if m.recording_id in self.features)

    def items(self, records) -> list[tuple[RecordingMeta, NormalizedSpectrogram]]:
        return [(m, self.features[m.recording_id]) for m in records if m.recording_id in self.features]


def extract_features(corpus_dir: str | Path, out_dir: str | Path, cfg: FeatureConfig = FeatureConfig()) -> FeatureStore:
    """Compute one ``.dafe`` file per clip, scaled with statistics pooled over the train split.

    Unreadable clips are recorded in ``errors.json`` and skipped.
    """
    corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
    rows = read_manifest(corpus_dir / MANIFEST)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)

    logmels: dict[str, LogMelSpectrogram] = {}
    errors: dict[str, str] = {}
    for meta, _ in rows:
        try:
            logmels[meta.recording_id] = log_mel_from_clip(read_wav(corpus_dir / meta.path), cfg)
        except Exception as exc:  # noqa: BLE001 - one bad file must not stop the run
            log.error("%s: %s", meta.path, exc)
            errors[meta.path] = f"{type(exc).__name__}: {exc}"

    train_ids = [m.recording_id for m, s in rows if s == "train" and m.recording_id in logmels]
    if not train_ids:
        raise ValueError("no readable train-split clips to compute normalization statistics from")
    stats = compute_norm_stats(logmels[i] for i in train_ids)

    features = {}
    for rid, lm in logmels.items():
        spec = normalize(lm, stats)
        write_feature_file(out_dir / "features" / f"{rid}.dafe", spec)
        # keep exactly what a later load would see (float32 payload)
        features[rid] = NormalizedSpectrogram(spec.values.astype("float32").astype("float64"), stats)
    kept = [(replace(m, path=f"features/{m.recording_id}.dafe"), s) for m, s in rows if m.recording_id in features]
    write_manifest(out_dir / MANIFEST, [m for m, _ in kept], {m.recording_id: s for m, s in kept})
    (out_dir / NORM_STATS).write_text(json.dumps({"min_db": stats[0], "max_db": stats[1],
                                                  "feature_config": asdict(cfg)}, indent=2))
    (out_dir / "errors.json").write_text(json.dumps(errors, indent=2, sort_keys=True))
    return FeatureStore(out_dir, kept, features, stats, errors)


def load_feature_store(root: str | Path) -> FeatureStore:
    root = Path(root)
    rows = read_manifest(root / MANIFEST)
    features = {m.recording_id: read_feature_file(root / m.path) for m, _ in rows}
    doc = json.loads((root / NORM_STATS).read_text())
    errors_path = root / "errors.json"
    errors = json.loads(errors_path.read_text()) if errors_path.exists() else {}
    return FeatureStore(root, rows, features, (doc["min_db"], doc["max_db"]), errors)


# -- desk-scale experiment -------------------------------------------------------


@dataclass(frozen=True)
class DeskCorpusConfig:
    scenes: int = 2
    clips_per_scene: int = 40
    clip_seconds: float = 3.0
    sample_rate: int = 22050
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0


def build_desk_corpus(corpus_dir: str | Path, cfg: DeskCorpusConfig = DeskCorpusConfig(),
                      specs=None) -> list[RecordingMeta]:
    """Synthesize a source + simulated-device corpus and write its split manifest."""
    corpus_dir = Path(corpus_dir)
    specs = default_device_specs(cfg.sample_rate) if specs is None else specs
    records = synth_generate(specs, cfg.scenes, cfg.clips_per_scene, cfg.clip_seconds, cfg.sample_rate,
                             cfg.seed, corpus_dir)
    holdout = [d for d in ("s5", "s6") if d in {s.device_id for s in specs}]
    split = split_by_location(records, cfg.fractions, holdout, seed=cfg.seed)
    write_manifest(corpus_dir / MANIFEST, records, split.split_of())
    return records


def source_items(store: FeatureStore, records) -> list[tuple[RecordingMeta, NormalizedSpectrogram]]:
    return [(m, s) for m, s in store.items(records) if m.device_id == SOURCE_DEVICE]


def train_source_classifier(store: FeatureStore, seed: int = 0, **overrides):
    split = store.split
    classes = tuple(sorted({m.scene for m in split.train}, key=SCENES.index))
    return train_classifier(source_items(store, split.train), ClassifierConfig(classes=classes, **overrides), seed)


@dataclass
class AdaptationRun:
    na: EvaluationReport
    da: EvaluationReport
    result: TrainResult
    seconds: float

    @property
    def lsd_ratio(self) -> float:
        return self.da.lsd_target / self.na.lsd_target


def run_adaptation(store: FeatureStore, classifier, cfg: TrainConfig, run_dir: str | Path | None = None,
                   holdout_devices=("s5", "s6")) -> AdaptationRun:
    """Train one adapter on the train split and evaluate it and the NA baseline on the test split."""
    start = time.perf_counter()
    split = store.split
    result = train(cfg, build_paired_index(split.train), store.features, classifier,
                   store.items(split.validation), run_dir=run_dir)
    test = store.items(split.test)
    na = evaluate(classifier, None, test, store.features, holdout_devices, "NA")
    da = evaluate(classifier, result.generator, test, store.features, holdout_devices, cfg.preset).with_relative(na)
    return AdaptationRun(na, da, result, time.perf_counter() - start)
