"""Compact source-only scene classifier used as a frozen probe of adaptation quality.

Anything exposing ``predict_spectrogram(spec) -> (label, probabilities)`` and
``classes`` can stand in for :class:`FrozenClassifier` during evaluation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import SOURCE_DEVICE, RecordingMeta
from .errors import ContractViolation, InvalidInputError
from .features import (
    N_MELS,
    DeltaStats,
    NormalizedSpectrogram,
    denormalize,
    fit_delta_stats,
    stack_deltas,
)
from .nets import read_arrays, write_arrays


@dataclass(frozen=True)
class ClassifierConfig:
    classes: tuple[str, ...]
    segment_frames: int = 11
    channels: int = 16
    n_mels: int = N_MELS
    epochs: int = 25
    crops_per_clip: int = 4
    batch_size: int = 32
    lr: float = 1e-3

    @property
    def n_classes(self) -> int:
        return len(self.classes)


class SceneCNN(nn.Module):
    """Two conv/pool stages over (band, time), mean over time, linear head over bands."""

    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        c = cfg.channels
        self.cfg = cfg
        self.body = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d((2, 1)),
            nn.Conv2d(c, 2 * c, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d((2, 1)),
        )
        self.head = nn.Linear(2 * c * (cfg.n_mels // 4), cfg.n_classes)

    def forward(self, x):
        h = self.body(x).mean(dim=-1)
        return self.head(h.flatten(1))


def _segments(features: np.ndarray, width: int) -> np.ndarray:
    """Non-overlapping ``width``-frame windows, last one edge-padded: ``[n, 3, bands, width]``."""
    n_frames = features.shape[-1]
    n = -(-n_frames // width)
    padded = np.pad(features, ((0, 0), (0, 0), (0, n * width - n_frames)), mode="edge")
    return padded.reshape(3, features.shape[1], n, width).transpose(2, 0, 1, 3)


def split_hash(records: Sequence[RecordingMeta]) -> str:
    ids = "\n".join(sorted(r.recording_id for r in records))
    return hashlib.sha256(ids.encode()).hexdigest()


@dataclass
class FrozenClassifier:
    model: SceneCNN
    delta_stats: DeltaStats
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @property
    def cfg(self) -> ClassifierConfig:
        return self.model.cfg

    @property
    def classes(self) -> tuple[str, ...]:
        return self.cfg.classes

    def features(self, spec: NormalizedSpectrogram) -> np.ndarray:
        return stack_deltas(denormalize(spec), self.delta_stats)

    def predict_spectrogram(self, spec: NormalizedSpectrogram) -> tuple[str, np.ndarray]:
        return predict(self, self.features(spec))

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.model.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def predict(classifier: FrozenClassifier, features: np.ndarray) -> tuple[str, np.ndarray]:
    """Average segment logits over the clip; return (label, class probabilities)."""
    cfg = classifier.cfg
    features = np.asarray(features)
    if features.ndim != 3 or features.shape[:2] != (3, cfg.n_mels) or features.shape[2] < 1:
        raise InvalidInputError(f"expected features [3, {cfg.n_mels}, frames], got {features.shape}")
    segs = torch.as_tensor(_segments(features, cfg.segment_frames), dtype=torch.float32)
    with torch.no_grad():
        logits = classifier.model(segs).mean(dim=0).double()
    probs = torch.softmax(logits, dim=0).numpy()
    return cfg.classes[int(np.argmax(probs))], probs


def train_classifier(
    source_split: Sequence[tuple[RecordingMeta, NormalizedSpectrogram]],
    cfg: ClassifierConfig,
    seed: int,
) -> FrozenClassifier:
    foreign = [m.recording_id for m, _ in source_split if m.device_id != SOURCE_DEVICE]
    if foreign:
        raise ContractViolation(f"classifier must be trained on source-device data only; got {foreign[:3]}")
    if not source_split:
        raise InvalidInputError("empty training split")
    index = {c: i for i, c in enumerate(cfg.classes)}
    logmels = [denormalize(spec) for _, spec in source_split]
    stats = fit_delta_stats(logmels)
    feats = [stack_deltas(lm, stats) for lm in logmels]
    labels = np.array([index[m.scene] for m, _ in source_split])

    rng = np.random.default_rng(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SceneCNN(cfg)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        loss_fn = nn.CrossEntropyLoss()
        width = cfg.segment_frames
        for _ in range(cfg.epochs):
            clips = np.repeat(np.arange(len(feats)), cfg.crops_per_clip)
            rng.shuffle(clips)
            for start in range(0, clips.size, cfg.batch_size):
                batch_idx = clips[start:start + cfg.batch_size]
                crops = []
                for i in batch_idx:
                    f = feats[i]
                    o = int(rng.integers(0, max(1, f.shape[-1] - width + 1)))
                    crops.append(_segments(f[:, :, o:o + width], width)[0])
                x = torch.as_tensor(np.stack(crops), dtype=torch.float32)
                y = torch.as_tensor(labels[batch_idx])
                opt.zero_grad()
                loss_fn(model(x), y).backward()
                opt.step()

    manifest = {
        "source_only": True,
        "training_split_hash": split_hash([m for m, _ in source_split]),
        "n_training_clips": len(source_split),
        "seed": seed,
    }
    return FrozenClassifier(model, stats, manifest)


def save_classifier(path: str | Path, clf: FrozenClassifier) -> str:
    digest = write_arrays(path, clf.model.state_dict())
    sidecar = {
        "kind": "classifier",
        "config": asdict(clf.cfg),
        "delta_stats": clf.delta_stats.to_dict(),
        "manifest": clf.manifest,
        "sha256": digest,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return digest


def load_classifier(path: str | Path) -> FrozenClassifier:
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    if sidecar.get("kind") != "classifier":
        raise InvalidInputError(f"{path}: not a classifier checkpoint")
    if not sidecar.get("manifest", {}).get("source_only"):
        raise ContractViolation(f"{path}: classifier manifest does not certify source-only training")
    cfg_dict = dict(sidecar["config"])
    cfg_dict["classes"] = tuple(cfg_dict["classes"])
    model = SceneCNN(ClassifierConfig(**cfg_dict))
    model.load_state_dict(read_arrays(path))
    return FrozenClassifier(model, DeltaStats.from_dict(sidecar["delta_stats"]), sidecar["manifest"])
