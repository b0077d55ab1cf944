"""Adapter evaluation: per-device-group accuracy, log-spectral distance, relative
changes, reporting tables and the two diagnostic figures."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .corpus import SOURCE_DEVICE, RecordingMeta  # noqa: E402
from .errors import InvalidInputError  # noqa: E402
from .features import NormalizedSpectrogram, chunk_array, denormalize, reassemble_array  # noqa: E402

# Reference rows from the published experiments (real dataset, full ResNet classifier).
# Used for report layout and arithmetic checks only; not reproducible at desk scale.
REFERENCE_ACCURACY = {
    "NA": (74.89, 25.06, 15.55),
    "Generator": (70.04, 19.23, 19.87),
    "GAN_id": (75.33, 25.88, 15.76),
    "GAN_id_tr": (63.00, 40.19, 28.51),
    "GAN_id_all": (75.33, 25.39, 16.84),
    "CycleGAN": (70.48, 41.56, 24.62),
    "CycleGAN_all": (70.04, 39.87, 27.00),
}
REFERENCE_LSD = {
    "NA": (0.000, 1.399, 1.668),
    "Generator": (0.073, 0.723, 1.188),
    "GAN_id": (0.055, 1.375, 1.640),
    "GAN_id_tr": (0.120, 0.766, 1.216),
    "GAN_id_all": (0.054, 1.387, 1.650),
    "CycleGAN": (0.082, 0.813, 1.138),
    "CycleGAN_all": (0.081, 0.790, 1.062),
}

ACCURACY_COLUMNS = ("DA method", "Accuracy [%] (source)", "Accuracy [%] (target)", "Accuracy [%] (new devices)")
LSD_COLUMNS = ("DA method", "LSD [dB] (source)", "LSD [dB] (target)", "LSD [dB] (new devices)")
GROUPS = ("source", "target", "new_devices")


def _values(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, NormalizedSpectrogram) else x, dtype=np.float64)


def adapt_array(g, values: np.ndarray) -> np.ndarray:
    tiles = torch.as_tensor(chunk_array(values), dtype=next(g.parameters()).dtype)
    with torch.no_grad():
        out = g(tiles).double().numpy()
    return reassemble_array(out, values.shape[1])


def adapt_clip(g, spec: NormalizedSpectrogram) -> NormalizedSpectrogram:
    """Tile the clip into patches, map each through ``g`` and stitch it back together."""
    return NormalizedSpectrogram(adapt_array(g, spec.values), spec.norm_stats)


def lsd(a, b) -> float:
    """Mean over frames of the RMS difference across bands."""
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.sqrt(np.mean((a - b) ** 2, axis=0))))


def lsd_raw_db(a: NormalizedSpectrogram, b: NormalizedSpectrogram) -> float:
    return lsd(denormalize(a).values, denormalize(b).values)


def relative_change(baseline: float | None, value: float | None) -> float | None:
    if baseline is None or value is None or baseline == 0:
        return None
    return 100.0 * (value - baseline) / baseline


def relative_metrics(report_na, report_da) -> tuple[float | None, float | None]:
    """(relative target gain %, relative source drop %); ``None`` where the baseline is zero or absent."""
    gain = relative_change(report_na.accuracy_target, report_da.accuracy_target)
    drop = relative_change(report_na.accuracy_source, report_da.accuracy_source)
    return gain, (None if drop is None else -drop)


@dataclass
class EvaluationReport:
    method: str
    accuracy_source: float | None = None
    accuracy_target: float | None = None
    accuracy_new_devices: float | None = None
    lsd_source: float | None = None
    lsd_target: float | None = None
    lsd_new_devices: float | None = None
    lsd_raw_db_source: float | None = None
    lsd_raw_db_target: float | None = None
    lsd_raw_db_new_devices: float | None = None
    relative_target_gain: float | None = None
    relative_source_drop: float | None = None
    counts: dict[str, int] = field(default_factory=dict)
    per_device: dict[str, dict] = field(default_factory=dict)

    def with_relative(self, baseline: "EvaluationReport") -> "EvaluationReport":
        self.relative_target_gain, self.relative_source_drop = relative_metrics(baseline, self)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvaluationReport":
        return cls(**d)


def device_groups(meta: RecordingMeta, holdout_devices: Iterable[str]) -> list[str]:
    """Groups a clip counts toward; new-device clips are a subset view of target."""
    if meta.device_id == SOURCE_DEVICE:
        return ["source"]
    return ["target", "new_devices"] if meta.device_id in set(holdout_devices) else ["target"]


def _paired_source_id(meta: RecordingMeta) -> str:
    return f"{meta.scene}-{meta.city}-{meta.location_id}-{meta.segment_id}-{SOURCE_DEVICE}"


def _maybe_adapt(adapter, spec: NormalizedSpectrogram) -> NormalizedSpectrogram:
    return spec if adapter is None else adapt_clip(adapter, spec)


def _mean_or_none(xs: list[float]) -> float | None:
    return float(np.mean(xs)) if xs else None


def overall_accuracy(classifier, adapter, split: Sequence[tuple[RecordingMeta, NormalizedSpectrogram]]) -> float:
    """Percentage of clips whose (adapted) features are classified as their scene."""
    if not split:
        raise InvalidInputError("empty split")
    hits = [classifier.predict_spectrogram(_maybe_adapt(adapter, spec))[0] == meta.scene for meta, spec in split]
    return 100.0 * float(np.mean(hits))


def accuracy_by_group(classifier, adapter, test_split: Sequence[tuple[RecordingMeta, NormalizedSpectrogram]],
                      holdout_devices: Iterable[str] = ("s5", "s6"), method: str = "NA") -> EvaluationReport:
    holdout = set(holdout_devices)
    hits: dict[str, list[float]] = {g: [] for g in GROUPS}
    per_device: dict[str, list[float]] = {}
    for meta, spec in test_split:
        label, _ = classifier.predict_spectrogram(_maybe_adapt(adapter, spec))
        ok = float(label == meta.scene)
        for g in device_groups(meta, holdout):
            hits[g].append(ok)
        per_device.setdefault(meta.device_id, []).append(ok)
    report = EvaluationReport(method)
    for g in GROUPS:
        setattr(report, f"accuracy_{g}", None if not hits[g] else 100.0 * float(np.mean(hits[g])))
    report.counts = {g: len(hits[g]) for g in GROUPS}
    report.per_device = {d: {"n": len(v), "accuracy": 100.0 * float(np.mean(v))} for d, v in sorted(per_device.items())}
    return report


def lsd_by_group(adapter, test_split: Sequence[tuple[RecordingMeta, NormalizedSpectrogram]],
                 features: Mapping[str, NormalizedSpectrogram], holdout_devices: Iterable[str] = ("s5", "s6"),
                 report: EvaluationReport | None = None) -> EvaluationReport:
    """Distance between each (adapted) clip and its paired source-device clip."""
    holdout = set(holdout_devices)
    report = report or EvaluationReport("NA")
    scaled: dict[str, list[float]] = {g: [] for g in GROUPS}
    raw: dict[str, list[float]] = {g: [] for g in GROUPS}
    per_device: dict[str, list[float]] = {}
    for meta, spec in test_split:
        ref = features.get(_paired_source_id(meta))
        if ref is None:
            continue
        adapted = _maybe_adapt(adapter, spec)
        d = lsd(adapted, ref)
        for g in device_groups(meta, holdout):
            scaled[g].append(d)
            raw[g].append(lsd_raw_db(adapted, ref))
        per_device.setdefault(meta.device_id, []).append(d)
    for g in GROUPS:
        setattr(report, f"lsd_{g}", _mean_or_none(scaled[g]))
        setattr(report, f"lsd_raw_db_{g}", _mean_or_none(raw[g]))
    for dev, v in per_device.items():
        report.per_device.setdefault(dev, {"n": len(v)})["lsd"] = float(np.mean(v))
    return report


def evaluate(classifier, adapter, test_split, features, holdout_devices=("s5", "s6"), method="NA") -> EvaluationReport:
    report = accuracy_by_group(classifier, adapter, test_split, holdout_devices, method)
    return lsd_by_group(adapter, test_split, features, holdout_devices, report)


# -- serialization -------------------------------------------------------------


def _fmt(x: float | None, digits: int) -> str:
    return "" if x is None else f"{x:.{digits}f}"


def write_reports(out_dir: str | Path, reports: Sequence[EvaluationReport]) -> dict[str, Path]:
    """Write ``report.json``, ``accuracy.csv`` and ``lsd.csv`` into ``out``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "accuracy": out / "accuracy.csv", "lsd": out / "lsd.csv"}
    paths["json"].write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
    for key, cols, prefix, digits in (("accuracy", ACCURACY_COLUMNS, "accuracy", 2), ("lsd", LSD_COLUMNS, "lsd", 3)):
        with open(paths[key], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in reports:
                w.writerow([r.method] + [_fmt(getattr(r, f"{prefix}_{g}"), digits) for g in GROUPS])
    return paths


def read_reports(path: str | Path) -> list[EvaluationReport]:
    return [EvaluationReport.from_dict(d) for d in json.loads(Path(path).read_text())]


# -- figures -------------------------------------------------------------------

_PNG_META = {"Software": None}


def emit_spectrogram_figure(source: NormalizedSpectrogram, target: NormalizedSpectrogram,
                            adapters: Mapping[str, object], path: str | Path, dpi: int = 100) -> int:
    """Stacked panels: source, target, then each adapter's output. Returns the panel count."""
    panels = [("source", source.values), ("target", target.values)]
    panels += [(name, adapt_clip(g, target).values) for name, g in adapters.items()]
    fig, axes = plt.subplots(len(panels), 1, figsize=(6, 1.6 * len(panels)), squeeze=False, sharex=True)
    image = None
    for ax, (name, values) in zip(axes[:, 0], panels):
        image = ax.imshow(values, origin="lower", aspect="auto", vmin=-1.0, vmax=1.0, cmap="magma",
                          interpolation="nearest")
        ax.set_ylabel("Mel band")
        ax.set_title(name, fontsize=9)
    axes[-1, 0].set_xlabel("frame")
    fig.colorbar(image, ax=axes[:, 0].tolist(), shrink=0.8)
    fig.savefig(path, dpi=dpi, metadata=_PNG_META)
    plt.close(fig)
    return len(panels)


def embed_2d(points: np.ndarray, seed: int, perplexity: float = 15.0) -> np.ndarray:
    """Seeded t-SNE projection to two dimensions."""
    from sklearn.manifold import TSNE

    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 10:
        raise InvalidInputError(f"need at least 10 points for an embedding, got {points.shape[0]}")
    perplexity = min(perplexity, (points.shape[0] - 1) / 3)
    tsne = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed)
    return tsne.fit_transform(points)


def separation_ratio(points: np.ndarray, groups: Sequence) -> float:
    """Mean pairwise distance between group centroids over mean distance of points to their centroid."""
    points = np.asarray(points, dtype=np.float64)
    groups = np.asarray(groups)
    labels = sorted(set(groups.tolist()))
    if len(labels) < 2:
        raise InvalidInputError("need at least two groups")
    centroids = np.stack([points[groups == g].mean(axis=0) for g in labels])
    inter = [np.linalg.norm(centroids[i] - centroids[j]) for i in range(len(labels)) for j in range(i + 1, len(labels))]
    spread = np.mean([np.linalg.norm(p - centroids[labels.index(g)]) for p, g in zip(points, groups.tolist())])
    return float(np.mean(inter) / spread) if spread > 0 else math.inf


def clip_summary(spec: NormalizedSpectrogram) -> np.ndarray:
    """Per-band mean and standard deviation over time; the point plotted per clip."""
    return np.concatenate([spec.values.mean(axis=1), spec.values.std(axis=1)])


def scatter_embedding(xy: np.ndarray, devices: Sequence[str], scenes: Sequence[str], path: str | Path,
                      title: str = "", dpi: int = 100) -> None:
    markers = "os^vD<>P*X"
    device_list = sorted(set(devices))
    scene_list = sorted(set(scenes))
    colors = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(5, 4))
    for i, dev in enumerate(device_list):
        for j, sc in enumerate(scene_list):
            mask = [(d == dev and s == sc) for d, s in zip(devices, scenes)]
            if any(mask):
                pts = xy[np.asarray(mask)]
                ax.scatter(pts[:, 0], pts[:, 1], color=colors(i % 10), marker=markers[j % len(markers)], s=14,
                           label=f"{dev}/{sc}")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=6, ncol=2)
    fig.savefig(path, dpi=dpi, metadata=_PNG_META)
    plt.close(fig)


def plot_losses(rows: Iterable[tuple[int, int, str, float]], path: str | Path, dpi: int = 100) -> None:
    by_name: dict[str, dict[int, list[float]]] = {}
    for epoch, _, name, value in rows:
        by_name.setdefault(name, {}).setdefault(int(epoch), []).append(float(value))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, per_epoch in sorted(by_name.items()):
        epochs = sorted(per_epoch)
        ax.plot(epochs, [np.mean(per_epoch[e]) for e in epochs], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.legend(fontsize=7)
    fig.savefig(path, dpi=dpi, metadata=_PNG_META)
    plt.close(fig)
