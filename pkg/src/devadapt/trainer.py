"""Adversarial training loops for the six adapter presets."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import losses as L
from .corpus import PairedIndex, RecordingMeta, SampleMode, epoch_size, sample_batch
from .errors import ConfigurationError, ContractViolation, InvalidInputError, TrainingDiverged
from .evaluation import overall_accuracy
from .features import NormalizedSpectrogram
from .losses import LossWeights
from .nets import S_TO_T, T_TO_S, DiscriminatorConfig, Generator, GeneratorConfig, init_params, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Preset:
    name: str
    kind: str  # "generator" | "gan" | "cyclegan"
    weights: LossWeights
    data_mode: SampleMode


PRESETS: dict[str, Preset] = {
    p.name: p
    for p in (
        Preset("Generator", "generator", LossWeights(lambda_id=1.0), SampleMode.PAIRED),
        Preset("GAN_id", "gan", LossWeights(lambda_id=5.0, lambda_tr=0.0), SampleMode.PAIRED),
        Preset("GAN_id_tr", "gan", LossWeights(lambda_id=5.0, lambda_tr=5.0), SampleMode.PAIRED),
        Preset("GAN_id_all", "gan", LossWeights(lambda_id=5.0, lambda_tr=0.0), SampleMode.UNPAIRED),
        Preset("CycleGAN", "cyclegan", LossWeights(lambda_id=5.0, lambda_cyc=10.0), SampleMode.PAIRED),
        Preset("CycleGAN_all", "cyclegan", LossWeights(lambda_id=5.0, lambda_cyc=10.0), SampleMode.UNPAIRED),
    )
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose one of: {', '.join(PRESETS)}") from None


@dataclass
class TrainConfig:
    preset: str
    seed: int
    max_epochs: int = 200
    batch_size: int = 32
    lr0: float = 0.002
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    decay_start_epoch: int = 15
    validate_every: int = 3
    patches_per_item: int = 1
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def __post_init__(self):
        get_preset(self.preset)
        if not 1 <= self.max_epochs <= 200:
            raise ConfigurationError("max_epochs must be in [1, 200]")
        if self.batch_size < 1 or self.validate_every < 1 or self.patches_per_item < 1:
            raise ConfigurationError("batch_size, validate_every and patches_per_item must be >= 1")
        if isinstance(self.generator, Mapping):
            self.generator = GeneratorConfig(**self.generator)
        if isinstance(self.discriminator, Mapping):
            self.discriminator = DiscriminatorConfig(**self.discriminator)

    @property
    def weights(self) -> LossWeights:
        return get_preset(self.preset).weights

    @property
    def data_mode(self) -> SampleMode:
        return get_preset(self.preset).data_mode

    @property
    def kind(self) -> str:
        return get_preset(self.preset).kind

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        d["data_mode"] = self.data_mode.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        derived = {"weights", "data_mode"}
        unknown = set(d) - names - derived
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        cfg = cls(**{k: v for k, v in d.items() if k in names})
        if "weights" in d and LossWeights(**d["weights"]) != cfg.weights:
            raise ConfigurationError(f"weights are fixed by preset {cfg.preset!r}")
        if "data_mode" in d and SampleMode(d["data_mode"]) is not cfg.data_mode:
            raise ConfigurationError(f"data_mode is fixed by preset {cfg.preset!r}")
        return cfg


def lr_schedule(epoch: float, cfg: TrainConfig) -> float:
    """Constant ``lr0`` before ``decay_start_epoch``, then linear to zero at ``max_epochs``."""
    if epoch < cfg.decay_start_epoch:
        return cfg.lr0
    span = cfg.max_epochs - cfg.decay_start_epoch
    if span <= 0:
        return 0.0
    return max(0.0, cfg.lr0 * (cfg.max_epochs - epoch) / span)


@dataclass
class ValidationPoint:
    epoch: int
    accuracy: float
    state: dict | None = None
    checkpoint: str | None = None


@dataclass
class TrainHistory:
    losses: list[tuple[int, int, str, float]] = field(default_factory=list)
    validation: list[ValidationPoint] = field(default_factory=list)
    best_epoch: int | None = None

    def epoch_means(self, name: str) -> dict[int, float]:
        acc: dict[int, list[float]] = {}
        for epoch, _, n, v in self.losses:
            if n == name:
                acc.setdefault(epoch, []).append(v)
        return {e: float(np.mean(v)) for e, v in sorted(acc.items())}

    def write_csv(self, run_dir: str | Path) -> tuple[Path, Path]:
        run_dir = Path(run_dir)
        loss_path, val_path = run_dir / "losses.csv", run_dir / "validation.csv"
        with open(loss_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "step", "loss_name", "value"])
            for epoch, step, name, value in self.losses:
                w.writerow([epoch, step, name, repr(value)])
        with open(val_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "accuracy"])
            for p in self.validation:
                w.writerow([p.epoch, repr(p.accuracy)])
        return loss_path, val_path


def select_best(history: TrainHistory) -> ValidationPoint:
    """Highest validation accuracy; the earliest epoch wins ties."""
    if not history.validation:
        raise InvalidInputError("history has no validation entries")
    best = history.validation[0]
    for p in history.validation[1:]:
        if p.accuracy > best.accuracy:
            best = p
    return best


@dataclass
class TrainResult:
    history: TrainHistory
    generator: Generator  # best-validation G_{T->S}
    models: dict[str, torch.nn.Module]
    best_checkpoint: Path | None = None
    best_sha256: str | None = None


def _stack(patches) -> torch.Tensor:
    return torch.as_tensor(np.stack([p.values for p in patches]), dtype=torch.float32)


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr0, betas=(cfg.adam_beta1, cfg.adam_beta2))


def _step(opt: torch.optim.Optimizer, loss: torch.Tensor) -> None:
    opt.zero_grad()
    loss.backward()
    opt.step()


def build_models(cfg: TrainConfig) -> dict[str, torch.nn.Module]:
    models = {"g_ts": init_params(cfg.generator, cfg.seed * 16 + 1, T_TO_S)}
    if cfg.kind in ("gan", "cyclegan"):
        models["d_s"] = init_params(cfg.discriminator, cfg.seed * 16 + 2, "S")
    if cfg.kind == "cyclegan":
        models["g_st"] = init_params(cfg.generator, cfg.seed * 16 + 3, S_TO_T)
        models["d_t"] = init_params(cfg.discriminator, cfg.seed * 16 + 4, "T")
    return models


def train(
    cfg: TrainConfig,
    index: PairedIndex,
    features: Mapping[str, NormalizedSpectrogram],
    classifier,
    validation_split: Sequence[tuple[RecordingMeta, NormalizedSpectrogram]],
    run_dir: str | Path | None = None,
) -> TrainResult:
    mode, w, kind = cfg.data_mode, cfg.weights, cfg.kind
    if mode is SampleMode.UNPAIRED and w.lambda_tr:
        raise ConfigurationError("a transfer loss needs paired data")
    if not validation_split and cfg.max_epochs >= cfg.validate_every:
        raise InvalidInputError("validation split is empty but validation points are scheduled")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    clf_digest = classifier.parameter_digest() if hasattr(classifier, "parameter_digest") else None

    rng = np.random.default_rng(cfg.seed)
    models = build_models(cfg)
    g_ts = models["g_ts"]
    opt_g = _adam([p for k in ("g_ts", "g_st") if k in models for p in models[k].parameters()], cfg)
    opt_ds = _adam(models["d_s"].parameters(), cfg) if "d_s" in models else None
    opt_dt = _adam(models["d_t"].parameters(), cfg) if "d_t" in models else None
    optimizers = [o for o in (opt_g, opt_ds, opt_dt) if o is not None]

    history = TrainHistory()
    steps = math.ceil(epoch_size(index, mode) * cfg.patches_per_item / cfg.batch_size)

    def diverged(epoch, step, name):
        diag = None
        if run_dir is not None:
            diag = run_dir / "diverged_g_ts.danp"
            save_checkpoint(diag, g_ts, epoch=epoch, step=step)
        raise TrainingDiverged(f"non-finite {name} loss at epoch {epoch}, step {step}", diag)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(cfg.max_epochs):
            lr = lr_schedule(epoch, cfg)
            for opt in optimizers:
                for group in opt.param_groups:
                    group["lr"] = lr
            for m in models.values():
                m.train()
            for step in range(steps):
                batch = sample_batch(index, features, mode, cfg.batch_size, rng)
                src = _stack([s for s, _ in batch])
                tgt = _stack([t for _, t in batch])
                record = {}
                if kind == "generator":
                    loss = L.generator_total_loss(g_ts, tgt, src, src, w)
                    record["generator_total"] = loss
                    _step(opt_g, loss)
                elif kind == "gan":
                    d_loss = L.gan_discriminator_objective(models["d_s"], g_ts, tgt, src)
                    _step(opt_ds, d_loss)
                    g_loss = L.gan_generator_objective(g_ts, models["d_s"], tgt, src, src, w)
                    _step(opt_g, g_loss)
                    record.update(d_s=d_loss, gan_total=g_loss)
                else:
                    g_st, d_s, d_t = models["g_st"], models["d_s"], models["d_t"]
                    with torch.no_grad():
                        fake_s, fake_t = g_ts(tgt), g_st(src)
                    ds_loss = L.adversarial_loss_d(d_s(fake_s), d_s(src))
                    _step(opt_ds, ds_loss)
                    dt_loss = L.adversarial_loss_d(d_t(fake_t), d_t(tgt))
                    _step(opt_dt, dt_loss)
                    g_loss = L.cyclegan_generator_objective(g_ts, g_st, d_s, d_t, src, tgt, w)
                    _step(opt_g, g_loss)
                    record.update(d_s=ds_loss, d_t=dt_loss, cyclegan_total=g_loss)
                for name, value in record.items():
                    v = float(value.detach())
                    if not math.isfinite(v):
                        diverged(epoch + 1, step, name)
                    history.losses.append((epoch + 1, step, name, v))

            if (epoch + 1) % cfg.validate_every == 0:
                g_ts.eval()
                point = ValidationPoint(epoch + 1, overall_accuracy(classifier, g_ts, validation_split),
                                        copy.deepcopy(g_ts.state_dict()))
                if run_dir is not None:
                    ckpt = run_dir / "checkpoints" / f"g_ts_epoch{epoch + 1:03d}.danp"
                    save_checkpoint(ckpt, g_ts, epoch=epoch + 1, validation_accuracy=point.accuracy,
                                    preset=cfg.preset)
                    point.checkpoint = str(ckpt)
                history.validation.append(point)
                log.info("epoch %d: validation accuracy %.2f%%", epoch + 1, point.accuracy)

    if clf_digest is not None and classifier.parameter_digest() != clf_digest:
        raise ContractViolation("classifier parameters changed during adapter training")

    best_gen = g_ts
    best_path = best_sha = None
    if history.validation:
        best = select_best(history)
        history.best_epoch = best.epoch
        best_gen = copy.deepcopy(g_ts)
        best_gen.load_state_dict(best.state)
    best_gen.eval()
    if run_dir is not None:
        history.write_csv(run_dir)
        best_path = run_dir / "best_g_ts.danp"
        best_sha = save_checkpoint(best_path, best_gen, epoch=history.best_epoch, preset=cfg.preset,
                                   validation_accuracy=select_best(history).accuracy if history.validation else None)
        (run_dir / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return TrainResult(history, best_gen, models, best_path, best_sha)
