"""``devadapt`` command line: synth, features, train-classifier, train-da, evaluate, plot.

Configuration is resolved as built-in defaults, then ``--config`` JSON, then
``DEVADAPT_<KEY>`` environment variables (nested keys joined by ``__``), then flags.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from . import __version__
from .asc import load_classifier, save_classifier
from .corpus import SOURCE_DEVICE, DeviceSimSpec, build_paired_index, default_device_specs, parse_filename
from .errors import DevAdaptError
from .evaluation import (
    adapt_clip,
    clip_summary,
    embed_2d,
    emit_spectrogram_figure,
    evaluate,
    overall_accuracy,
    plot_losses,
    scatter_embedding,
    separation_ratio,
    write_reports,
)
from .features import FeatureConfig, read_feature_file
from .nets import file_sha256, load_checkpoint
from .pipeline import (
    DeskCorpusConfig,
    build_desk_corpus,
    extract_features,
    load_feature_store,
    source_items,
    train_source_classifier,
)
from .trainer import PRESETS, TrainConfig, train

log = logging.getLogger("devadapt")

ENV_PREFIX = "DEVADAPT_"
MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".lock"


class CommandError(DevAdaptError):
    """A user-facing failure with an actionable message."""


# -- configuration ---------------------------------------------------------------


def _parse_env_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _env_overrides(defaults: Mapping[str, Any], environ: Mapping[str, str], prefix: str = ENV_PREFIX) -> dict:
    out: dict[str, Any] = {}
    for key, value in defaults.items():
        name = prefix + key.upper()
        if isinstance(value, Mapping):
            nested = _env_overrides(value, environ, name + "__")
            if nested:
                out[key] = nested
        elif name in environ:
            out[key] = _parse_env_value(environ[name])
    return out


def _merge(base: Mapping[str, Any], update: Mapping[str, Any]) -> dict:
    out = dict(base)
    for k, v in update.items():
        out[k] = _merge(out[k], v) if isinstance(v, Mapping) and isinstance(out.get(k), Mapping) else v
    return out


def resolve_config(defaults: Mapping[str, Any], config_path: str | None, flags: Mapping[str, Any],
                   environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    cfg = dict(defaults)
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise CommandError(f"config file {config_path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise CommandError(f"config file {config_path} is not valid JSON: {exc}") from None
        if not isinstance(doc, Mapping):
            raise CommandError(f"config file {config_path} must hold a JSON object")
        unknown = set(doc) - set(defaults)
        if unknown:
            raise CommandError(f"unknown config keys {sorted(unknown)}; known: {sorted(defaults)}")
        cfg = _merge(cfg, doc)
    cfg = _merge(cfg, _env_overrides(defaults, environ))
    return _merge(cfg, {k: v for k, v in flags.items() if v is not None})


def config_hash(cfg: Mapping[str, Any]) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


# -- run bookkeeping ---------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config: dict
    config_hash: str
    seed: int | None
    inputs: dict[str, str]
    outputs: dict[str, str] = field(default_factory=dict)  # relative path -> sha256
    version: str = __version__
    started: str = ""
    finished: str = ""

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


@contextlib.contextmanager
def run_lock(out_dir: Path):
    """Exclusive ownership of ``out_dir`` for the duration of one command."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CommandError(f"{out_dir} is locked by another run (remove {lock} if that run is gone)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _hash_outputs(out_dir: Path, paths) -> dict[str, str]:
    return {str(Path(p).relative_to(out_dir)): file_sha256(p) for p in sorted(paths)}


def _validate_outputs(paths, validators: Mapping[str, Callable[[Path], None]] | None = None) -> list[str]:
    problems = []
    for p in paths:
        p = Path(p)
        if not p.is_file() or p.stat().st_size == 0:
            problems.append(f"missing or empty output {p}")
            continue
        check = (validators or {}).get(p.suffix)
        if check is not None:
            try:
                check(p)
            except Exception as exc:  # noqa: BLE001 - reported, not raised
                problems.append(f"{p}: {exc}")
    return problems


def _check_png(p: Path) -> None:
    if p.read_bytes()[:8] != b"\x89PNG\r\n\x1a\n":
        raise ValueError("not a PNG file")


def _check_json(p: Path) -> None:
    json.loads(p.read_text())


VALIDATORS = {".png": _check_png, ".json": _check_json, ".dafe": read_feature_file}


def _finish(command: str, out_dir: Path, cfg: dict, seed, inputs: dict, outputs: list[Path], started: str) -> int:
    problems = _validate_outputs(outputs, VALIDATORS)
    manifest = RunManifest(command, cfg, config_hash(cfg), seed, {k: str(v) for k, v in inputs.items()},
                           _hash_outputs(out_dir, [p for p in outputs if Path(p).is_file()]),
                           started=started, finished=_now())
    manifest.write(out_dir)
    for msg in problems:
        log.error(msg)
    return 0 if not problems else 1


def _require_dir(path: str | None, what: str, hint: str) -> Path:
    if not path:
        raise CommandError(f"missing --{what}; {hint}")
    p = Path(path)
    if not p.is_dir():
        raise CommandError(f"--{what} {p} is not a directory; {hint}")
    return p


def _require_file(path: str | None, what: str, hint: str) -> Path:
    if not path:
        raise CommandError(f"missing --{what}; {hint}")
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"--{what} {p} does not exist; {hint}")
    return p


# -- commands ---------------------------------------------------------------------


def synth_defaults() -> dict:
    d = asdict(DeskCorpusConfig())
    d["fractions"] = list(d["fractions"])
    d["devices"] = None  # None selects the two built-in simulated devices
    return d


def cmd_synth(args) -> int:
    cfg = resolve_config(synth_defaults(), args.config, {"seed": args.seed})
    out = Path(args.out)
    started = _now()
    with run_lock(out):
        specs = (default_device_specs(cfg["sample_rate"]) if cfg["devices"] is None
                 else [DeviceSimSpec.from_dict(d) for d in cfg["devices"]])
        corpus_cfg = DeskCorpusConfig(**{k: v for k, v in cfg.items() if k != "devices"} | {
            "fractions": tuple(cfg["fractions"])})
        records = build_desk_corpus(out, corpus_cfg, specs)
        devices_path = out / "devices.json"
        devices_path.write_text(json.dumps({"devices": [s.to_dict() for s in specs]}, indent=2))
        outputs = [out / "manifest.csv", devices_path] + [out / r.path for r in records]
        print(f"wrote {len(records)} clips to {out}")
        return _finish("synth", out, cfg, cfg["seed"], {}, outputs, started)


def cmd_features(args) -> int:
    corpus = _require_dir(args.corpus, "corpus", "point it at the output of `devadapt synth`")
    cfg = resolve_config(asdict(FeatureConfig()), args.config, {})
    out = Path(args.out)
    started = _now()
    with run_lock(out):
        store = extract_features(corpus, out, FeatureConfig(**cfg))
        for path, err in store.errors.items():
            print(f"skipped {path}: {err}", file=sys.stderr)
        outputs = [out / "manifest.csv", out / "norm_stats.json", out / "errors.json"]
        outputs += [out / m.path for m, _ in store.rows]
        print(f"extracted {len(store.features)} clips ({len(store.errors)} errors) to {out}")
        return _finish("features", out, cfg, None, {"corpus": corpus}, outputs, started)


def classifier_defaults() -> dict:
    return {"seed": None, "epochs": 25, "channels": 16, "crops_per_clip": 4, "batch_size": 32, "lr": 1e-3}


def cmd_train_classifier(args) -> int:
    feats = _require_dir(args.features, "features", "run `devadapt features` first")
    cfg = resolve_config(classifier_defaults(), args.config, {"seed": args.seed})
    if cfg["seed"] is None:
        raise CommandError("a seed is required (--seed, config key 'seed' or DEVADAPT_SEED)")
    out = Path(args.out)
    started = _now()
    with run_lock(out):
        store = load_feature_store(feats)
        clf = train_source_classifier(store, seed=int(cfg["seed"]), **{k: v for k, v in cfg.items() if k != "seed"})
        split = store.split
        held_out = source_items(store, split.validation + split.test)
        metrics = {"heldout_source_accuracy": overall_accuracy(clf, None, held_out) if held_out else None,
                   "train_source_accuracy": overall_accuracy(clf, None, source_items(store, split.train))}
        ckpt = out / "classifier.danp"
        save_classifier(ckpt, clf)
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
        print(f"held-out source accuracy: {metrics['heldout_source_accuracy']}")
        outputs = [ckpt, Path(str(ckpt) + ".json"), out / "metrics.json"]
        return _finish("train-classifier", out, cfg, cfg["seed"], {"features": feats}, outputs, started)


def train_defaults() -> dict:
    d = TrainConfig(preset="CycleGAN", seed=0).to_dict()
    d.pop("weights")
    d.pop("data_mode")
    d["seed"] = None
    return d


def cmd_train_da(args) -> int:
    feats = _require_dir(args.features, "features", "run `devadapt features` first")
    clf_path = _require_file(args.classifier, "classifier", "run `devadapt train-classifier` first")
    cfg = resolve_config(train_defaults(), args.config, {"seed": args.seed, "preset": args.preset})
    if cfg["seed"] is None:
        raise CommandError("a seed is required (--seed, config key 'seed' or DEVADAPT_SEED)")
    train_cfg = TrainConfig.from_dict(cfg)
    out = Path(args.out)
    started = _now()
    with run_lock(out):
        store = load_feature_store(feats)
        clf = load_classifier(clf_path)
        split = store.split
        result = train(train_cfg, build_paired_index(split.train), store.features, clf,
                       store.items(split.validation), run_dir=out)
        print(f"best epoch {result.history.best_epoch}, checkpoint {result.best_checkpoint}")
        outputs = [out / "losses.csv", out / "validation.csv", out / "best_g_ts.danp",
                   out / "best_g_ts.danp.json", out / "train_config.json"]
        outputs += sorted((out / "checkpoints").glob("*.danp"))
        return _finish("train-da", out, train_cfg.to_dict(), train_cfg.seed,
                       {"features": feats, "classifier": clf_path}, outputs, started)


def _load_adapters(paths) -> dict[str, object]:
    adapters: dict[str, object] = {}
    for p in paths or []:
        if p == "none":
            continue
        path = _require_file(p, "adapter", "pass a best_g_ts.danp written by `devadapt train-da` or 'none'")
        model, meta = load_checkpoint(path)
        if meta.get("kind") != "generator":
            raise CommandError(f"{path} is not a generator checkpoint")
        name = meta.get("preset") or path.stem
        while name in adapters:
            name += "'"
        adapters[name] = model
    return adapters


def cmd_evaluate(args) -> int:
    feats = _require_dir(args.features, "features", "run `devadapt features` first")
    clf_path = _require_file(args.classifier, "classifier", "run `devadapt train-classifier` first")
    cfg = resolve_config({"holdout_devices": ["s5", "s6"]}, args.config, {})
    out = Path(args.out)
    started = _now()
    with run_lock(out):
        store = load_feature_store(feats)
        clf = load_classifier(clf_path)
        test = store.items(store.split.test)
        holdout = tuple(cfg["holdout_devices"])
        na = evaluate(clf, None, test, store.features, holdout, "NA")
        reports = [na] + [evaluate(clf, g, test, store.features, holdout, name).with_relative(na)
                          for name, g in _load_adapters(args.adapter).items()]
        paths = write_reports(out, reports)
        for r in reports:
            print(f"{r.method}: source {r.accuracy_source} target {r.accuracy_target} "
                  f"new {r.accuracy_new_devices} lsd_target {r.lsd_target}")
        inputs = {"features": feats, "classifier": clf_path, "adapters": ",".join(args.adapter or [])}
        return _finish("evaluate", out, cfg, None, inputs, list(paths.values()), started)


def _source_id(meta) -> str:
    return replace(meta, device_id=SOURCE_DEVICE).recording_id


def _plot_spectrogram(args, out: Path, cfg) -> list[Path]:
    feats = _require_dir(args.features, "features", "spectrogram plots need a feature store")
    store = load_feature_store(feats)
    test = store.items(store.split.test)
    target = next(((m, s) for m, s in test if m.device_id != SOURCE_DEVICE and
                   _source_id(m) in store.features), None)
    if cfg["clip"]:
        meta = parse_filename(cfg["clip"] + ".wav")
        if meta.recording_id not in store.features:
            raise CommandError(f"clip {cfg['clip']} is not in {feats}")
        target = (meta, store.features[meta.recording_id])
    if target is None:
        raise CommandError(f"{feats} has no paired target-device test clip to plot")
    meta, spec = target
    source = store.features.get(_source_id(meta))
    if source is None:
        raise CommandError(f"clip {meta.recording_id} has no paired source recording")
    path = out / "spectrogram.png"
    emit_spectrogram_figure(source, spec, _load_adapters(args.adapter), path)
    return [path]


def _plot_embedding(args, out: Path, cfg) -> list[Path]:
    feats = _require_dir(args.features, "features", "embedding plots need a feature store")
    if cfg["seed"] is None:
        raise CommandError("embedding plots need a seed (--seed)")
    store = load_feature_store(feats)
    test = store.items(store.split.test)
    devices = [m.device_id for m, _ in test]
    scenes = [m.scene for m, _ in test]
    variants = {"pre": [clip_summary(s) for _, s in test]}
    for name, g in _load_adapters(args.adapter).items():
        variants[f"post_{name}"] = [clip_summary(s if m.device_id == SOURCE_DEVICE else adapt_clip(g, s))
                                    for m, s in test]
    paths, ratios = [], {}
    for name, pts in variants.items():
        xy = embed_2d(np.stack(pts), seed=int(cfg["seed"]))
        ratios[name] = separation_ratio(xy, devices)
        path = out / f"embedding_{name}.png"
        scatter_embedding(xy, devices, scenes, path, title=f"{name}: device separation {ratios[name]:.2f}")
        paths.append(path)
    info = out / "embedding.json"
    info.write_text(json.dumps({"device_separation_ratio": ratios}, indent=2, sort_keys=True))
    return paths + [info]


def _plot_losses(args, out: Path, cfg) -> list[Path]:
    run = _require_dir(args.run, "run", "pass the --out directory of a `devadapt train-da` run")
    losses = run / "losses.csv"
    if not losses.is_file():
        raise CommandError(f"{run} has no losses.csv; run `devadapt train-da --out {run}` first")
    with open(losses) as fh:
        rows = [(int(r["epoch"]), int(r["step"]), r["loss_name"], float(r["value"])) for r in csv.DictReader(fh)]
    path = out / "losses.png"
    plot_losses(rows, path)
    return [path]


PLOTS = {"spectrogram": _plot_spectrogram, "embedding": _plot_embedding, "losses": _plot_losses}


def cmd_plot(args) -> int:
    cfg = resolve_config({"seed": None, "clip": None}, args.config, {"seed": args.seed, "clip": args.clip})
    out = Path(args.out)
    started = _now()
    with run_lock(out):
        paths = PLOTS[args.kind](args, out, cfg)
        for p in paths:
            print(f"wrote {p}")
        inputs = {"kind": args.kind, "features": args.features or "", "run": args.run or "",
                  "adapters": ",".join(args.adapter or [])}
        return _finish(f"plot {args.kind}", out, cfg, cfg["seed"], inputs, paths, started)


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="devadapt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with config overrides")
        p.add_argument("--out", required=True, help="output directory (locked while the command runs)")
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "write a synthetic source + simulated-device corpus")
    p.add_argument("--seed", type=int)
    p = add("features", cmd_features, "extract log-Mel feature files for a corpus")
    p.add_argument("--corpus")
    p = add("train-classifier", cmd_train_classifier, "train the source-only scene classifier")
    p.add_argument("--features")
    p.add_argument("--seed", type=int)
    p = add("train-da", cmd_train_da, "train a domain-adaptation preset")
    p.add_argument("--features")
    p.add_argument("--classifier")
    p.add_argument("--preset", choices=list(PRESETS))
    p.add_argument("--seed", type=int)
    p = add("evaluate", cmd_evaluate, "score NA and adapters on the test split")
    p.add_argument("--features")
    p.add_argument("--classifier")
    p.add_argument("--adapter", action="append", help="generator checkpoint or 'none'; repeatable")
    p = add("plot", cmd_plot, "render spectrogram, embedding or loss figures")
    p.add_argument("--kind", required=True, choices=list(PLOTS))
    p.add_argument("--features")
    p.add_argument("--adapter", action="append")
    p.add_argument("--run", help="train-da output directory (losses)")
    p.add_argument("--clip", help="recording id for the spectrogram figure")
    p.add_argument("--seed", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DevAdaptError, ValueError, OSError) as exc:
        print(f"devadapt {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
