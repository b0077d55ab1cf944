import csv
import json
import struct

import pytest

from devadapt.cli import main, resolve_config
from devadapt.nets import file_sha256

TINY_CORPUS = {"clips_per_scene": 8, "clip_seconds": 1.0}
TINY_TRAIN = {"max_epochs": 3, "generator": {"base_channels": 8}, "discriminator": {"base_channels": 8}}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus_cfg = write_json(root / "corpus.json", TINY_CORPUS)
    assert main(["synth", "--config", corpus_cfg, "--seed", "1", "--out", str(root / "corpus")]) == 0
    assert main(["features", "--corpus", str(root / "corpus"), "--out", str(root / "features")]) == 0
    clf_cfg = write_json(root / "clf.json", {"epochs": 2})
    assert main(["train-classifier", "--features", str(root / "features"), "--config", clf_cfg,
                 "--seed", "0", "--out", str(root / "clf")]) == 0
    train_cfg = write_json(root / "train.json", TINY_TRAIN)
    assert main(["train-da", "--features", str(root / "features"), "--classifier", str(root / "clf/classifier.danp"),
                 "--preset", "CycleGAN", "--seed", "0", "--config", train_cfg, "--out", str(root / "run")]) == 0
    return root


def manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_synth_outputs_and_rerun_hash(pipeline_dirs, tmp_path):
    corpus = pipeline_dirs / "corpus"
    assert {r.split("-")[-1] for r in manifest(corpus)["outputs"] if r.endswith(".wav")} == {"a.wav", "b.wav", "s1.wav"}
    cfg = write_json(tmp_path / "c.json", TINY_CORPUS)
    assert main(["synth", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "again")]) == 0
    assert file_sha256(tmp_path / "again/manifest.csv") == file_sha256(corpus / "manifest.csv")
    assert manifest(tmp_path / "again")["outputs"] == manifest(corpus)["outputs"]
    assert manifest(tmp_path / "again")["config_hash"] == manifest(corpus)["config_hash"]


def test_synth_rejects_bad_ratio(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {**TINY_CORPUS, "devices": [{"device_id": "b", "impulse_response": [1.0],
                                                                       "ratio": 0.5}]})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
    assert "ratio" in capsys.readouterr().err


def test_features_one_file_per_clip(pipeline_dirs):
    feats = pipeline_dirs / "features"
    n_clips = len(list((pipeline_dirs / "corpus/audio").glob("*.wav")))
    files = list((feats / "features").glob("*.dafe"))
    assert len(files) == n_clips and all(f.read_bytes()[:4] == b"DAFE" for f in files)
    assert len(list(feats.glob("norm_stats*.json"))) == 1


def test_features_survive_corrupt_wav(pipeline_dirs, tmp_path, capsys):
    import shutil

    corpus = tmp_path / "corpus"
    shutil.copytree(pipeline_dirs / "corpus", corpus)
    (corpus / ".lock").unlink(missing_ok=True)
    bad = sorted((corpus / "audio").glob("*-b.wav"))[0]
    bad.write_bytes(b"RIFF" + struct.pack("<I", 4) + b"junk")
    assert main(["features", "--corpus", str(corpus), "--out", str(tmp_path / "f")]) == 0
    errors = json.loads((tmp_path / "f/errors.json").read_text())
    assert list(errors) == [f"audio/{bad.name}"]
    assert bad.name in capsys.readouterr().err
    assert len(list((tmp_path / "f/features").glob("*.dafe"))) == len(list((corpus / "audio").glob("*.wav"))) - 1


def test_features_idempotent(pipeline_dirs, tmp_path):
    assert main(["features", "--corpus", str(pipeline_dirs / "corpus"), "--out", str(tmp_path / "f")]) == 0
    assert manifest(tmp_path / "f")["outputs"] == manifest(pipeline_dirs / "features")["outputs"]


def test_classifier_outputs(pipeline_dirs, tmp_path):
    clf = pipeline_dirs / "clf"
    metrics = json.loads((clf / "metrics.json").read_text())
    assert 0 <= metrics["heldout_source_accuracy"] <= 100
    assert json.loads((clf / "classifier.danp.json").read_text())["manifest"]["source_only"] is True
    cfg = write_json(tmp_path / "clf.json", {"epochs": 2})
    assert main(["train-classifier", "--features", str(pipeline_dirs / "features"), "--config", cfg,
                 "--seed", "0", "--out", str(tmp_path / "again")]) == 0
    assert file_sha256(tmp_path / "again/classifier.danp") == file_sha256(clf / "classifier.danp")


def test_seed_required(pipeline_dirs, tmp_path, capsys):
    assert main(["train-classifier", "--features", str(pipeline_dirs / "features"), "--out", str(tmp_path)]) == 2
    assert "seed" in capsys.readouterr().err


def test_train_da_run_dir(pipeline_dirs):
    run = pipeline_dirs / "run"
    for name in ("losses.csv", "validation.csv", "best_g_ts.danp", "train_config.json"):
        assert (run / name).is_file()
    m = manifest(run)
    assert m["config"]["weights"] == {"lambda_id": 5.0, "lambda_tr": 0.0, "lambda_cyc": 10.0}
    assert m["outputs"]["best_g_ts.danp"] == file_sha256(run / "best_g_ts.danp")


def test_unknown_preset_in_config_is_enumerated(pipeline_dirs, tmp_path, capsys):
    cfg = write_json(tmp_path / "t.json", {**TINY_TRAIN, "preset": "CycleGANN"})
    code = main(["train-da", "--features", str(pipeline_dirs / "features"), "--classifier",
                 str(pipeline_dirs / "clf/classifier.danp"), "--config", cfg, "--seed", "0", "--out", str(tmp_path / "r")])
    err = capsys.readouterr().err
    assert code == 2 and "GAN_id_tr" in err and "CycleGAN_all" in err


def test_evaluate_rows(pipeline_dirs, tmp_path):
    out = tmp_path / "ev"
    assert main(["evaluate", "--features", str(pipeline_dirs / "features"), "--classifier",
                 str(pipeline_dirs / "clf/classifier.danp"), "--adapter", str(pipeline_dirs / "run/best_g_ts.danp"),
                 "--out", str(out)]) == 0
    with open(out / "accuracy.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["DA method", "Accuracy [%] (source)", "Accuracy [%] (target)", "Accuracy [%] (new devices)"]
    assert [r[0] for r in rows[1:]] == ["NA", "CycleGAN"]
    reports = json.loads((out / "report.json").read_text())
    assert reports[0]["relative_target_gain"] is None
    assert all(k in reports[1] for k in ("relative_target_gain", "relative_source_drop"))

    assert main(["evaluate", "--features", str(pipeline_dirs / "features"), "--classifier",
                 str(pipeline_dirs / "clf/classifier.danp"), "--adapter", "none", "--out", str(tmp_path / "na")]) == 0
    assert len(json.loads((tmp_path / "na/report.json").read_text())) == 1


@pytest.mark.parametrize("kind", ["spectrogram", "embedding", "losses"])
def test_plot_kinds(pipeline_dirs, tmp_path, kind):
    args = ["plot", "--kind", kind, "--features", str(pipeline_dirs / "features"), "--run", str(pipeline_dirs / "run"),
            "--adapter", str(pipeline_dirs / "run/best_g_ts.danp"), "--seed", "0"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    pngs = sorted(p.name for p in (tmp_path / "a").glob("*.png"))
    assert pngs
    if kind == "embedding":
        assert pngs == ["embedding_post_CycleGAN.png", "embedding_pre.png"]
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        for name in pngs:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_plot_missing_artifact(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["plot", "--kind", "losses", "--run", str(tmp_path / "empty"), "--out", str(tmp_path / "p")]) == 2
    assert "train-da" in capsys.readouterr().err


def test_lock_blocks_concurrent_runs(tmp_path, capsys):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").write_text("123")
    cfg = write_json(tmp_path / "c.json", TINY_CORPUS)
    assert main(["synth", "--config", cfg, "--out", str(out)]) == 2
    assert "locked" in capsys.readouterr().err


def test_config_precedence(tmp_path):
    defaults = {"seed": None, "max_epochs": 200, "generator": {"base_channels": 32}}
    cfg_path = write_json(tmp_path / "c.json", {"max_epochs": 10, "generator": {"base_channels": 16}})
    env = {"DEVADAPT_MAX_EPOCHS": "12", "DEVADAPT_GENERATOR__BASE_CHANNELS": "8"}
    assert resolve_config(defaults, cfg_path, {"seed": 3}, env) == {"seed": 3, "max_epochs": 12,
                                                                   "generator": {"base_channels": 8}}
    assert resolve_config(defaults, cfg_path, {"seed": None}, {})["max_epochs"] == 10
    with pytest.raises(Exception, match="unknown config keys"):
        resolve_config(defaults, write_json(tmp_path / "bad.json", {"epochz": 1}), {}, {})
