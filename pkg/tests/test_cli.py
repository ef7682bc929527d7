import csv
import json

import pytest

from mmser.base import ConfigError
from mmser.checkpoint import read_metadata
from mmser.cli import main
from mmser.dataset import DatasetManifest, generate_synthetic, save_manifest
from mmser.pipeline import RunConfig

FAST = [
    "--test-mode",
    "--set", "mocap.epochs=3",
    "--set", "mocap.n_filters=4",
    "--set", "speech.epochs=2",
    "--set", "text.epochs=2",
    "--set", "fusion.epochs=5",
]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out.strip(), out.err.strip()


# -- configuration ------------------------------------------------------------

def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text("seed: 3\ntest_mode: true\nmocap:\n  epochs: 7\n")
    cfg = RunConfig.from_file(p).with_overrides(["mocap.n_filters=8", "protocol=loso_rotating"])
    params = cfg.estimator_params("mocap")
    assert params["epochs"] == 7 and params["n_filters"] == 8 and params["random_state"] == 3
    assert params["learning_rate"] == 1e-3  # desk profile
    assert cfg.eval_protocol.scheme == "loso_rotating"
    assert RunConfig().estimator_params("mocap") == {"random_state": 0}


@pytest.mark.parametrize(
    "overrides",
    [["colour=red"], ["mocap.kernel=3"], ["mocap.random_state=1"], ["protocol=kfold"], ["subsets=[Sp]"],
     ["mocap.variant=conv", "mocap.n_blocks=0"], ["novalue"]],
)
def test_invalid_config_rejected(overrides):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(overrides)


def test_config_hash_tracks_settings_not_paths():
    a = RunConfig(test_mode=True)
    assert a.hash() == RunConfig(test_mode=True, artifact_dir="/elsewhere").hash()
    assert a.hash() != RunConfig(test_mode=True, seed=1).hash()
    assert a.hash() != a.with_overrides(["fusion.epochs=3"]).hash()


# -- commands -------------------------------------------------------------------

def test_ingest_synthetic(tmp_path, capsys):
    code, out, _ = run(capsys, "ingest", "--synthetic", 8, "--artifact-dir", tmp_path)
    assert code == 0 and out.count("\n") == 0
    assert "32 records" in out
    manifest = tmp_path / "manifests" / "manifest.jsonl"
    assert len(manifest.read_text().splitlines()) == 32
    meta = json.loads((tmp_path / "manifests" / "manifest.meta.json").read_text())
    assert set(meta) >= {"config_hash", "seed", "toolkit_version"}


def test_ingest_needs_one_source(tmp_path, capsys):
    code, _, err = run(capsys, "ingest", "--artifact-dir", tmp_path)
    assert code == 2 and "--synthetic" in err


def test_missing_manifest_names_ingest(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--artifact-dir", tmp_path, *FAST)
    assert code == 3 and "mmser ingest" in err


def test_missing_upstream_artifacts(tmp_path, capsys):
    run(capsys, "ingest", "--synthetic", 2, "--artifact-dir", tmp_path)
    code, _, err = run(capsys, "eval", "--model", "mocap", "--artifact-dir", tmp_path, *FAST)
    assert code == 3 and "mmser train --modality mocap" in err
    code, _, err = run(capsys, "fuse", "--subset", "Sp+Tx", "--artifact-dir", tmp_path, *FAST)
    assert code == 3 and "speech" in err and "mmser train" in err
    run(capsys, "train", "--modality", "speech", "--artifact-dir", tmp_path, *FAST)
    run(capsys, "train", "--modality", "text", "--artifact-dir", tmp_path, *FAST)
    code, _, err = run(capsys, "fuse", "--subset", "Sp+Tx", "--artifact-dir", tmp_path, *FAST)
    assert code == 3 and "mmser embed" in err
    code, _, err = run(capsys, "eval", "--model", "Sp+Tx", "--artifact-dir", tmp_path, *FAST)
    assert code == 3 and "mmser fuse --subset Sp+Tx" in err


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("- not a mapping\n")
    code, _, err = run(capsys, "train", "--config", cfg)
    assert code == 2 and "mapping" in err
    code, _, _ = run(capsys, "eval", "--model", "Sp+Video", "--artifact-dir", tmp_path)
    assert code == 2


def test_training_failure_exit_code(tmp_path, capsys):
    recs = [r.__class__(**{**r.__dict__, "mocap_refs": None}) for r in generate_synthetic(2, 0)]
    save_manifest(DatasetManifest(tuple(recs), "synthetic"), tmp_path / "manifests" / "manifest.jsonl")
    code, _, err = run(capsys, "train", "--modality", "mocap", "--artifact-dir", tmp_path, *FAST)
    assert code == 4 and "no training utterances with mocap" in err


def test_composed_commands(tmp_path, capsys):
    art = ["--artifact-dir", tmp_path, *FAST]
    assert run(capsys, "ingest", "--synthetic", 4, *art)[0] == 0
    code, out, _ = run(capsys, "train", *art)
    assert code == 0 and "mocap@fold5=" in out
    code, out, _ = run(capsys, "embed", *art)
    assert code == 0 and "embeddings" in out
    code, out, _ = run(capsys, "fuse", *art)
    assert code == 0 and "Sp+Tx+MC@fold5=" in out
    code, out, _ = run(capsys, "eval", *art)
    assert code == 0 and out.startswith("eval: W2V-BERT-CLA mean accuracy")

    report = tmp_path / "reports" / "fusion_Sp-Tx-MC"
    rows = list(csv.reader(open(report / "metrics.csv")))
    assert rows[0] == ["fold_id", "n_train", "n_test", "accuracy"] and rows[-1][0] == "mean"
    assert (report / "confusion_5.txt").exists()
    cfg_hash = RunConfig.from_dict({"test_mode": True}).with_overrides(
        [a for a in FAST if "=" in a]).hash()
    meta = json.loads((report / "metrics.meta.json").read_text())
    assert meta["config_hash"] == cfg_hash and meta["seed"] == 0
    ckpt = read_metadata(tmp_path / "checkpoints" / "fold5" / "fusion_Sp-Tx-MC.safetensors")
    assert ckpt["config_hash"] == cfg_hash and ckpt["seed"] == 0 and "toolkit_version" in ckpt
    # the fusion checkpoint records the unimodal files it was trained against
    assert set(ckpt["member_sha256"]) == {"speech.safetensors", "text.safetensors", "mocap.safetensors"}

    # eval again from artifacts only gives identical bytes
    first = (report / "metrics.csv").read_bytes()
    assert run(capsys, "eval", *art)[0] == 0
    assert (report / "metrics.csv").read_bytes() == first


def test_study_table(tmp_path, capsys):
    art = ["--artifact-dir", tmp_path, *FAST]
    run(capsys, "ingest", "--synthetic", 4, *art)
    code, out, _ = run(capsys, "study", *art)
    assert code == 0 and out.startswith("study: 7 rows")
    rows = list(csv.reader(open(tmp_path / "reports" / "study" / "study.csv")))
    assert rows[0] == ["Model", "Modality", "Validation", "Accuracy"]
    assert [r[0] for r in rows[1:]] == [
        "Sp-Wav2Vec", "Tx-BERT", "MC-Conv-LSTM-Attention", "W2V-BERT", "W2V-CLA", "BERT-CLA", "W2V-BERT-CLA",
    ]
    assert all(len(r[3].split(".")[1]) == 2 for r in rows[1:])
    text = (tmp_path / "reports" / "study" / "study.txt").read_text()
    assert text.splitlines()[0].split() == ["Model", "Modality", "Validation", "Accuracy(%)"]


@pytest.mark.slow
def test_train_mocap_reaches_full_train_accuracy(tmp_path, capsys):
    run(capsys, "ingest", "--synthetic", 8, "--artifact-dir", tmp_path)
    code, out, _ = run(capsys, "train", "--modality", "mocap", "--test-mode", "--artifact-dir", tmp_path)
    assert code == 0 and "mocap@fold5=1.0000" in out
    log = (tmp_path / "checkpoints" / "fold5" / "mocap.log.csv").read_text().splitlines()
    assert log[0] == "epoch,loss,train_accuracy" and len(log) == 101
