import csv
import json

import pytest

from tsnodule.cli import run_cli
from tsnodule.cohort import read_cohort_index, read_manifest


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    assert run_cli(["synth", "--out", str(out), "--seed", "7", "--n-studies", "24", "--n-malignant", "12"]) == 0
    return out


def write_cfg(path, **train):
    path.write_text(json.dumps({"train": {"epochs": 3, "patience": 1, "batch_size": 4, "lr": 1e-3,
                                          "freeze_backbone": True, **train},
                                "data": {"kfolds": 3}}))
    return str(path)


def test_synth_writes_index(cohort):
    index = read_cohort_index(cohort)
    assert len(index["manifests"]) == 24 and index["seed"] == 7
    labels = [read_manifest(cohort / m).label for m in index["manifests"]]
    assert labels.count("malignant") == 12


def test_train_then_eval_writes_roc(cohort, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json")
    ck = tmp_path / "m.nckp"
    assert run_cli(["train", "--config", cfg, "--data", str(cohort), "--mode", "t1t2", "--out-ckpt", str(ck),
                    "--history-out", str(tmp_path / "h.csv")]) == 0
    meta = json.loads(capsys.readouterr().out)
    assert meta["digest"].startswith("sha256:") and meta["stopped_epoch"] <= 3
    assert next(csv.reader(open(tmp_path / "h.csv"))) == ["epoch", "train_loss", "val_loss", "val_f1"]
    roc = tmp_path / "roc.csv"
    assert run_cli(["eval", "--ckpt", str(ck), "--data", str(cohort), "--roc-out", str(roc),
                    "--metrics-out", str(tmp_path / "m.json")]) == 0
    rows = list(csv.reader(open(roc)))
    assert rows[0] == ["threshold", "fpr", "tpr"] and len(rows) > 2
    assert json.loads(capsys.readouterr().out)["n"] == 8
    assert json.loads((tmp_path / "m.json").read_text())["tp"] >= 0
    assert run_cli(["inspect-ckpt", str(ck)]) == 0
    assert json.loads(capsys.readouterr().out)["metadata"]["kind"] == "two_stream_model"


def test_training_is_reproducible_through_cli(cohort, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", epochs=2)
    digests = []
    for name in ("a", "b"):
        assert run_cli(["train", "--config", cfg, "--data", str(cohort), "--out-ckpt", str(tmp_path / name)]) == 0
        digests.append(json.loads(capsys.readouterr().out)["digest"])
    assert digests[0] == digests[1]
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_overfit_probe_model_predicts_training_label(cohort, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", epochs=200, patience=199, augment=False)
    small = tmp_path / "small"
    assert run_cli(["synth", "--out", str(small), "--seed", "7", "--n-studies", "8", "--n-malignant", "4"]) == 0
    ck = tmp_path / "probe.nckp"
    assert run_cli(["train", "--config", cfg, "--data", str(small), "--overfit-probe", "--out-ckpt", str(ck)]) == 0
    capsys.readouterr()
    index = read_cohort_index(small)
    for name in index["manifests"]:
        study = read_manifest(small / name)
        assert run_cli(["predict", "--ckpt", str(ck), "--study", str(small / name)]) == 0
        sid, prob, label = capsys.readouterr().out.split()
        assert sid == study.study_id and label == study.label and 0.0 <= float(prob) <= 1.0


def test_crossval_prints_summary(cohort, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", epochs=2)
    assert run_cli(["crossval", "--config", cfg, "--data", str(cohort), "--folds", "3"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].split() == ["fold", "train_f1", "val_f1", "best_epoch"]
    assert "val F1" in out and "±" in out


def test_gradcheck_exit_code_follows_table(capsys):
    code = run_cli(["gradcheck"])
    table = capsys.readouterr().out
    assert "conv3d" in table and "tiny model" in table
    assert code == (1 if "FAIL" in table else 0)


@pytest.mark.parametrize("argv,code", [
    (["bogus"], 1),
    (["train", "--nope"], 1),
    (["train", "--out-ckpt", "x"], 1),
])
def test_usage_errors_exit_1(argv, code, capsys):
    assert run_cli(argv) == code
    assert capsys.readouterr().err


def test_bad_config_and_bad_files(cohort, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"lerning_rate": 1}}))
    assert run_cli(["train", "--config", str(bad), "--data", str(cohort), "--out-ckpt", str(tmp_path / "x")]) == 1
    assert "lerning_rate" in capsys.readouterr().err
    broken = tmp_path / "broken.nckp"
    broken.write_bytes(b"NCKP\x01\x00\x00\x00")
    assert run_cli(["eval", "--ckpt", str(broken), "--data", str(cohort)]) == 2
    assert run_cli(["inspect-ckpt", str(tmp_path / "missing.nckp")]) == 2
