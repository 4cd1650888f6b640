import json
import os

import pandas as pd
import pytest

from cellnet import cli, metrics
from cellnet.metrics import ConfusionMatrix

CLASSES = ["Homogeneous", "Speckled", "Nucleolar"]


def small_run_config(path):
    document = {
        "seed": 0,
        "network": {
            "input_size": 24,
            "layers": [
                {"kind": "convolution", "filter_size": 5, "output_maps": 4},
                {"kind": "maxpool", "region": 2},
                {"kind": "convolution", "filter_size": 3, "output_maps": 6},
                {"kind": "maxpool", "region": 2},
                {"kind": "fully_connected", "neurons": 16},
                {"kind": "softmax_output", "classes": 3},
            ],
        },
        "trainer": {"initial_learning_rate": 0.01, "mini_batch_size": 6, "max_epochs": 3, "snapshot_epochs": [2, 3]},
        "finetune": {"epochs": 1, "dropout_ratio": 0.5, "initial_learning_rate": 0.01},
        "split": {"train": 0.5, "validation": 0.0, "test": 0.5, "stratified": True},
        "preprocess": {"target_size": 24},
        "dataset": {"class_names": CLASSES},
    }
    path.write_text(json.dumps(document))
    return str(path)


def run(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured


def stdout_json(captured):
    return json.loads(captured.out)


def stderr_json(captured):
    lines = [line for line in captured.err.splitlines() if line.startswith("{")]
    return json.loads(lines[-1])


@pytest.fixture
def corpus(tmp_path, capsys):
    code, captured = run(capsys, "synth", str(tmp_path / "corpus"), "--classes", "3", "--per-class", "6",
                         "--size", "24", "--seed", "0")
    assert code == 0
    return stdout_json(captured)["manifest"]


@pytest.fixture
def trained(tmp_path, capsys, corpus):
    config = small_run_config(tmp_path / "run.json")
    code, captured = run(capsys, "train", "--config", config, "--manifest", corpus,
                         "--set", f"runs_dir={tmp_path / 'runs'}")
    assert code == 0, captured.err
    return config, stdout_json(captured)


def test_synth_reports_balanced_corpus(tmp_path, capsys):
    code, captured = run(capsys, "synth", str(tmp_path / "c"), "--classes", "2", "--per-class", "3", "--size", "20")
    assert code == 0
    response = stdout_json(captured)
    assert response["samples"] == 6
    assert response["class_counts"] == {"Homogeneous": 3, "Speckled": 3}
    assert os.path.isfile(response["manifest"])


def test_augment_writes_every_rotation(tmp_path, capsys):
    run(capsys, "synth", str(tmp_path / "c"), "--classes", "2", "--per-class", "5", "--size", "24")
    code, captured = run(capsys, "augment", "--manifest", str(tmp_path / "c" / "manifest.csv"),
                         "--out", str(tmp_path / "aug"), "--angle-step", "9", "--set", "preprocess.target_size=24")
    assert code == 0, captured.err
    response = stdout_json(captured)
    assert (response["inputs"], response["outputs"], response["variants_per_image"]) == (10, 400, 40)
    assert len(pd.read_csv(response["manifest"])) == 400


def test_preprocess_keeps_one_image_per_sample(tmp_path, capsys, corpus):
    code, captured = run(capsys, "preprocess", "--manifest", corpus, "--out", str(tmp_path / "pre"),
                         "--set", "preprocess.target_size=24")
    assert code == 0, captured.err
    assert stdout_json(captured)["outputs"] == 18


def test_train_writes_snapshots_and_report(trained):
    _, response = trained
    assert response["epochs"] == 3
    assert [os.path.basename(p) for p in response["snapshots"]] == ["epoch_002.cnet", "epoch_003.cnet"]
    assert os.path.isfile(os.path.join(response["run_dir"], "config.json"))

    report = os.path.join(response["run_dir"], "report")
    counts = pd.read_csv(os.path.join(report, "confusion_counts.csv"), index_col="true_class")
    assert list(counts.index) == CLASSES and counts.to_numpy().sum() == 9
    summary = metrics.read_summary(os.path.join(report, "summary.csv"))
    assert summary["mca"] == metrics.mca(ConfusionMatrix.from_counts(counts.to_numpy()))
    assert summary["mca"] == response["test_mca"]
    curve = pd.read_csv(os.path.join(report, "learning_curve.csv"))
    assert curve["epoch"].tolist() == [1, 2, 3]


def test_eval_and_predict_with_snapshot_ensemble(tmp_path, capsys, corpus, trained):
    config, response = trained
    code, captured = run(capsys, "eval", "--config", config, "--models", *response["snapshots"],
                         "--manifest", corpus, "--out", str(tmp_path / "eval"))
    assert code == 0, captured.err
    evaluation = stdout_json(captured)
    assert evaluation["members"] == 2 and evaluation["rotations"] == 1
    assert 0.0 <= evaluation["mca"] <= 1.0
    predictions = pd.read_csv(tmp_path / "eval" / "predictions.csv")
    assert len(predictions) == 18 and set(predictions["true_label"]) == set(CLASSES)

    code, captured = run(capsys, "predict", "--config", config, "--models", response["snapshots"][-1],
                         "--input", os.path.join(os.path.dirname(corpus), "images"),
                         "--out", str(tmp_path / "pred.csv"), "--set", "inference.angle_step_degrees=90")
    assert code == 0, captured.err
    frame = pd.read_csv(tmp_path / "pred.csv")
    assert list(frame.columns) == ["image_id", "predicted_label"] + [f"p_{c}" for c in CLASSES]
    assert len(frame) == 18


def test_export_filters(tmp_path, capsys, trained):
    _, response = trained
    code, captured = run(capsys, "export-filters", "--model", response["snapshots"][0], "--layer", "1",
                         "--out", str(tmp_path / "filters"))
    assert code == 0, captured.err
    files = stdout_json(captured)["files"]
    assert len([f for f in files if f.endswith(".png")]) == 4


def test_finetune_with_scratch_comparison(tmp_path, capsys, corpus, trained):
    config, response = trained
    code, captured = run(capsys, "finetune", "--config", config, "--snapshot", response["snapshots"][-1],
                         "--manifest", corpus, "--compare-scratch", "--set", f"runs_dir={tmp_path / 'runs'}")
    assert code == 0, captured.err
    result = stdout_json(captured)
    assert result["run_dir"].endswith("finetune")
    assert "scratch_test_mca" in result and result["finetune_initial_loss"] is not None
    curve = pd.read_csv(os.path.join(result["run_dir"], "report", "learning_curve.csv"))
    assert set(curve["phase"]) == {"finetune", "scratch"}
    assert curve.loc[curve["phase"] == "finetune", "epoch"].tolist() == [0, 1]


def test_sweep_summary(tmp_path, capsys, corpus):
    config = small_run_config(tmp_path / "run.json")
    code, captured = run(capsys, "sweep", "--config", config, "--manifest", corpus, "--angle-steps", "360", "180",
                         "--set", f"runs_dir={tmp_path / 'runs'}", "--set", "trainer.max_epochs=2",
                         "--set", "trainer.snapshot_epochs=[2]")
    assert code == 0, captured.err
    summary = pd.read_csv(stdout_json(captured)["summary"])
    assert summary["rotations"].tolist() == [1, 2]
    assert summary["run_dir"].nunique() == 2


def test_failure_prints_error_line(tmp_path, capsys, corpus):
    code, captured = run(capsys, "eval", "--models", str(tmp_path / "missing.cnet"), "--manifest", corpus,
                         "--out", str(tmp_path / "eval"))
    assert code == 1
    error = stderr_json(captured)
    assert error["error"] == "model_format_error" and error["status"] == "error"
    assert captured.out == ""


def test_invalid_config_value_is_a_config_error(capsys, corpus):
    code, captured = run(capsys, "train", "--manifest", corpus, "--set", "trainer.mini_batch_size=0")
    assert code == 1
    assert stderr_json(captured)["error"] == "config_error"


def test_malformed_arguments_exit_two(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--no-such-flag"])
    assert exc.value.code == 2
    assert stderr_json(capsys.readouterr())["error"] == "usage_error"
