import json
import subprocess
import sys

import pytest

from shapereg.cli import main
from shapereg.experiment import read_ablation

TINY = {
    "model": "pointnet",
    "head": "disp",
    "epochs": 1,
    "n_initial_shapes": 1,
    "encoder": {"widths": [4, 8, 8, 8]},
    "gnn": {"feature_dim": 8, "input_dim": 8, "attn_hidden": 4, "k_neighbors": 4, "pointnet_hidden": [8, 8]},
    "decoder_channels": 4,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "data.json").write_text(json.dumps({"n_train": 4, "n_test": 2}))
    assert main(["-q", "generate-data", "--config", str(root / "data.json"), "--out", str(root / "data"), "--seed", "3"]) == 0
    runs = []
    for model in ("pointnet", "pixel_baseline", "mean_shape"):
        cfg = root / f"{model}.json"
        cfg.write_text(json.dumps(dict(TINY, model=model)))
        out = root / model
        assert main(["-q", "train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(out)]) == 0
        runs.append(out)
    return root, runs


def test_generate_writes_dataset(workspace):
    root, _ = workspace
    man = json.loads((root / "data" / "manifest.json").read_text())
    assert man["n_samples"] == 6 and man["seed"] == 3
    assert len(list((root / "data" / "images").glob("*.pgm"))) == 6


def test_train_writes_run_files(workspace):
    _, runs = workspace
    for run in runs:
        assert {"weights.bin", "report.json", "history.csv", "config.json"} <= {p.name for p in run.iterdir()}
        report = json.loads((run / "report.json").read_text())
        assert set(report) == {"model", "structures", "average", "n_evaluations", "loss_history", "val_loss_history", "lr_history"}


def test_evaluate_reproduces_training_report(workspace, tmp_path):
    root, runs = workspace
    out = tmp_path / "report.json"
    assert main(["-q", "evaluate", "--weights", str(runs[0] / "weights.bin"), "--data", str(root / "data"), "--out", str(out)]) == 0
    fresh = json.loads(out.read_text())
    trained = json.loads((runs[0] / "report.json").read_text())
    assert fresh["average"] == trained["average"] and fresh["structures"] == trained["structures"]


def test_ablate_writes_csv(workspace, tmp_path):
    root, runs = workspace
    out = tmp_path / "ablation.csv"
    args = ["-q", "ablate", "--runs", ",".join(map(str, runs)), "--data", str(root / "data"), "--out", str(out)]
    assert main(args + ["--seeds", "0,1", "--fractions", "0,0.5,1"]) == 0
    rows = read_ablation(out)
    assert len(rows) == 3 * 3 * 2
    assert {r.model for r in rows} == {"pointnet-disp", "pixel_baseline", "mean_shape"}


def test_unknown_config_key_is_reported(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"optimizer": "sgd"}))
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert "optimizer" in capsys.readouterr().err


def test_missing_dataset_is_reported(tmp_path, capsys):
    assert main(["evaluate", "--weights", str(tmp_path / "w.bin"), "--data", str(tmp_path / "nope"), "--out", "r.json"]) == 2
    assert "manifest.json" in capsys.readouterr().err


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "shapereg.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("generate-data", "train", "evaluate", "ablate"):
        assert cmd in res.stdout
