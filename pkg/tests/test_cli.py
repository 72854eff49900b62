import json

import pytest

from perfseer import __version__
from perfseer.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A 200-graph dataset and a short training run shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-dataset", "--n", "200", "--out", str(root / "ds"), "--seed", "5", "-q"]) == 0
    cfg = root / "train.json"
    cfg.write_text(json.dumps({"hidden": 16, "head_hidden": 16, "max_epochs": 4, "batch_size": 32}))
    code = main(["train", "--config", str(cfg), "--data", str(root / "ds"), "--out", str(root / "run"), "-q"])
    assert code == 0
    return root


def test_version(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_extract_happy_path(workspace, capsys):
    out = workspace / "pg.json"
    assert main(["extract", str(workspace / "ds" / "graphs" / "g00000.json"), "--phase", "infer",
                 "--out", str(out)]) == 0
    pg = json.loads(out.read_text())
    assert pg["u"]["phase"] == 0 and pg["V"]
    assert main(["extract", str(workspace / "ds" / "graphs" / "g00001.json"), "--batch", "3"]) == 0
    assert json.loads(capsys.readouterr().out)["u"]["batch_size"] == 3


def test_missing_input_is_data_error(tmp_path, capsys):
    assert main(["extract", str(tmp_path / "nope.json")]) == 2
    assert capsys.readouterr().err.startswith("error[2]:")


def test_usage_errors(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["train", "--data", "x"]) == 1
    assert "error[1]:" in capsys.readouterr().err


def test_bad_config_is_usage_error(workspace, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 3}))
    assert main(["train", "--config", str(cfg), "--data", str(workspace / "ds"), "--out", str(tmp_path / "r")]) == 1


def test_malformed_graph_is_data_error(tmp_path, capsys):
    bad = tmp_path / "g.json"
    bad.write_text('{"nodes": [{"id": 0, "kind": "LSTM"}], "edges": [], "input_shape": [1, 3, 8, 8]}')
    assert main(["extract", str(bad)]) == 2
    assert "LSTM" in capsys.readouterr().err


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("best.bin", "best.json", "norm_stats.json", "history.csv", "report.json", "report.txt",
                 "predictions.csv", "split.json", "figures/history.png", "figures/predictions.png"):
        assert (run / name).is_file(), name
    report = json.loads((run / "report.json").read_text())
    assert set(report["targets"]) == {"infer_time"}
    assert report["num_samples"] == 50
    assert len((run / "history.csv").read_text().splitlines()) == 1 + 4


def test_predict(workspace, capsys):
    pg = workspace / "pg_train.json"
    assert main(["extract", str(workspace / "ds" / "graphs" / "g00002.json"), "--out", str(pg)]) == 0
    assert main(["predict", str(pg), "--ckpt", str(workspace / "run" / "best.bin"), "--metric", "infer_time",
                 "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["metric"] == "infer_time" and out["value"] > 0 and out["unit"] == "s"
    # a raw graph file is featurized on the fly
    assert main(["predict", str(workspace / "ds" / "graphs" / "g00002.json"),
                 "--ckpt", str(workspace / "run" / "best.bin")]) == 0
    assert capsys.readouterr().out.startswith("infer_time\t")
    assert main(["predict", str(pg), "--ckpt", str(workspace / "run" / "best.bin"), "--metric", "train_mem"]) == 2


def test_evaluate_matches_training_report(workspace, tmp_path, capsys):
    assert main(["evaluate", "--ckpt", str(workspace / "run" / "best.bin"), "--split", "test",
                 "--out", str(tmp_path), "--no-figures", "--json"]) == 0
    out = capsys.readouterr().out
    assert "MAPE%" in out
    assert (tmp_path / "report.json").read_bytes() == (workspace / "run" / "report.json").read_bytes()
    assert main(["evaluate", "--ckpt", str(workspace / "run" / "best.bin"), "--split", "holdout"]) == 1


def test_log_file_has_timestamps(workspace, tmp_path):
    log = tmp_path / "log.txt"
    assert main(["-v", "--log-file", str(log), "extract", str(workspace / "ds" / "graphs" / "g00000.json"),
                 "--out", str(tmp_path / "pg.json")]) == 0
    line = log.read_text().splitlines()[0]
    assert line[:4].isdigit() and "extracted" in line


def test_same_seed_same_artifacts(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-dataset", "--n", "12", "--out", str(tmp_path / name / "ds"), "--seed", "9"]) == 0
        assert main(["train", "--data", str(tmp_path / name / "ds"), "--out", str(tmp_path / name / "run"),
                     "--max-epochs", "2", "--seed", "9", "-q"]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "split.json")
    assert files
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
