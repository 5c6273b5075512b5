import csv
import json

import pytest
import yaml

from uapkit import pipeline
from uapkit.cli import main
from uapkit.core import read_uapf, read_uapf_raw
from uapkit.saliency import read_attention


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny PNG dataset plus a registry with two one-epoch CNNs."""
    ws = tmp_path_factory.mktemp("ws")
    data = ws / "data"
    assert main(["dataset", "synth", "--out", str(data), "--per-class", "8", "--size", "16"]) == 0
    reg = ws / "models"
    for mid, seed in (("cnn_a", 0), ("cnn_b", 1)):
        assert main(["model", "train", "--data", str(data), "--train-per-class", "4",
                     "--registry", str(reg), "--id", mid, "--width", "4", "--epochs", "1",
                     "--seed", str(seed)]) == 0
    return ws


def _config(ws, out, **overrides):
    cfg = {
        "dataset": {"root": str(ws / "data"), "split_seed": 0, "train_per_class": 4},
        "models": {"registry": str(ws / "models"), "target": "cnn_a"},
        "generator": {"depth": 2, "base_channels": 4},
        "train": {"epochs": 2, "batch_size": 8, "epsilon": 10.0},
        "eval": {"noise_seeds": [0, 1], "sweep_norms": [50.0, 100.0], "transfer_models": ["cnn_b"]},
        "output": {"dir": str(out), "resume": True},
    }
    for section, values in overrides.items():
        cfg[section] = {**cfg.get(section, {}), **values}
    path = out.parent / f"{out.name}.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_model_list(workspace, capsys):
    assert main(["model", "list", "--registry", str(workspace / "models")]) == 0
    out = capsys.readouterr().out
    assert "cnn_a" in out and "cnn_b" in out


def test_pipeline_artifacts_and_resume(workspace, monkeypatch):
    out = workspace / "run"
    cfg = _config(workspace, out)
    assert main(["pipeline", "run", "--config", str(cfg)]) == 0
    for name in ("mid.uapf", "fin.uapf", "attn.uapf", "report.json", "report.csv", "sweep.csv",
                 "transfer.csv", "selectivity.csv", "train_log.json", "generator.pt.json"):
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    assert [r["refinement"] for r in report["rows"]] == ["without", "with"]
    assert report["config_snapshot"]["config"]["train"]["epochs"] == 2
    assert report["config_snapshot"]["config"]["generator"]["noise_seed"] == 0
    assert read_uapf(out / "mid.uapf")[0].stage == "mid"
    assert read_uapf(out / "fin.uapf")[0].stage == "fin"
    assert read_attention(out / "attn.uapf").num_sources == 40

    def boom(*a, **k):
        raise AssertionError("retrained on resume")

    monkeypatch.setattr(pipeline, "train_uap", boom)
    monkeypatch.setattr(pipeline, "attention_image", boom)
    before = (out / "mid.uapf").read_bytes()
    (out / "report.json").unlink()
    assert pipeline.run_pipeline(cfg) == 0
    assert (out / "mid.uapf").read_bytes() == before
    assert (out / "report.json").exists()


def test_pipeline_reproducible(workspace, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    outs = []
    for name in ("rep1", "rep2"):
        out = workspace / name
        assert pipeline.run_pipeline(_config(workspace, out)) == 0
        outs.append(out)
    for art in ("mid.uapf", "fin.uapf", "attn.uapf"):
        assert (outs[0] / art).read_bytes() == (outs[1] / art).read_bytes()
    rows = [json.loads((o / "report.json").read_text())["rows"] for o in outs]
    assert rows[0] == rows[1]


def test_pipeline_missing_model_is_startup_error(workspace):
    out = workspace / "bad"
    cfg = _config(workspace, out, models={"target": "nope"})
    assert pipeline.run_pipeline(cfg) == 2
    assert not (out / "mid.uapf").exists()


def test_pipeline_stage_failure_writes_error(workspace):
    out = workspace / "fail"
    cfg = _config(workspace, out, refine={"alpha": 1.2, "beta": 0.8, "T": None, "reproject": True},
                  train={"epochs": 1})
    # a corrupt mid artifact is picked up on resume and fails the train stage
    out.mkdir()
    (out / "mid.uapf").write_bytes(b"junk")
    assert pipeline.run_pipeline(cfg) == 1
    err = json.loads((out / "error.json").read_text())
    assert err["stage"] == "train"


def test_config_unknown_keys_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"train": {"lr": 0.1}}))
    with pytest.raises(pipeline.ConfigError):
        pipeline.load_config(path)


def test_cli_conflicting_flag_is_error(workspace, tmp_path):
    cfg = _config(workspace, tmp_path / "x")
    code = main(["train", "--config", str(cfg), "--model", "cnn_b", "--out", str(tmp_path / "m.uapf")])
    assert code == 2
    assert not (tmp_path / "m.uapf").exists()


def test_cli_stage_commands(workspace, tmp_path):
    ws = workspace
    data = ["--data", str(ws / "data"), "--train-per-class", "4", "--registry", str(ws / "models")]
    cfg = tmp_path / "train.yaml"
    mid = tmp_path / "mid.uapf"
    cfg.write_text(yaml.safe_dump({"dataset": {"train_per_class": 4},
                                   "generator": {"depth": 2, "base_channels": 4},
                                   "train": {"epochs": 1, "batch_size": 8}}))
    assert main(["train", "--config", str(cfg), "--model", "cnn_a", "--data", str(ws / "data"),
                 "--registry", str(ws / "models"), "--out", str(mid)]) == 0
    attn = tmp_path / "attn.uapf"
    assert main(["saliency", *data, "--model", "cnn_a", "--layer", "conv3", "--out", str(attn),
                 "--png", str(tmp_path / "attn.png")]) == 0
    fin = tmp_path / "fin.uapf"
    assert main(["refine", "--in", str(mid), "--attn", str(attn), "--alpha", "1.2", "--beta", "0.8",
                 "--out", str(fin)]) == 0
    header, _ = read_uapf_raw(fin)
    assert header["stage"] == "fin"
    assert main(["eval", *data, "--model", "cnn_a", "--uapf", str(fin), "--out", str(tmp_path / "e.json")]) == 0
    assert json.loads((tmp_path / "e.json").read_text())["model_id"] == "cnn_a"
    assert main(["transfer", *data, "--uapf", str(mid), "--models", "cnn_a", "cnn_b",
                 "--out", str(tmp_path / "t.json")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert [(r["source"], r["target"]) for r in rows] == [("cnn_a", "cnn_a"), ("cnn_a", "cnn_b")]
    assert main(["selectivity", *data, "--model", "cnn_a", "--uapf", str(fin),
                 "--out", str(tmp_path / "s.json")]) == 0
    assert len(list(csv.DictReader(open(tmp_path / "s.csv")))) == 10
    assert main(["sweep", *data, "--model", "cnn_a", "--uapf", str(fin), "--norms", "10", "100",
                 "--out", str(tmp_path / "w.json")]) == 0
    assert [float(r["norm"]) for r in csv.DictReader(open(tmp_path / "w.csv"))] == [10.0, 100.0]


def test_cli_dataset_commands(workspace, tmp_path):
    m = tmp_path / "m.json"
    assert main(["dataset", "ingest", "--root", str(workspace / "data"), "--train-per-class", "3",
                 "--out", str(m)]) == 0
    m2 = tmp_path / "m2.json"
    assert main(["dataset", "split", "--manifest", str(m), "--split-seed", "9", "--out", str(m2)]) == 0
    a, b = json.loads(m.read_text()), json.loads(m2.read_text())
    assert a["split_seed"] == 0 and b["split_seed"] == 9 and b["train_per_class"] == 3
