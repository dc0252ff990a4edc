import json

import pytest

from protoground.cli import build_parser, main
from protoground.scenes import read_manifest

SMALL = [
    "--dim", "16", "--heads", "2", "--ff-dim", "32", "--visual-layers", "1", "--language-layers", "1",
    "--reg-layers", "1", "--bank-size", "8", "--n-train", "32", "--n-val", "16", "--n-test", "16",
    "--n-openvocab", "16", "--batch-size", "16", "--epochs", "1", "--freeze-epochs", "0", "--decay-epoch", "1",
]


def test_generate_data(tmp_path, capsys):
    assert main(["generate-data", "--n-train", "5", "--n-val", "3", "--n-test", "2", "--n-openvocab", "2", "--out", str(tmp_path)]) == 0
    records = read_manifest(tmp_path / "manifest_train.jsonl")
    assert len(records) == 5
    assert len(read_manifest(tmp_path / "manifest_test-openvocab.jsonl")) == 2


def test_train_evaluate_heatmaps(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--seed", "0", "--out", str(run), *SMALL]) == 0
    final = json.loads(capsys.readouterr().out)
    assert set(final) == {"val-standard", "test-standard", "test-openvocab"}

    assert main(["evaluate", "--run", str(run), "--split", "test-openvocab", "--out", str(tmp_path / "ev")]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["accuracy"] == final["test-openvocab"]["accuracy"]

    assert main(["export-heatmaps", "--run", str(run), "--count", "2", "--out", str(tmp_path / "maps")]) == 0
    names = {p.name for p in (tmp_path / "maps").iterdir()}
    assert sum(n.endswith("_coeff.png") for n in names) == 2
    assert sum(n.endswith("_phi.png") for n in names) == 2
    sidecar = json.loads(next((tmp_path / "maps").glob("*.json")).read_text())
    assert abs(sum(sidecar["phi"]) - 1) < 1e-5


def test_ablation_flags(tmp_path):
    args = build_parser().parse_args(["train", "--seed", "1", "--out", "x", "--no-use-pt", "--bank-size", "4"])
    from protoground.cli import _config_from_args

    cfg = _config_from_args(args)
    assert not cfg.ablation.use_pt and cfg.ablation.use_vd and cfg.bank_size == 4


def test_baseline(capsys):
    assert main(["baseline", "--split", "val-standard", "--n-val", "64"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert 0 <= out["random_box_accuracy"] < 0.2


def test_sweep(tmp_path, capsys):
    assert main(["sweep", "--seed", "0", "--axis", "layers", "--values", "1", "2", "--out", str(tmp_path), *SMALL]) == 0
    assert (tmp_path / "sweep_layers.json").exists()


def test_unknown_verb():
    with pytest.raises(SystemExit):
        main(["fly"])
