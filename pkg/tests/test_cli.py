import argparse
import json

import pytest
from PIL import Image

from condnerf.cli import build_parser, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset(workspace):
    out = workspace / "data"
    assert main(["synth-data", "--count", "24", "--seed", "1", "--out-dir", str(out)]) == 0
    return out


@pytest.fixture
def config_file(tiny_cfg, workspace):
    path = workspace / "tiny.json"
    path.write_text(json.dumps(tiny_cfg.to_dict()))
    return path


@pytest.fixture
def checkpoint(config_file, dataset, workspace, capsys):
    code = main(["train", "--config", str(config_file), "--manifest", str(dataset / "manifest.csv"),
                 "--iterations", "1", "--output-dir", str(workspace / "runs")])
    assert code == 0
    run_dir = capsys.readouterr().out.strip().splitlines()[-1]
    return f"{run_dir}/checkpoint_latest.pt"


def test_synth_data_reproducible(dataset, workspace):
    again = workspace / "again"
    assert main(["synth-data", "--count", "24", "--seed", "1", "--out-dir", str(again)]) == 0
    assert (again / "manifest.csv").read_text() == (dataset / "manifest.csv").read_text()
    assert (again / "000005.png").read_bytes() == (dataset / "000005.png").read_bytes()


def test_synth_data_invalid_spec(workspace):
    spec = workspace / "bad_spec.json"
    spec.write_text(json.dumps({"object_type": "triangle"}))
    assert main(["synth-data", "--spec", str(spec), "--out-dir", str(workspace / "x")]) == 2


def test_train_missing_dataset(config_file, workspace):
    assert main(["train", "--config", str(config_file), "--manifest", str(workspace / "missing.csv"),
                 "--output-dir", str(workspace / "runs")]) == 3


def test_train_bad_config(workspace, dataset):
    bad = workspace / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rate": 1}}))
    assert main(["train", "--config", str(bad), "--manifest", str(dataset)]) == 2
    assert main(["train", "--manifest", str(dataset), "--set", "train.batch_size=0"]) == 2


def test_train_zero_iterations(config_file, dataset, workspace, capsys):
    code = main(["train", "--config", str(config_file), "--manifest", str(dataset), "--iterations", "0",
                 "--output-dir", str(workspace / "runs0")])
    assert code == 0
    run_dir = workspace / "runs0"
    (run,) = list(run_dir.iterdir())
    assert sorted(p.name for p in run.glob("checkpoint_*.pt")) == ["checkpoint_0000000.pt", "checkpoint_latest.pt"]
    saved = json.loads((run / "config.json").read_text())
    assert saved["train"]["iterations"] == 0


def test_render_grids(checkpoint, workspace, capsys):
    out = str(workspace / "renders")
    assert main(["render", "rotation", "--checkpoint", checkpoint, "--seeds", "0,1", "--angles", "0,30,60",
                 "--output-dir", out]) == 0
    png = capsys.readouterr().out.strip().splitlines()[-1]
    side = json.loads(open(png.replace(".png", ".json")).read())
    assert side["cols"] == 3 and side["rows"] == 2
    assert Image.open(png).size == (3 * 16, 2 * 16)

    assert main(["render", "sweep", "--checkpoint", checkpoint, "--attr", "red", "--range", "0:3:7",
                 "--seeds", "0", "--output-dir", out]) == 0
    png = capsys.readouterr().out.strip().splitlines()[-1]
    assert json.loads(open(png.replace(".png", ".json")).read())["cols"] == 7
    assert main(["render", "pose", "--control", "add-object", "--values=-0.5,0.5",
                 "--checkpoint", checkpoint, "--output-dir", out]) == 0


def test_render_errors(checkpoint, workspace, capsys):
    out = str(workspace / "renders")
    assert main(["render", "spiral", "--checkpoint", checkpoint, "--output-dir", out]) == 2
    assert "rotation" in capsys.readouterr().err  # the error lists valid kinds
    bad = workspace / "corrupt.pt"
    bad.write_bytes(b"\x00garbage")
    assert main(["render", "rotation", "--checkpoint", str(bad), "--output-dir", out]) == 2
    assert main(["render", "sweep", "--attr", "green", "--checkpoint", checkpoint, "--output-dir", out]) == 2


def test_eval_fid(checkpoint, dataset, workspace, capsys):
    out = str(workspace / "fid")
    with pytest.warns(UserWarning, match="using 24"):
        assert main(["eval-fid", "--checkpoint", checkpoint, "--manifest", str(dataset), "--count", "1000",
                     "--output-dir", out]) == 0
    capsys.readouterr()
    assert main(["eval-fid", "--self-test", "--manifest", str(dataset), "--count", "24",
                 "--output-dir", out]) == 0
    text = capsys.readouterr().out
    report = json.loads(text[text.index("{"):])
    assert report["fid"] < 1e-6
    assert set(report["per_class"]) == {"red", "blue"}


def test_inspect(checkpoint, capsys):
    assert main(["inspect", "--checkpoint", checkpoint]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["iteration"] == 1 and info["attributes"] == ["red", "blue"]


def test_help_documents_every_flag():
    parser = build_parser()
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sub in subs.choices.items():
        for action in sub._actions:
            if action.dest != "help":
                assert action.help, f"{name}: {action.dest} lacks help text"
