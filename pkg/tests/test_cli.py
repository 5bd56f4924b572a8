import json
import subprocess
import sys

import pandas as pd
import pytest

from adaptcf.cli import EXIT_CONFIG, EXIT_MISSING, main, run
from adaptcf.config import load_config, parse_override
from adaptcf.errors import ConfigError

SMALL = """
[run]
seed = 0
output_dir = out

[data]
source = synth
min_frames = 100

[synth]
corpus = sinusoid
n_pairs = 1
n_frames = 120

[bo]
n_init = 4
n_iter = 2

[gru]
hidden_dim = 4
epochs = 3
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(SMALL)
    return path


def test_unknown_subcommand(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code != 0
    assert run("frobnicate") == EXIT_CONFIG


def test_bad_config_names_field(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[gru]\nepochs = many\n")
    assert run("synth", str(path)) == EXIT_CONFIG
    assert "gru.epochs" in capsys.readouterr().err
    path.write_text("[gru]\nepoch = 3\n")
    assert run("synth", str(path)) == EXIT_CONFIG
    assert "gru.epoch" in capsys.readouterr().err


def test_missing_artifact_names_stage(small_cfg, capsys):
    assert run("label", str(small_cfg)) == EXIT_MISSING
    err = capsys.readouterr().err
    assert "trajectories.csv" in err and "run `adaptcf ingest` first" in err
    assert run("ingest", str(small_cfg)) == EXIT_MISSING
    assert "run `adaptcf synth` first" in capsys.readouterr().err


def test_override_parsing():
    assert parse_override("gru.epochs=7") == ("gru", "epochs", "7")
    with pytest.raises(ConfigError):
        parse_override("epochs=7")
    cfg = load_config(None, ["gru.epochs=7", "bo.n_iter=3"])
    assert cfg.training.epochs == 7 and cfg.bo.n_iter == 3
    with pytest.raises(ConfigError):
        load_config(None, ["nosuch.key=1"])


def test_pipeline_and_manifest(small_cfg):
    for cmd in ("synth", "ingest", "pairs", "label", "calibrate-fixed", "train", "simulate", "evaluate",
                "report"):
        assert run(cmd, str(small_cfg)) == 0, cmd
    out = small_cfg.parent / "out"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0 and len(manifest["config_hash"]) == 64
    stages = manifest["stages"]
    assert stages["train"]["inputs"]["labels.csv"] == stages["label"]["outputs"]["labels.csv"]
    assert "gru_model.json" in stages["train"]["outputs"]
    ev = pd.read_csv(out / "evaluation.csv")
    assert ev[["leader_id", "follower_id"]].values.tolist() == [[1, 2]]
    sims = pd.read_csv(out / "simulations.csv")
    assert set(sims.columns) >= {"frame", "real", "default", "fixed", "proposed"}
    assert (out / "report" / "summary.txt").is_file()


def test_score_style_corpus(tmp_path):
    path = tmp_path / "style.ini"
    path.write_text("[run]\noutput_dir = out\n[synth]\ncorpus = style\nn_pairs = 94\nn_frames = 750\n")
    for cmd in ("synth", "ingest", "pairs", "score"):
        assert run(cmd, str(path)) == 0
    scores = pd.read_csv(tmp_path / "out" / "scores.csv")
    assert scores["cluster"].value_counts().sort_index().tolist() == [24, 46, 24]
    meta = json.loads((tmp_path / "out" / "scores.json").read_text())
    assert meta["cluster_sizes"] == [24, 46, 24]


def test_console_entry_point(small_cfg):
    proc = subprocess.run([sys.executable, "-m", "adaptcf.cli", "pairs", "-c", str(small_cfg)],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_MISSING
    assert "adaptcf ingest" in proc.stderr
