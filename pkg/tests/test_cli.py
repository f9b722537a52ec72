import subprocess
import sys

import numpy as np
import pytest

from codistill.cli import build_parser, main
from codistill.teachers import read_features

from test_trainer import SMALL


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return p


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_unknown_subcommand_exits_2_with_usage():
    proc = subprocess.run([sys.executable, "-m", "codistill", "frobnicate"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "usage:" in proc.stderr


def test_help_lists_every_subcommand():
    text = build_parser().format_help()
    for cmd in ("distill", "gradcheck", "probe", "dump-features", "analyze"):
        assert cmd in text


def test_distill_then_analyses(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run(["distill", cfg_path, "--out", out], capsys)
    assert code == 0 and "final_total=" in stdout
    assert (out / "config.echo").exists() and (out / "ckpt-000006.bin").exists()

    code, stdout, _ = run(["analyze", "losscorr", out / "log.csv", "--pair", "ta,tb"], capsys)
    assert code == 0 and -1.0 <= float(stdout.strip()) <= 1.0

    feats = out / "features-ta.bin"
    code, _, _ = run(["dump-features", cfg_path, "ta", feats], capsys)
    assert code == 0 and len(read_features(feats)) == 12

    code, _, _ = run(["dump-features", cfg_path, "proj:tb", out / "features-proj.bin",
                      "--checkpoint", out / "ckpt-000006.bin", "--dataset", "b"], capsys)
    ff = read_features(out / "features-proj.bin")
    assert code == 0 and ff.width == 16 and len(ff) == 6

    code, _, _ = run(["analyze", "pca", feats, "--pool", "all", "--out", out / "analysis-pca.csv"], capsys)
    rows = (out / "analysis-pca.csv").read_text().splitlines()
    assert code == 0 and rows[0] == "components,cumulative_explained_variance" and len(rows) == 9

    code, stdout, err = run(["analyze", "attn", cfg_path, out / "ckpt-000006.bin", "--k", "3"], capsys)
    assert code == 0 and stdout.splitlines()[0] == "map_index,cluster" and "cost=" in err

    code, stdout, _ = run(["probe", cfg_path, out / "ckpt-000006.bin", "--epochs", "20"], capsys)
    assert code == 0 and stdout.startswith("accuracy=")


def test_seed_override(tmp_path, cfg_path, capsys, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    monkeypatch.setenv("DUNE_SEED_OVERRIDE", "5")
    run(["distill", cfg_path, "--out", a, "--steps", "2"], capsys)
    run(["distill", cfg_path, "--out", b, "--steps", "2"], capsys)
    assert (a / "log.csv").read_bytes() == (b / "log.csv").read_bytes()
    assert "run.seed = 5" in (a / "config.echo").read_text()
    monkeypatch.setenv("DUNE_SEED_OVERRIDE", "seven")
    code, _, err = run(["distill", cfg_path, "--out", a], capsys)
    assert code == 1 and err.count("\n") == 1 and err.startswith("error: ConfigError:")


@pytest.mark.parametrize("argv", [
    ["analyze", "pca", "missing.bin"],
    ["analyze", "losscorr", "missing.csv"],
    ["distill", "missing.cfg"],
])
def test_errors_are_one_line(tmp_path, capsys, argv, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run(argv, capsys)
    assert code != 0 and err.count("\n") == 1 and err.startswith("error: ")


def test_bad_target(cfg_path, tmp_path, capsys):
    code, _, err = run(["dump-features", cfg_path, "nobody", tmp_path / "x.bin"], capsys)
    assert code == 1 and "unknown target" in err


def test_gradcheck_command(capsys):
    code, stdout, _ = run(["gradcheck"], capsys)
    assert code == 0 and "encoder+tp+loss" in stdout and "FAIL" not in stdout
