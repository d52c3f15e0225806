from __future__ import annotations

import json

import pytest

from meshphys.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    code = main(["synth", "--out", str(root / "data"), "--faces", "40", "--duration", "9",
                 "--yaw", "5", "--amplitude", "0.05", "--suite", "1", "1", "1", "--seed", "3"])
    assert code == EXIT_OK
    cfg = root / "cfg.yaml"
    cfg.write_text("training: {epochs: 1, batch_size: 4, clip_length: 128}\n"
                   "architecture: {channels: [8, 16, 16], pool_layers: [2, 3], smooth_layer: 3}\n"
                   "objective: {max_shift: 0, smooth_layer: 3}\n")
    return root


def test_synth_single_video(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "v"), "--faces", "40", "--duration", "1"]) == 0
    entry = json.loads(capsys.readouterr().out)
    assert entry["pulse_rate_bpm"] == pytest.approx(72.0)


def test_build_train_eval(suite, capsys):
    man = str(suite / "data" / "manifest.json")
    cfg = str(suite / "cfg.yaml")
    assert main(["build", "--manifest", man, "--cache", str(suite / "cache")]) == EXIT_OK
    assert capsys.readouterr().out.count("built id=") == 3
    assert main(["train", "--manifest", man, "--out", str(suite / "run"), "--config", cfg,
                 "--set", "data.edges=self_only"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("checkpoint ")
    ckpt = out.split()[1]
    report = str(suite / "report.json")
    assert main(["eval", "--checkpoint", ckpt, "--manifest", man, "--json", report]) == EXIT_OK
    text = capsys.readouterr().out
    assert "summary level=clip" in text and "summary level=video" in text
    assert json.load(open(report))["clip_metrics"]["n"] == 2


def test_ablate(suite, capsys):
    matrix = suite / "m.yaml"
    matrix.write_text("- {name: sv, overrides: {data.edges: shared_vertex}}\n"
                      "- {name: self, overrides: {data.edges: self_only}}\n")
    code = main(["ablate", "--matrix", str(matrix), "--manifest",
                 str(suite / "data" / "manifest.json"), "--out", str(suite / "abl"),
                 "--config", str(suite / "cfg.yaml")])
    assert code == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("variant") and len(lines) == 3


def test_exit_codes(tmp_path, suite):
    assert main([]) == EXIT_USAGE
    assert main(["train", "--manifest"]) == EXIT_USAGE
    assert main(["train", "--manifest", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_DATA
    assert main(["train", "--manifest", str(suite / "data" / "manifest.json"), "--out",
                 str(tmp_path), "--set", "data.bogus=1"]) == EXIT_USAGE
    assert main(["train", "--manifest", str(suite / "data" / "manifest.json"), "--out",
                 str(tmp_path), "--set", "noequals"]) == EXIT_USAGE
    assert main(["synth", "--out", str(tmp_path / "x"), "--f0", "5"]) == EXIT_USAGE
    assert main(["eval", "--checkpoint", str(tmp_path / "none.mph"), "--manifest",
                 str(suite / "data" / "manifest.json")]) == EXIT_DATA


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--seeds", "1", "--tol", "0"]) == EXIT_NUMERIC
