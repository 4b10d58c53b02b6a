import json

import pytest

from mgvos import cli
from mgvos.gradcheck import CheckResult
from mgvos.synth import load_dataset

TINY = [
    "--set", "network.widths=2,4,4,4", "--set", "network.input_size=32,32", "--set", "network.cascade=2",
    "--set", "synth.height=32", "--set", "synth.width=32", "--set", "synth.length=3",
    "--set", "synth.size_range=4,6", "--set", "data.train_clips=2", "--set", "data.eval_clips=2",
]


@pytest.mark.parametrize("text,want", [
    ("3", 3), ("0.5", 0.5), ("1e-4", 1e-4), ("true", True), ("Off", False), ("none", None),
    ("", None), ("8,16, 32", (8, 16, 32)), ("64,", (64,)), ("progressive", "progressive"),
])
def test_parse_value(text, want):
    assert cli.parse_value(text) == want


def test_load_settings_file_and_overrides(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[network]\nk = 5\nwidths = 4,8,8,8\n[train]\nlr_encoder = 0.002\n")
    s = cli.load_settings(ini, ["network.k=7", "train.epochs=1"])
    assert s["network"] == {"k": 7, "widths": (4, 8, 8, 8)}
    assert s["train"] == {"lr_encoder": 0.002, "epochs": 1}
    assert cli.network_config(s).k == 7
    assert cli.train_config(s).lr_encoder == 0.002


@pytest.mark.parametrize("bad", ["network.k", "k=3", "model.k=3"])
def test_bad_override(bad):
    with pytest.raises(ValueError):
        cli.load_settings(None, [bad])


def test_unknown_key_and_section(tmp_path):
    with pytest.raises(ValueError, match="kernel"):
        cli.network_config(cli.load_settings(None, ["network.kernel=3"]))
    ini = tmp_path / "bad.ini"
    ini.write_text("[optimizer]\nlr = 1\n")
    assert cli.main(["flops", "--config", str(ini)]) == 2
    assert cli.main(["flops", "--config", str(tmp_path / "missing.ini")]) == 2
    assert cli.main(["flops", "--set", "network.k=4"]) == 2  # even window rejected


def test_flops_command(tmp_path, capsys):
    assert cli.main(["flops", "--shape", "8x8x16", "--breakdown", "--out", str(tmp_path)]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 5
    user = rows[-1]
    assert user["reading"] == "user" and user["co_similarity"] == 64 * 64 * 8
    assert (tmp_path / "flops.csv").exists()


def test_synth_command(tmp_path, capsys):
    assert cli.main(["synth", *TINY, "--out", str(tmp_path / "ds"), "--clips", "2", "--seed", "5"]) == 0
    clips = load_dataset(tmp_path / "ds")
    assert len(clips) == 2 and clips[0].frames[0].shape == (3, 32, 32)
    assert "wrote 2 clips" in capsys.readouterr().out


def test_gradcheck_exit_codes(monkeypatch, capsys):
    assert cli.main(["gradcheck", "--component", "relu", "--seeds", "2"]) == 0
    assert "2/2 checks passed" in capsys.readouterr().out
    monkeypatch.setattr(cli, "run_gradcheck",
                        lambda *a, **k: [CheckResult("fake", 1.0, 1e-4, 10, 0)])
    assert cli.main(["gradcheck"]) == 1


def test_bench_command(capsys):
    argv = ["bench", "--component", "co_attention", "--shape", "1,4,4,4", "--warmup", "1", "--rounds", "5", "--drop", "1"]
    assert cli.main(argv) == 0
    row = json.loads(capsys.readouterr().out)[0]
    assert row["rounds"] == 5 and row["trimmed"] == 1 and row["trimmed_mean_ms"] > 0


def test_train_then_eval(tmp_path, capsys):
    run = tmp_path / "run"
    assert cli.main(["train", *TINY, "--set", "train.steps=2", "--out", str(run), "--eval"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out["metrics"]) == {"R", "F", "RF", "MAE", "Fbeta"}
    assert (run / "model.npz").exists() and (run / "metrics.json").exists()
    assert json.loads((run / "run.json").read_text())["metrics"]["mean"] == out["metrics"]

    assert cli.main(["eval", *TINY, str(run / "model.npz"), "--out", str(tmp_path / "ev")]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[-1]["name"] == "mean"
    assert rows[-1]["R"] == pytest.approx(out["metrics"]["R"])
    assert (tmp_path / "ev" / "metrics_table.csv").exists()


def test_eval_missing_data(tmp_path, capsys):
    assert cli.main(["eval", str(tmp_path / "nope.npz")]) == 2
    assert "nope.npz" in capsys.readouterr().err


def test_ablate_command(tmp_path, capsys):
    argv = ["ablate", *TINY, "--set", "train.steps=1", "--variants=full,-FG-U", "--seeds", "0", "--out", str(tmp_path)]
    assert cli.main(argv) == 0
    summary = json.loads(capsys.readouterr().out)
    assert [r["variant"] for r in summary] == ["full", "-FG-U"]
    assert (tmp_path / "ablation.json").exists() and (tmp_path / "ablation_summary.csv").exists()


def test_unknown_variant():
    with pytest.raises(SystemExit):
        cli.main(["ablate", "--variants=full,-XY"])
