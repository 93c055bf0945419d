"""Command-line interface tests: exit codes, output files, config-file
merging, and run-to-run determinism."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

import helpers
from specstream.cli import main, parse_args


@pytest.fixture(scope="module")
def stream_csv(tmp_path_factory):
    src, dst, t, labels, feats = helpers.separable_stream(500, 8, seed=5)
    path = tmp_path_factory.mktemp("data") / "stream.csv"
    path.write_text(helpers.stream_csv_lines(src, dst, t, labels, feats))
    return path


def _train_argv(stream_csv: Path, out: Path, **overrides) -> list:
    flags = {
        "--data": str(stream_csv), "--out": str(out), "--batch-size": "100",
        "--epochs": "2", "--lr": "0.001", "--seed": "1", "--d-mem": "8",
        "--d-embed": "8", "--hidden": "8", "--rank-lo": "8", "--rank-hi": "8",
        "--cheb-order": "8", "--levels": "1", "--patience": "5",
    }
    flags.update(overrides)
    argv = ["train"]
    for key, value in flags.items():
        argv.extend([key, value])
    return argv


# ---------------------------------------------------------------------------
# Exit codes.
# ---------------------------------------------------------------------------


def test_missing_data_flag_exits_2(capsys):
    assert main(["train"]) == 2
    assert "--data" in capsys.readouterr().err


def test_nonexistent_data_file_exits_2_and_names_path(capsys):
    assert main(["train", "--data", "/no/such/file.csv"]) == 2
    assert "/no/such/file.csv" in capsys.readouterr().err


def test_unknown_command_exits_2(capsys):
    assert main(["frobnicate"]) == 2


def test_malformed_csv_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("user_id,item_id,timestamp,state_label,f0\n1,2,0.0,0,oops\n")
    assert main(["train", "--data", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "error" in err


def test_eval_requires_checkpoint(capsys):
    assert main(["eval"]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_eval_missing_checkpoint_exits_2(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "no.npz"),
                 "--data", str(tmp_path / "no.csv")]) == 2
    assert "no.npz" in capsys.readouterr().err


def test_framelet_check_passes_with_adequate_order(capsys):
    assert main(["framelet-check", "--cheb-order", "16", "--levels", "2",
                 "--graphs", "4", "--max-nodes", "20", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3
    assert "FAIL" not in out


def test_framelet_check_fails_with_tiny_order(capsys):
    assert main(["framelet-check", "--cheb-order", "2", "--levels", "2",
                 "--graphs", "4", "--max-nodes", "20", "--seed", "0"]) == 1
    assert "FAIL" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# Config-file handling.
# ---------------------------------------------------------------------------


def test_config_file_supplies_defaults_and_flags_win(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# training defaults\n"
        "batch-size = 250\n"
        "lr = 0.001\n"
        "epochs = 7\n"
    )
    args = parse_args(["train", "--config", str(cfg), "--lr", "0.01"])
    assert args.batch_size == 250
    assert args.lr == 0.01  # explicit flag beats the file
    assert args.epochs == 7


def test_config_file_unknown_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("warp-speed = 9\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "warp-speed" in capsys.readouterr().err


def test_config_file_bad_value_exits_2(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = banana\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "epochs" in capsys.readouterr().err


def test_config_file_missing_exits_2(capsys):
    assert main(["train", "--config", "/no/such.cfg"]) == 2
    assert "/no/such.cfg" in capsys.readouterr().err


def test_config_file_missing_equals_exits_2(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "key = value" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# Training and evaluation runs.
# ---------------------------------------------------------------------------


def test_train_writes_outputs(stream_csv, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(_train_argv(stream_csv, out)) == 0
    stdout = capsys.readouterr().out
    assert "parameters:" in stdout and "best epoch:" in stdout

    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,precision,roc_auc,loss,seconds"
    summary = json.loads((out / "summary.json").read_text())
    assert len(lines) == 1 + 3 * summary["epochs_run"]
    for row in lines[1:]:
        fields = row.split(",")
        assert len(fields) == 6
        assert fields[1] in ("train", "val", "test")

    assert summary["epochs_run"] == 2
    assert summary["n_events"] == 500
    assert summary["parameter_count"] > 0
    assert summary["backend"] in ("compiled", "python")
    assert summary["encoder_rank"] == 8
    assert set(summary["splits"]) == {"train", "val", "test"}
    for split in summary["splits"].values():
        assert set(split) == {"precision", "roc_auc", "n_pos", "n_neg", "loss"}
        assert 0.0 <= split["roc_auc"] <= 1.0
    assert summary["config"]["batch_size"] == 100
    assert (out / "checkpoint.npz").is_file()


def test_eval_reproduces_training_reports(stream_csv, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(_train_argv(stream_csv, out)) == 0
    summary = json.loads((out / "summary.json").read_text())
    capsys.readouterr()

    eval_out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(out / "checkpoint.npz"),
                 "--data", str(stream_csv), "--out", str(eval_out)]) == 0
    stdout = capsys.readouterr().out
    payload = json.loads(stdout)
    assert payload == summary["splits"]
    assert json.loads((eval_out / "eval.json").read_text()) == payload


def test_train_runs_are_deterministic(stream_csv, tmp_path, capsys):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(_train_argv(stream_csv, out_a)) == 0
    assert main(_train_argv(stream_csv, out_b)) == 0
    capsys.readouterr()

    sum_a = json.loads((out_a / "summary.json").read_text())
    sum_b = json.loads((out_b / "summary.json").read_text())
    for volatile in ("seconds_total", "seconds_per_epoch", "dataset"):
        sum_a.pop(volatile), sum_b.pop(volatile)
    assert sum_a == sum_b

    def stripped_metrics(path: Path) -> list:
        rows = path.read_text().splitlines()
        return [",".join(r.split(",")[:5]) for r in rows]

    assert stripped_metrics(out_a / "metrics.csv") == stripped_metrics(out_b / "metrics.csv")

    with np.load(out_a / "checkpoint.npz") as ca, np.load(out_b / "checkpoint.npz") as cb:
        assert set(ca.files) == set(cb.files)
        for key in ca.files:
            assert np.array_equal(ca[key], cb[key]), key


# ---------------------------------------------------------------------------
# Diagnostics.
# ---------------------------------------------------------------------------


def test_svd_inspect_lowrank_fixture(capsys):
    assert main(["svd-inspect", "--fixture", "lowrank", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "selected rank: 50" in out
    assert "matrix: 500x172" in out
    for q in (1, 2, 3):
        assert f"q={q}:" in out


def test_svd_inspect_geometric_fixture(capsys):
    assert main(["svd-inspect", "--fixture", "geometric", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "selected rank: 76" in out
    assert "tolerance warning: no" in out


def test_attn_gap_runs_on_fixture(capsys):
    assert main(["attn-gap", "--fixture", "random", "--rank", "5",
                 "--seed", "0"]) == 0
    out = capsys.readouterr().out
    gaps = {}
    for line in out.splitlines():
        if line.startswith("q=") and "gap=" in line:
            q = int(line[2:line.index(":")])
            gaps[q] = float(line.split("gap=")[1])
    assert set(gaps) == {1, 2, 3}
    assert all(g >= 0.0 for g in gaps.values())


def test_attn_gap_exact_low_rank_is_tiny(capsys):
    assert main(["attn-gap", "--fixture", "lowrank", "--rank", "10",
                 "--seed", "0"]) == 0
    out = capsys.readouterr().out
    gaps = [float(line.split("gap=")[1]) for line in out.splitlines()
            if "gap=" in line]
    assert gaps and max(gaps) < 1e-6
