import pytest
import torch

from eagle import checkpoint as ck
from eagle import cli, train
from eagle import data as dt
from eagle.config import load_config


@pytest.fixture()
def tiny_run(tmp_path):
    """A generated tiny corpus and its config overrides, rooted in ``tmp_path``."""
    sets = ["--preset", "tiny", "--set", f"data_root={tmp_path / 'data'}", "--set", "n_images=24",
            "--set", "n_classes=4", "--set", f"pretrain_checkpoint={tmp_path / 'pre.ckpt'}",
            "--set", "pretrain_epochs=1", "--set", "pretrain_batch_size=8", "--set", "total_steps=4",
            "--set", "batch_size=4", "--set", "eval_every=2", "--set", "checkpoint_every=2",
            "--set", f"out_dir={tmp_path / 'tune'}", "--set", "probe_epochs=20"]
    assert cli.main(["gen-data", *sets]) == 0
    return sets


def test_resolved_config_printed_first(capsys):
    assert cli.main(["check-grad", "--preset", "tiny"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "seed = 4096"
    assert out[1] == "# resolved config"
    assert "patch_size = 8" in out
    assert out[-1].endswith("PASS")


def test_check_grad_lists_every_tensor(capsys):
    cli.main(["check-grad", "--preset", "tiny", "--max-entries", "2"])
    out = capsys.readouterr().out
    cfg = load_config(preset="tiny")
    model = train.new_model(cfg, ["a", "b", "c"])
    assert all(f"\n{name} " in out for name in model.params)


@pytest.mark.parametrize("argv", [
    ["eval", "--config", "/nonexistent.cfg"],
    ["eval", "--set", "bogus=1"],
    ["eval", "--set", "data_root=/nonexistent"],
    ["frobnicate"],
    ["check-grad", "--max-entries", "many"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert cli.main(argv) == cli.EXIT_USAGE
    assert capsys.readouterr().err


def test_missing_checkpoint_exit_2(tiny_run, tmp_path, capsys):
    assert cli.main(["tune", *tiny_run, "--checkpoint", str(tmp_path / "none.ckpt")]) == cli.EXIT_USAGE
    assert "not found" in capsys.readouterr().err


def test_pretrain_tune_eval_probe(tiny_run, tmp_path, capsys):
    assert cli.main(["pretrain", *tiny_run]) == 0
    assert (tmp_path / "pre.ckpt").is_file()
    assert cli.main(["tune", *tiny_run]) == 0
    assert (tmp_path / "tune" / "final.report").is_file()
    assert cli.main(["tune", *tiny_run, "--out", str(tmp_path / "again"),
                     "--resume", str(tmp_path / "tune" / "step_000002.ckpt")]) == 0
    assert (tmp_path / "again" / "metrics.csv").read_text().count("\n") == 3  # header + steps 2, 3
    final = str(tmp_path / "tune" / "final.ckpt")
    assert cli.main(["eval", *tiny_run, "--checkpoint", final, "--out", str(tmp_path / "e.report")]) == 0
    assert cli.main(["probe", *tiny_run, "--checkpoint", final]) == 0
    assert "probe_seq_acc=" in capsys.readouterr().out


def test_non_finite_weights_exit_3(tiny_run, tmp_path):
    cfg = load_config(preset="tiny").replace(n_images=24, n_classes=4)
    model = train.new_model(cfg, dt.SHAPES[:4])
    params = dict(model.params)
    params["vis.proj"] = params["vis.proj"].clone()
    params["vis.proj"][0, 0] = float("nan")
    ck.save_checkpoint(tmp_path / "bad.ckpt", params)
    assert cli.main(["tune", *tiny_run, "--checkpoint", str(tmp_path / "bad.ckpt")]) == cli.EXIT_NUMERIC


def test_ablate_writes_reports(tiny_run, tmp_path):
    model = train.new_model(load_config(preset="tiny").replace(n_classes=4),
                            dt.SHAPES[:4])
    ck.save_checkpoint(tmp_path / "pre.ckpt", model.params)
    assert cli.main(["ablate", *tiny_run, "--set", "total_steps=2", "--out", str(tmp_path / "abl")]) == 0
    assert len(list((tmp_path / "abl").glob("ablate_*.report"))) == 6
