import pathlib
import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner
import convsynth.cli as cli
import convsynth.core as co
import convsynth.training as tr
from convsynth.config_handler import json_load, json_write, config_update, default_config

FIXTURE = pathlib.Path(__file__).parent / "config.json"


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    """Directory holding a copy of the small fixture configuration; relative paths resolve here."""
    monkeypatch.chdir(tmp_path)
    json_write(json_load(FIXTURE), tmp_path / "config.json")
    return tmp_path


def invoke(*args):
    return CliRunner().invoke(cli.cli, ["--log-file", "run.log", *args])


def run_pipeline():
    for command in (["simulate"], ["pretrain-dict"], ["train"]):
        result = invoke(*command, "--config", "config.json")
        assert result.exit_code == 0, result.output


def test_init_config(workspace):
    result = invoke("init-config", "fresh.json")
    assert result.exit_code == 0
    assert json_load(workspace / "fresh.json") == default_config()
    json_write({"version": 1}, workspace / "fresh.json")
    invoke("init-config", "fresh.json")
    assert json_load(workspace / "fresh.json") == {"version": 1}
    invoke("init-config", "fresh.json", "--overwrite")
    assert json_load(workspace / "fresh.json") == default_config()


def test_simulate_is_deterministic(workspace):
    for out in ("first", "second"):
        result = invoke("simulate", "--config", "config.json", "--out", out)
        assert result.exit_code == 0, result.output
    manifest = json_load(workspace / "first" / "manifest.json")
    assert [len(manifest["splits"][split]) for split in cli.SPLITS] == [4, 2, 2]
    assert [entry["sigma"] for entry in manifest["splits"]["train"]] == [0.075, 0.15] * 2
    assert (workspace / "first" / "manifest.json").read_bytes() == \
        (workspace / "second" / "manifest.json").read_bytes()
    for name in ("target.npy", "y.npy", "mask.npy"):
        assert (workspace / "first" / "test" / "test_00001" / name).read_bytes() == \
            (workspace / "second" / "test" / "test_00001" / name).read_bytes()


def test_seed_override_changes_data(workspace):
    invoke("simulate", "--config", "config.json", "--out", "base")
    invoke("simulate", "--config", "config.json", "--out", "other", "--seed", "5")
    assert not np.array_equal(np.load(workspace / "base" / "train" / "train_00000" / "y.npy"),
                              np.load(workspace / "other" / "train" / "train_00000" / "y.npy"))


def test_full_pipeline(workspace):
    run_pipeline()
    bank = json_load(workspace / "bank" / "manifest.json")
    assert bank["num_filters"] == 2
    assert len(bank["history"]) == 2
    history = pd.read_csv(workspace / "checkpoints" / "loss_history.csv")
    assert list(history.columns) == tr.HISTORY_COLUMNS
    assert history["step"].tolist() == [1, 2, 3, 4]
    epochs = pd.read_csv(workspace / "checkpoints" / "epochs.csv")
    assert list(epochs.columns) == ["epoch", "train_loss", "beta", "val_loss"]
    assert (workspace / "checkpoints" / "best" / "state.json").exists()

    sample = workspace / "data" / "test" / "test_00000"
    result = invoke("reconstruct", "--config", "config.json", "--sample", str(sample), "--png")
    assert result.exit_code == 0, result.output
    out = workspace / "outputs" / "test_00000"
    assert np.load(out / "x_star.npy").shape == (16, 16, 2)
    assert np.load(out / "lambda_maps.npy").shape == (2, 16, 16)
    assert np.load(out / "codes.npy").shape == (2, 16, 16, 2)
    objective = pd.read_csv(out / "objective.csv")["objective"]
    assert len(objective) == 5
    assert objective.iloc[-1] <= objective.iloc[0]
    assert list(pd.read_csv(out / "filter_ranking.csv").columns) == \
        ["filter", "mean", "variance", "rank"]
    for name in ("x_star.png", "x0.png", "target.png", "error_x3.png"):
        assert (out / name).exists()
    assert len(list((out / "lambda").glob("rank*_filter*.png"))) == 2

    for out_dir in ("eval1", "eval2"):
        result = invoke("evaluate", "--config", "config.json", "--out", out_dir)
        assert result.exit_code == 0, result.output
    metrics = pd.read_csv(workspace / "eval1" / "metrics_test.csv")
    assert list(metrics.columns) == ["sample_id", "method", "sigma", "psnr", "ssim"]
    assert sorted(set(metrics["method"])) == [cli.METHOD_NAMES["constant"], cli.ZERO_FILLED]
    assert len(metrics) == 4
    assert (metrics["ssim"] <= 1.0).all()
    assert (workspace / "eval1" / "metrics_test.csv").read_bytes() == \
        (workspace / "eval2" / "metrics_test.csv").read_bytes()
    summary = pd.read_csv(workspace / "eval1" / "summary_test.csv")
    assert "psnr_median" in summary.columns


def test_resume_continues_numbering(workspace):
    run_pipeline()
    config_update("training", {"epochs": 3}, "config.json")
    result = invoke("train", "--config", "config.json", "--resume")
    assert result.exit_code == 0, result.output
    history = pd.read_csv(workspace / "checkpoints" / "loss_history.csv")
    assert history["step"].tolist() == [1, 2, 3, 4, 5, 6]
    assert json_load(workspace / "checkpoints" / "last" / "state.json")["epoch"] == 3


def test_unknown_config_key_exits_with_2(workspace):
    config_update("training", {"learning_rate": 0.1}, "config.json")
    result = invoke("simulate", "--config", "config.json")
    assert result.exit_code == cli.EXIT_CONFIG


def test_missing_bank_exits_with_2(workspace):
    invoke("simulate", "--config", "config.json")
    result = invoke("train", "--config", "config.json")
    assert result.exit_code == cli.EXIT_CONFIG
    assert not (workspace / "checkpoints").exists()


def test_missing_config_exits_with_2(workspace):
    assert invoke("simulate", "--config", "absent.json").exit_code == cli.EXIT_CONFIG


def test_numerical_failure_exits_with_3(workspace, monkeypatch):
    invoke("simulate", "--config", "config.json")
    invoke("pretrain-dict", "--config", "config.json")

    def diverge(*args, **kwargs):
        raise co.NumericalError("non-finite loss in epoch 1, batch 0")

    monkeypatch.setattr(tr, "train", diverge)
    result = invoke("train", "--config", "config.json")
    assert result.exit_code == cli.EXIT_NUMERICAL


def test_network_source_needs_image_side_divisible_by_4(workspace):
    config_update("simulate", {"image_size": [18, 18]}, "config.json")
    config_update("lambda_maps", {"source": "network"}, "config.json")
    result = invoke("simulate", "--config", "config.json")
    assert result.exit_code == cli.EXIT_CONFIG
    assert not (workspace / "data").exists()


def test_kernel_larger_than_image_exits_with_2(workspace):
    config_update("simulate", {"image_size": [8, 8]}, "config.json")
    config_update("dictionary", {"kernel_size": 11}, "config.json")
    result = invoke("simulate", "--config", "config.json")
    assert result.exit_code == cli.EXIT_CONFIG
    assert not (workspace / "data").exists()


def test_value_error_from_inputs_exits_with_2(workspace, monkeypatch):
    invoke("simulate", "--config", "config.json")
    invoke("pretrain-dict", "--config", "config.json")

    def mismatch(*args, **kwargs):
        raise ValueError("mask shape (16, 16) does not match image shape (12, 12)")

    monkeypatch.setattr(tr, "train", mismatch)
    result = invoke("train", "--config", "config.json")
    assert result.exit_code == cli.EXIT_CONFIG


def test_pipeline_outputs_are_byte_identical_on_rerun(workspace, monkeypatch):
    for run in ("first", "second"):
        (workspace / run).mkdir()
        json_write(json_load(workspace / "config.json"), workspace / run / "config.json")
        monkeypatch.chdir(workspace / run)
        run_pipeline()
        result = invoke("reconstruct", "--config", "config.json", "--sample",
                        str(pathlib.Path("data") / "test" / "test_00000"))
        assert result.exit_code == 0, result.output
    # the log carries timestamps and torch pickles are not byte-stable
    written = sorted(path.relative_to(workspace / "first")
                     for path in (workspace / "first").rglob("*")
                     if path.is_file() and path.suffix not in (".log", ".pt"))
    for folder in ("bank", "checkpoints", "outputs"):
        assert any(path.parts[0] == folder for path in written)
    for path in written:
        assert (workspace / "first" / path).read_bytes() == \
            (workspace / "second" / path).read_bytes(), path


def test_methods_rank_above_zero_filled(workspace):
    config_update("simulate", {"image_size": [32, 32], "num_ellipses": 6, "train_size": 16,
                               "val_size": 4, "test_size": 8,
                               "sigmas": [0.075, 0.15, 0.3]}, "config.json")
    config_update("dictionary", {"num_filters": 8, "kernel_size": 5, "num_images": 16,
                                 "outer_iters": 3, "csc_iters": 30, "dict_iters": 5},
                  "config.json")
    config_update("fista", {"power_iters": 500, "power_tol": 1e-6}, "config.json")
    config_update("lambda_maps", {"bound": 10.0, "lambda_init": 0.5}, "config.json")
    config_update("training", {"epochs": 3, "unroll_iters": 32}, "config.json")
    run_pipeline()
    constant = tr.load_checkpoint(workspace / "checkpoints" / "best")
    # the network starts from the trained scalar solution
    config_update("lambda_maps", {"source": "network",
                                  "lambda_init": float(constant.source.value())}, "config.json")
    config_update("highpass", {"beta": json_load(workspace / "checkpoints" / "best" /
                                                 "state.json")["beta"]}, "config.json")
    config_update("paths", {"checkpoint_dir": "network"}, "config.json")
    result = invoke("train", "--config", "config.json")
    assert result.exit_code == 0, result.output
    result = invoke("evaluate", "--config", "config.json", "--checkpoint", "checkpoints/best",
                    "--checkpoint", "network/best")
    assert result.exit_code == 0, result.output
    psnr = pd.read_csv(workspace / "outputs" / "metrics_test.csv").groupby("method")["psnr"] \
        .mean()
    assert psnr[cli.METHOD_NAMES["constant"]] > psnr[cli.ZERO_FILLED]
    assert psnr[cli.METHOD_NAMES["network"]] >= psnr[cli.METHOD_NAMES["constant"]] - 0.25
