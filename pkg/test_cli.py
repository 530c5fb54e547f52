#!/usr/bin/env python3
"""
End-to-end tests of the run_nowcast.py commands, driven through ``main``.
"""

import sys
import os

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from nowcast import losses
from nowcast.augment import GEOMETRY_PRESETS
from nowcast.binning import DEFAULT_BINS
from nowcast.checkpoint import HISTORY_NAME, save_checkpoint
from nowcast.cli import ABLATION_COLUMNS, main
from nowcast.dataio import SequenceStore, read_manifest, read_tensor, truth_window, write_tensor
from nowcast.losses import LossResult
from nowcast.model import init
from nowcast.tensor import RngState
from nowcast.training import EpochRecord, TrainingHistory, unet_config_for

TINY_NET = ["--depth", "1", "--base-width", "2", "--batch-size", "4"]


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(root), "--sequences", "2"]) == 0
    return root


@pytest.fixture(scope="module")
def checkpoint(dataset):
    ckpt = dataset.parent / "ckpt"
    code = main(["train", "--data", str(dataset), "--out", str(ckpt), "--epochs", "2", *TINY_NET])
    assert code == 0
    return ckpt


def test_gen_data_is_deterministic(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "a"), "--seed", "5", "--sequences", "3"]) == 0
    out = capsys.readouterr().out
    assert "train: 3 sequences, 15 samples" in out
    assert "val: 1 sequences, 5 samples" in out
    assert main(["gen-data", "--out", str(tmp_path / "b"), "--seed", "5", "--sequences", "3"]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_gen_data_geometry_preset(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--preset", "geometry", "--sequences", "1"]) == 0
    assert read_tensor(tmp_path / "val" / "inputs" / "0000.nwt").shape == (9, 11, 252, 252)
    assert read_tensor(tmp_path / "val" / "targets" / "0000.nwt").shape == (9, 252, 252)
    assert len(read_manifest(tmp_path / "train")) == 2


def test_usage_errors_exit_with_code_two(capsys):
    with pytest.raises(SystemExit) as info:
        main(["gen-data"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["gradcheck", "--logcosh", "maybe"])
    assert info.value.code == 2


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    assert "(default: ml_dice)" in text
    assert "(default: on)" in text
    assert "(default: 90)" in text


def test_train_writes_checkpoint_and_history(checkpoint):
    assert (checkpoint / "meta.toml").exists()
    assert (checkpoint / "params").is_dir() and (checkpoint / "adam_v").is_dir()
    lines = (checkpoint / HISTORY_NAME).read_text().splitlines()
    assert lines[0].startswith("epoch\ttrain_loss\tval_loss")
    assert len(lines) == 3


def test_train_reports_when_no_epoch_improved(dataset, tmp_path, monkeypatch, capsys):
    def unimproved_fit(run, data):
        state = init(unet_config_for(4, 4, 4, depth=1, base_width=2), RngState(0), lr=run.lr)
        state.geometry = GEOMETRY_PRESETS["desk"]
        state.output_frames = 4
        nan = float("nan")
        return state, TrainingHistory([EpochRecord(1, 0.3, nan, run.lr, 0.0, 0.0), EpochRecord(2, 0.2, nan, run.lr, 0.0, 0.0)])

    monkeypatch.setattr("nowcast.cli._fit", unimproved_fit)
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "ckpt"), "--epochs", "2"]) == 0
    out = capsys.readouterr().out
    assert "no epoch improved on the initial validation loss in 2 epochs" in out
    assert (tmp_path / "ckpt" / HISTORY_NAME).exists()


def test_train_rejects_bad_config(dataset, tmp_path, capsys):
    config = tmp_path / "run.toml"
    config.write_text("learning_rate = 0.1\n")
    code = main(["train", "--data", str(dataset), "--out", str(tmp_path / "ckpt"), "--config", str(config)])
    assert code == 1
    assert "unknown key" in capsys.readouterr().err


def test_predict_then_score(dataset, checkpoint, tmp_path, capsys):
    preds = tmp_path / "preds"
    assert main(["predict", "--ckpt", str(checkpoint), "--data", str(dataset), "--out", str(preds)]) == 0
    files = sorted(preds.glob("*.nwt"))
    assert len(files) == 5
    representatives = set(np.float32(r) for r in DEFAULT_BINS.representatives)
    for file in files:
        rates = read_tensor(file)
        assert rates.shape == (4, 32, 32)
        assert set(np.unique(rates)) <= representatives

    capsys.readouterr()
    assert main(["score", "--pred", str(preds), "--truth", str(dataset / "val")]) == 0
    table = capsys.readouterr().out.splitlines()
    assert len(table) == 8
    assert table[0] == "threshold\ttp\tfp\tfn\tcsi\tf1"
    assert table[-2].startswith("mCSI\t")


def test_score_truth_against_itself(dataset, tmp_path, capsys):
    store = SequenceStore()
    truth = tmp_path / "truth"
    for index, entry in enumerate(read_manifest(dataset / "val")):
        write_tensor(truth / f"{index:04d}.nwt", truth_window(entry, store, 4, 4))
    capsys.readouterr()
    assert main(["score", "--pred", str(truth), "--truth", str(dataset / "val")]) == 0
    out = capsys.readouterr().out
    assert "mCSI\t1.00000" in out and "mF1\t1.00000" in out


def test_score_two_pixel_files(tmp_path, capsys):
    write_tensor(tmp_path / "pred" / "0000.nwt", np.array([[[3.0, 0.0]]], dtype=np.float32))
    write_tensor(tmp_path / "truth" / "0000.nwt", np.array([[[0.5, 7.0]]], dtype=np.float32))
    assert main(["score", "--pred", str(tmp_path / "pred"), "--truth", str(tmp_path / "truth")]) == 0
    assert "mCSI\t0.50000" in capsys.readouterr().out


def test_score_count_mismatch(dataset, tmp_path, capsys):
    write_tensor(tmp_path / "pred" / "0000.nwt", np.zeros((4, 32, 32), dtype=np.float32))
    assert main(["score", "--pred", str(tmp_path / "pred"), "--truth", str(dataset / "val")]) == 2
    assert "ERROR: 1 prediction files but 5 truth samples" in capsys.readouterr().err


def test_predict_geometry_mismatch(dataset, tmp_path, capsys):
    state = init(unet_config_for(4, 4, 4, depth=1, base_width=2), RngState(0))
    state.geometry = GEOMETRY_PRESETS["geometry"]
    save_checkpoint(state, tmp_path / "wide")
    code = main(["predict", "--ckpt", str(tmp_path / "wide"), "--data", str(dataset), "--out", str(tmp_path / "p")])
    assert code == 1
    assert "does not fit checkpoint geometry" in capsys.readouterr().err


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 5
    assert all(line.endswith("ok") for line in lines)


def test_gradcheck_flags_a_corrupted_gradient(monkeypatch, capsys):
    original = losses.loss_with_grad

    def corrupted(*args, **kwargs):
        result = original(*args, **kwargs)
        return LossResult(result.value, result.grad_logits + 0.1)

    monkeypatch.setattr(losses, "loss_with_grad", corrupted)
    assert main(["gradcheck", "--loss", "ml_dice", "--trials", "1", "--network", "off"]) == 1
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 and all(line.endswith("FAIL") for line in lines)


def test_baseline(dataset, capsys):
    assert main(["baseline", "--data", str(dataset)]) == 0
    out = capsys.readouterr().out
    assert "# persistence" in out and "# linear readout" in out


def test_ablate(dataset, tmp_path, capsys):
    out = tmp_path / "ablation.tsv"
    code = main(["ablate", "--data", str(dataset), "--out", str(out), "--epochs", "1", "--seeds", "1", *TINY_NET])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "\t".join(ABLATION_COLUMNS)
    assert [line.split("\t")[:3] for line in lines[1:]] == [
        ["ml_dice", "on", "unet2d"],
        ["ml_dice", "off", "unet2d"],
        ["dice", "on", "unet2d"],
        ["dice", "off", "unet2d"],
    ]
