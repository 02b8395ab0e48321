import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from attnwarp.cli import main, read_blocks, sha256
from attnwarp.data import load_dataset
from attnwarp.evaluation import read_report
from attnwarp.warpnet import init_params, load_checkpoint, preset_arch

SMALL_TRAIN = ["--arch", "tiny", "--batch-size", "8", "--micro-batch", "8"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--out", str(d / "data.txt"), "--classes", "3", "--per-class", "12",
                 "--val-per-class", "2", "--test-per-class", "3", "--w", "16", "--k", "2", "--arch", "tiny"]) == 0
    return d


def test_generate_counts_and_checksum(tmp_path):
    args = ["generate", "--classes", "3", "--per-class", "100", "--w", "64", "--k", "2", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a.txt")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.txt")]) == 0
    assert len(load_dataset(tmp_path / "a.txt")) == 300
    assert sha256(tmp_path / "a.txt") == sha256(tmp_path / "b.txt")
    man = json.loads((tmp_path / "a.txt.manifest.json").read_text())
    assert man["command"] == "generate" and man["seed"] == 7
    assert man["outputs"][str(tmp_path / "a.txt")] == sha256(tmp_path / "a.txt")


def test_generate_rejects_zero_per_class(tmp_path, capsys):
    code = main(["generate", "--out", str(tmp_path / "x.txt"), "--per-class", "0"])
    assert code != 0
    assert "--per-class" in capsys.readouterr().err
    assert not (tmp_path / "x.txt").exists()


def test_generate_invalid_config_is_typed(tmp_path, capsys):
    code = main(["generate", "--out", str(tmp_path / "x.txt"), "--per-class", "5"])
    assert code == 1
    assert "InvalidConfig" in capsys.readouterr().err


def test_missing_dataset(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "m.ckpt")]) != 0
    assert "nope.txt" in capsys.readouterr().err
    assert main(["dtw", "--data", str(tmp_path / "nope.txt"), "--out-dir", str(tmp_path / "r")]) != 0


def test_pretrain_train_eval_pipeline(workdir):
    d = workdir
    assert main(["pretrain", "--data", str(d / "data.txt"), "--out", str(d / "pre.ckpt"), "--steps", "6",
                 "--log", str(d / "pre.log")] + SMALL_TRAIN) == 0
    pre = load_checkpoint(d / "pre.ckpt")
    assert pre.step == 6 and pre.extra["stage"] == "pretrain"
    log = [json.loads(l) for l in (d / "pre.log").read_text().splitlines()]
    assert [r["step"] for r in log] == list(range(1, 7)) and all(r["stage"] == "pretrain" for r in log)

    assert main(["train", "--data", str(d / "data.txt"), "--out", str(d / "model.ckpt"),
                 "--init", f"pretrained:{d / 'pre.ckpt'}", "--epochs", "2", "--steps-per-epoch", "2",
                 "--log", str(d / "train.log")] + SMALL_TRAIN) == 0
    ck = load_checkpoint(d / "model.ckpt")
    assert ck.step == 10 and ck.extra["epochs"] == 2
    train_log = [json.loads(l) for l in (d / "train.log").read_text().splitlines()]
    assert [r["epoch"] for r in train_log] == [1, 2]
    assert all(np.isfinite(r["loss"]) for r in train_log)

    assert main(["eval", "--checkpoint", str(d / "model.ckpt"), "--data", str(d / "data.txt"),
                 "--out-dir", str(d / "eval")]) == 0
    rep = read_report(d / "eval" / "report.txt")
    assert rep["report"]["task"] == "classify"
    assert 0 <= rep["metrics"]["accuracy"] <= 1 and rep["metrics"]["k"] == 3.0
    assert (d / "eval" / "histogram.csv").read_text().startswith("bin_left,bin_right,")
    man = json.loads((d / "eval" / "manifest.json").read_text())
    assert all(v is not None for v in man["outputs"].values())


def test_zero_epochs_gives_initialization(workdir):
    d = workdir
    assert main(["train", "--data", str(d / "data.txt"), "--out", str(d / "zero.ckpt"), "--epochs", "0",
                 "--seed", "3", "--dtype", "float64"] + SMALL_TRAIN) == 0
    ck = load_checkpoint(d / "zero.ckpt")
    ref = init_params(preset_arch("tiny", 2), seed=3, dtype=torch.float64)
    for k, t in ref.tensors.items():
        assert torch.equal(ck.params.tensors[k], t)


def test_training_reproducible_by_checksum(workdir):
    d = workdir
    outs = []
    for name in ("r1.ckpt", "r2.ckpt"):
        assert main(["train", "--data", str(d / "data.txt"), "--out", str(d / name), "--epochs", "1",
                     "--steps-per-epoch", "2"] + SMALL_TRAIN) == 0
        outs.append(sha256(d / name))
    assert outs[0] == outs[1]


def test_unknown_init(workdir, capsys):
    d = workdir
    assert main(["train", "--data", str(d / "data.txt"), "--out", str(d / "x.ckpt"), "--init", "xavier"]) == 1
    assert "--init" in capsys.readouterr().err


def test_dtw_baseline_deterministic_and_separable(tmp_path):
    assert main(["generate", "--out", str(tmp_path / "clean.txt"), "--per-class", "12", "--val-per-class", "1",
                 "--test-per-class", "4", "--w", "16", "--warp-strength", "0", "--noise", "0"]) == 0
    for out in ("r1", "r2"):
        assert main(["dtw", "--data", str(tmp_path / "clean.txt"), "--out-dir", str(tmp_path / out)]) == 0
    assert (tmp_path / "r1" / "report.txt").read_bytes() == (tmp_path / "r2" / "report.txt").read_bytes()
    assert read_report(tmp_path / "r1" / "report.txt")["metrics"]["accuracy"] == 1.0


def test_verify_identical_scores(tmp_path):
    p = tmp_path / "flat.txt"
    rows = ["W=4 K=1", '#splits {"test": [0, 1, 2, 3, 4, 5]}']
    rows += [f"s000:{k},0.0,0.0,0.0,0.0" for k in "gggfff"]
    p.write_text("\n".join(rows) + "\n")
    assert main(["dtw", "--data", str(p), "--task", "verify", "--refs", "1", "--out-dir", str(tmp_path / "r")]) == 0
    assert read_report(tmp_path / "r" / "report.txt")["metrics"]["eer"] == 0.5


def test_export_warp(workdir):
    d = workdir
    ckpt = d / "exp.ckpt"
    assert main(["train", "--data", str(d / "data.txt"), "--out", str(ckpt), "--epochs", "0"] + SMALL_TRAIN) == 0
    for name in ("w1.txt", "w2.txt"):
        assert main(["export-warp", "--checkpoint", str(ckpt), "--data", str(d / "data.txt"),
                     "--pair", "0,5", "--out", str(d / name)]) == 0
    assert (d / "w1.txt").read_bytes() == (d / "w2.txt").read_bytes()
    blocks = read_blocks(d / "w1.txt")
    assert list(blocks) == ["A", "B", "DTW_cost", "P_DTW", "P", "P_s", "P_t", "P_sB", "P_tA"]
    shapes = {k: v.shape for k, v in blocks.items()}
    assert shapes["A"] == shapes["B"] == shapes["P_sB"] == shapes["P_tA"] == (16, 2)
    assert all(shapes[k] == (16, 16) for k in ("DTW_cost", "P_DTW", "P", "P_s", "P_t"))
    for k in ("P_s", "P_t", "P_DTW"):
        assert np.allclose(blocks[k].sum(1), 1, atol=1e-6)
    assert main(["export-warp", "--checkpoint", str(ckpt), "--data", str(d / "data.txt"),
                 "--pair", "0,999", "--out", str(d / "bad.txt")]) == 1


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "attnwarp.cli", "generate", "--out", str(tmp_path / "m.txt"),
                          "--per-class", "20", "--w", "8"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert len(load_dataset(tmp_path / "m.txt")) == 60
