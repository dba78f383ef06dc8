import csv

import numpy as np
import pytest

from bootmae.cli import EXIT_CONFIG, EXIT_IO, main
from bootmae.data import read_pnm

FAST = ["--set", "n_train=8", "--set", "n_test=8", "--set", "gallery=1"]


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", "--epochs", "2", "--seed", "3", "--out", str(out)] + FAST) == 0
    return out


def test_pretrain_outputs(pretrained):
    names = {p.name for p in pretrained.iterdir()}
    assert {"config-echo.txt", "metrics.csv", "final.ckpt"} <= names
    assert any(n.startswith("gallery_") and n.endswith(".ppm") for n in names)
    assert "seed = 3" in (pretrained / "config-echo.txt").read_text()
    rows = _rows(pretrained / "metrics.csv")
    assert len(rows) == 2 and all(np.isfinite(float(r["L"])) for r in rows)


def test_pretrain_is_reproducible(pretrained, tmp_path):
    assert main(["pretrain", "--epochs", "2", "--seed", "3", "--out", str(tmp_path)] + FAST) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (pretrained / "metrics.csv").read_bytes()


def test_refuses_to_clobber(pretrained, tmp_path):
    (tmp_path / "keep.txt").write_text("x")
    assert main(["pretrain", "--epochs", "1", "--out", str(tmp_path)] + FAST) == EXIT_CONFIG
    assert (tmp_path / "keep.txt").exists()
    assert main(["pretrain", "--epochs", "1", "--out", str(tmp_path), "--overwrite"] + FAST) == 0


def test_unknown_key_is_config_error(tmp_path):
    assert main(["pretrain", "--out", str(tmp_path), "--set", "colour=red"]) == EXIT_CONFIG


def test_resume_matches_unbroken(pretrained, tmp_path):
    run, resumed = tmp_path / "run", tmp_path / "resumed"
    assert main(["pretrain", "--epochs", "2", "--seed", "3", "--out", str(run),
                 "--set", "checkpoint_every=1"] + FAST) == 0
    assert main(["pretrain", "--out", str(resumed), "--resume", str(run / "checkpoint_0001.ckpt")]) == 0
    assert (resumed / "metrics.csv").read_bytes() == (pretrained / "metrics.csv").read_bytes()


def test_ablation_switches(tmp_path):
    args = ["pretrain", "--epochs", "1", "--lambda", "0", "--mask", "random", "--inject", "off",
            "--out", str(tmp_path)] + FAST
    assert main(args) == 0
    echo = (tmp_path / "config-echo.txt").read_text()
    assert "lam = 0.0" in echo and "mask = random" in echo and "reg_inject = none" in echo


def test_probe_and_finetune(pretrained, tmp_path):
    ck = str(pretrained / "final.ckpt")
    assert main(["probe", "--checkpoint", ck, "--out", str(tmp_path / "p"),
                 "--set", "probe_epochs=3"] + FAST) == 0
    assert {r["split"] for r in _rows(tmp_path / "p" / "metrics.csv")} == {"train", "test"}
    assert main(["finetune", "--checkpoint", ck, "--out", str(tmp_path / "f"),
                 "--set", "eval_epochs=1"] + FAST) == 0
    assert (tmp_path / "f" / "finetune_final.ckpt").exists()
    assert main(["finetune", "--resume", str(tmp_path / "f" / "finetune_final.ckpt"),
                 "--out", str(tmp_path / "f"), "--set", "eval_epochs=2"] + FAST) == 0
    assert len(_rows(tmp_path / "f" / "metrics.csv")) == 4


def test_geometry_mismatch_rejected(pretrained, tmp_path):
    code = main(["probe", "--checkpoint", str(pretrained / "final.ckpt"), "--out", str(tmp_path),
                 "--set", "patch_size=8"] + FAST)
    assert code == EXIT_IO


def test_missing_checkpoint(tmp_path):
    assert main(["probe", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_mask_viz(tmp_path):
    assert main(["mask-viz", "--out", str(tmp_path / "a"), "--samples", "20", "--seed", "1"]) == 0
    assert main(["mask-viz", "--out", str(tmp_path / "b"), "--samples", "20", "--seed", "1"]) == 0
    a = (tmp_path / "a" / "components.csv").read_bytes()
    assert a == (tmp_path / "b" / "components.csv").read_bytes()
    for name in ("random", "block"):
        img = read_pnm(tmp_path / "a" / f"{name}.pgm")[..., 0]
        centers = img[4::8, 4::8]
        assert centers.shape == (14, 14) and int((centers < 0.5).sum()) == 147
    assert all(r["masked"] == "147" for r in _rows(tmp_path / "a" / "components.csv"))


def test_ablate_mask_grid(tmp_path):
    assert main(["ablate-mask", "--epochs", "1", "--out", str(tmp_path),
                 "--set", "probe_epochs=2"] + FAST) == 0
    rows = _rows(tmp_path / "ablation.csv")
    assert [(r["target"], r["mask"]) for r in rows] == [
        ("pixel", "random"), ("pixel", "block"), ("feature", "random"), ("feature", "block")]
    assert all(np.isfinite(float(r["final_L"])) for r in rows)
    # every target sees the same masks for a given strategy
    assert rows[0]["plan_digest"] == rows[2]["plan_digest"]
    assert rows[1]["plan_digest"] == rows[3]["plan_digest"]
    assert "budget" in (tmp_path / "budget.txt").read_text()


@pytest.mark.parametrize("level", ["low", "mid", "high"])
def test_inject_levels_run(tmp_path, level):
    assert main(["pretrain", "--epochs", "1", "--inject", level, "--out", str(tmp_path)] + FAST) == 0
    assert f"reg_inject = {level}" in (tmp_path / "config-echo.txt").read_text()
