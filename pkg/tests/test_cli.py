import subprocess
import sys

import numpy as np
import pytest

from tdam import checkpoint
from tdam.cli import SCHEMA, ConfigError, main, resolve

TINY = ["--model.widths=8,8,16,16", "--model.blocks=1,1,1,1", "--model.stem_channels=8"]
DATA = ["--kind", "bright", "--classes", "3", "--per-class", "6", "--size", "16"]
FAST = ["--train.epochs=1", "--train.batch_size=8"]


def run(*argv):
    return main([str(a) for a in argv])


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for key in SCHEMA:
        assert f"--{key.name}" in text


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "tdam", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "cost" in out.stdout


def test_precedence(tmp_path):
    cfg1 = tmp_path / "a.cfg"
    cfg1.write_text("[train]\nlr = 0.2\nepochs = 3\n# comment\n")
    cfg2 = tmp_path / "b.cfg"
    cfg2.write_text("train.lr = 0.3\n")
    _, cfg = resolve(["train", "--config", str(cfg1), "--config", str(cfg2), "--train.epochs=5"])
    assert cfg["train.lr"] == 0.3 and cfg["train.epochs"] == 5
    _, cfg = resolve(["train", "--seed", "4", "--train.seed", "9"])
    assert cfg["data.seed"] == 4 and cfg["train.seed"] == 9
    _, cfg = resolve(["train", "--train.seed", "9", "--seed", "4"])
    assert cfg["train.seed"] == 4


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--train.epochs=many"],
        ["train", "--model.td_variant=magic"],
        ["train", "--no-such-key=1"],
        ["frobnicate"],
        ["train", "--config", "/nonexistent.cfg"],
    ],
)
def test_config_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "config error" in capsys.readouterr().err


def test_bad_config_file_lines(tmp_path):
    p = tmp_path / "x.cfg"
    p.write_text("train.lr 0.1\n")
    with pytest.raises(ConfigError, match=":1:"):
        resolve(["train", "--config", str(p)])
    p.write_text("train.nope = 1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        resolve(["train", "--config", str(p)])


def test_invalid_model_is_config_error(tmp_path):
    assert run("cost", "--td", "joint,t2,m3", "--out", tmp_path) == 2
    assert run("eval", *DATA, "--out", tmp_path) == 2  # no checkpoint


def test_cost_expectations(tmp_path, capsys):
    out = tmp_path / "c"
    assert run("cost", "--model", "resnet50", "--expect-params", 25.56e6, "--tol", 0.002, "--out", out) == 0
    lines = (out / "cost.csv").read_text().splitlines()
    assert lines[0] == "layer_name,params,macs" and lines[-1].startswith("total,25557032,")
    assert run("cost", "--model", "resnet50", "--expect-macs", 1e9, "--out", out) == 3
    assert "MISMATCH" in capsys.readouterr().out


def test_missing_checkpoint_is_runtime_error(tmp_path):
    assert run("eval", *DATA, *TINY, "--checkpoint", tmp_path / "none.ckpt", "--out", tmp_path) == 1


def _pipeline(root):
    root.mkdir()
    data = root / "data"
    train_dir = root / "train"
    assert run("gen", *DATA, "--seed", 3, "--out", data) == 0
    common = ["--data", data, "--size", 16, *TINY]
    assert run("train", *common, *FAST, "--td", "joint,t2,m1", "--seed", 3, "--out", train_dir) == 0
    ck = train_dir / "model.ckpt"
    assert run("eval", *common, "--checkpoint", ck, "--res", "12,16,24", "--out", root / "eval") == 0
    assert run("cam", *common, "--checkpoint", ck, "--analysis.images", 2, "--out", root / "cam") == 0
    assert run("localize", *common, "--checkpoint", ck, "--out", root / "loc") == 0
    return root


DECLARED = [
    "data/manifest.txt",
    "data/boxes.csv",
    "data/c00/00000.png",
    "train/model.ckpt",
    "train/train_log.csv",
    "eval/eval.csv",
    "cam/cams.npz",
    "cam/divergence.csv",
    "cam/cam_0001_step1.png",
    "loc/localization.csv",
]


def test_pipeline_is_byte_identical(tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    for rel in DECLARED:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    resolved = (a / "eval" / "resolved.cfg").read_text()
    assert "model.td = joint,t2,m1" in resolved  # inherited from the checkpoint
    assert "analysis.resolutions = 12,16,24" in resolved
    assert len((a / "eval" / "eval.csv").read_text().splitlines()) == 4
    stored = checkpoint.read(a / "train" / "model.ckpt")
    assert all(np.isfinite(v).all() for v in stored.values())


def test_ablate_small_grid(tmp_path):
    argv = [*DATA, *TINY, *FAST, "--analysis.kinds=top", "--analysis.ms=1", "--analysis.ts=2"]
    assert run("ablate", *argv, "--analysis.variants=chn_only,sp_only", "--out", tmp_path) == 0
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[-1].endswith(",1")
    assert run("ablate", *argv, "--analysis.ms=4", "--out", tmp_path) == 2
