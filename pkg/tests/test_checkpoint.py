import struct

import numpy as np
import pytest

from tdam import checkpoint
from tdam.backbone import TdSpec, build_model, toy_config
from tdam.checkpoint import MAGIC, CheckpointError
from tdam.data import gen_bright_object
from tdam.train import evaluate

TINY = dict(widths=(8, 8, 16, 16), blocks=(1, 1, 1, 1), stem_channels=8)


def _model(seed=0, td="joint,t2,m1"):
    return build_model(toy_config(4, td=TdSpec.parse(td), **TINY), seed)


def _perturb_stats(model):
    for i, (_, buf) in enumerate(model.named_buffers()):
        buf[...] = np.random.default_rng(i).random(buf.shape)


def test_round_trip_restores_everything(tmp_path):
    src = _model(0)
    _perturb_stats(src)
    checkpoint.save(src, tmp_path / "m.ckpt")
    dst = checkpoint.load(_model(1), tmp_path / "m.ckpt")
    for (n, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
        assert np.array_equal(a.data, b.data), n
    for (n, a), (_, b) in zip(src.named_buffers(), dst.named_buffers()):
        assert np.array_equal(a, b), n
    ds = gen_bright_object(4, 3, 32, 0)
    assert evaluate(src, ds).to_csv() == evaluate(dst, ds).to_csv()


def test_layout(tmp_path):
    m = _model()
    checkpoint.save(m, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack("<Q", raw[8:16])
    lines = raw[16 : 16 + n].decode().splitlines()
    first_name, _ = next(iter(m.named_parameters()))
    assert lines[0].startswith(first_name + " f32 ")
    n_params = len(list(m.named_parameters()))
    assert lines[n_params].split()[0] == next(iter(m.named_buffers()))[0]
    total = sum(a.size for _, a in checkpoint.read(tmp_path / "m.ckpt").items())
    assert len(raw) == 16 + n + 4 * total


def test_saving_is_deterministic(tmp_path):
    checkpoint.save(_model(), tmp_path / "a")
    checkpoint.save(_model(), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_architecture_mismatch(tmp_path):
    checkpoint.save(_model(td="joint,t2,m1"), tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError, match="does not fit"):
        checkpoint.load(_model(td="joint,t3,m1"), tmp_path / "m.ckpt")
    wide = build_model(toy_config(4, td=TdSpec.parse("joint,t2,m1"), widths=(8, 8, 16, 32), blocks=(1, 1, 1, 1), stem_channels=8), 0)
    with pytest.raises(CheckpointError, match="shape"):
        checkpoint.load(wide, tmp_path / "m.ckpt")


@pytest.mark.parametrize("cut", ["magic", "manifest", "payload", "trailing"])
def test_corrupt_files(tmp_path, cut):
    checkpoint.save(_model(), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    bad = {
        "magic": b"XXXXXXXX" + raw[8:],
        "manifest": raw[:16] + b"\xff" + raw[17:],
        "payload": raw[:-10],
        "trailing": raw + b"\0",
    }[cut]
    (tmp_path / "m.ckpt").write_bytes(bad)
    with pytest.raises(CheckpointError):
        checkpoint.read(tmp_path / "m.ckpt")
