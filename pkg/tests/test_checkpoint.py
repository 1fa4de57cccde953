"""Checkpoint binary format: round-trips, integrity checks, architecture guard."""

import numpy as np
import pytest

from cxrnet.checkpoint import (
    MAGIC,
    read_checkpoint,
    restore_model,
    save_checkpoint,
)
from cxrnet.tensor import Tensor
from cxrnet.zoo import Model, build_vanilla_cnn, build_vdsnet


def small_model(seed=0, channels="gray"):
    return Model(build_vanilla_cnn(channels, input_hw=16), np.random.default_rng(seed))


def save_small(tmp_path, model, **kw):
    path = tmp_path / "model.ckpt"
    kw.setdefault("epoch", 3)
    kw.setdefault("best_val_loss", 0.25)
    save_checkpoint(path, model, **kw)
    return path


def test_roundtrip_bit_exact(tmp_path):
    model = small_model(seed=1)
    path = save_small(tmp_path, model, train_config={"model": "vanilla_gray", "seed": 1})
    other = small_model(seed=99)
    ckpt = read_checkpoint(path)
    restore_model(ckpt, other)
    for name, t in model.parameters().items():
        assert np.array_equal(t.data, other.parameters()[name].data), name
    assert ckpt.header["epoch"] == 3
    assert ckpt.header["best_val_loss"] == 0.25
    assert ckpt.header["model"] == "vanilla_gray"
    assert ckpt.header["train_config"]["seed"] == 1


def test_buffers_roundtrip(tmp_path):
    model = Model(build_vdsnet(input_hw=16, backbone_blocks=2), np.random.default_rng(2))
    x = Tensor(np.random.default_rng(0).random((4, 3, 16, 16), dtype=np.float32))
    meta = Tensor(np.random.default_rng(1).random((4, 5), dtype=np.float32))
    model.forward(x, meta, mode="train")  # move the running statistics off their init
    path = save_small(tmp_path, model)
    other = Model(build_vdsnet(input_hw=16, backbone_blocks=2), np.random.default_rng(7))
    restore_model(read_checkpoint(path), other)
    for name, buf in model.buffers().items():
        assert np.array_equal(buf, other.buffers()[name]), name
    assert not np.array_equal(model.buffers()["00_stn.bn.running_mean"],
                              np.zeros(3, dtype=np.float32))


def test_repeated_saves_are_byte_identical(tmp_path):
    model = small_model(seed=4)
    a = save_small(tmp_path, model, train_config={"model": "vanilla_gray"})
    first = a.read_bytes()
    b = tmp_path / "again.ckpt"
    save_checkpoint(b, model, epoch=3, best_val_loss=0.25,
                    train_config={"model": "vanilla_gray"})
    assert first == b.read_bytes()


def test_opt_state_roundtrip(tmp_path):
    model = small_model(seed=5)
    rng = np.random.default_rng(0)
    state = {"00_conv.w.m": rng.random((16, 1, 7, 7), dtype=np.float32),
             "00_conv.w.v": rng.random((16, 1, 7, 7), dtype=np.float32)}
    path = save_small(tmp_path, model, opt_state=state, opt_step=17)
    ckpt = read_checkpoint(path)
    assert ckpt.header["opt_step"] == 17
    for k, arr in state.items():
        assert np.array_equal(ckpt.opt_state[k], arr), k


def test_flipped_byte_fails_crc_with_offset(tmp_path):
    path = save_small(tmp_path, small_model())
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF  # inside the last blob
    path.write_bytes(raw)
    with pytest.raises(ValueError, match=r"CRC32.*offset"):
        read_checkpoint(path)


def test_truncated_file_errors_with_offset(tmp_path):
    path = save_small(tmp_path, small_model())
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ValueError, match="truncated at offset"):
        read_checkpoint(path)


def test_bad_magic_rejected(tmp_path):
    path = save_small(tmp_path, small_model())
    raw = bytearray(path.read_bytes())
    assert raw[:8] == MAGIC
    raw[:8] = b"NOTCKPT!"
    path.write_bytes(raw)
    with pytest.raises(ValueError, match="magic"):
        read_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    path = save_small(tmp_path, small_model())
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(ValueError, match="trailing"):
        read_checkpoint(path)


def test_digest_mismatch_refused(tmp_path):
    path = save_small(tmp_path, small_model(channels="gray"))
    wrong = small_model(channels="rgb")
    with pytest.raises(ValueError, match="cannot be loaded into"):
        restore_model(read_checkpoint(path), wrong)
