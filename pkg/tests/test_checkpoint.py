import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridvlp.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from gridvlp.fusion import FusionConfig
from gridvlp.model import GridVLP
from gridvlp.tensor import ShapeError


def small_model(width=16, seed=0):
    return GridVLP(30, 9, 8, FusionConfig(layers=1, width=width, heads=2), seed=seed)


def sample_checkpoint():
    model = small_model()
    model.grid.set_normalization(np.random.default_rng(1).normal(3.0, 2.0, size=(40, 8)).astype(np.float32))
    opt = {"m.x": np.arange(6, dtype=np.float32).reshape(2, 3), "v.x": np.ones(3, np.float32)}
    return Checkpoint({"width": 16}, dict(model.state_dict()), opt, {"kind": "pretrain", "step": 12})


def test_round_trip_bitwise(tmp_path):
    ckpt = sample_checkpoint()
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.config == ckpt.config and back.meta == ckpt.meta and back.step == 12
    assert list(back.tensors) == list(ckpt.tensors)
    for name, arr in ckpt.tensors.items():
        assert back.tensors[name].tobytes() == arr.tobytes(), name
    for name, arr in ckpt.optimizer.items():
        assert back.optimizer[name].tobytes() == arr.tobytes()
    save_checkpoint(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@settings(max_examples=20, deadline=None)
@given(st.lists(st.lists(st.integers(0, 4), min_size=0, max_size=3), min_size=0, max_size=4),
       st.integers(0, 10**6))
def test_round_trip_arbitrary_shapes(tmp_path_factory, shapes, seed):
    rng = np.random.default_rng(seed)
    tensors = {f"t{i}": rng.normal(size=s).astype(np.float32) for i, s in enumerate(shapes)}
    path = tmp_path_factory.mktemp("ck") / "x.ckpt"
    save_checkpoint(path, Checkpoint({}, tensors))
    back = load_checkpoint(path)
    assert back.optimizer is None
    for name, arr in tensors.items():
        assert back.tensors[name].shape == arr.shape
        assert back.tensors[name].tobytes() == arr.tobytes()


def test_buffers_persist(tmp_path):
    ckpt = sample_checkpoint()
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    model = small_model(seed=5)
    model.load_state_dict(load_checkpoint(tmp_path / "a.ckpt").tensors)
    np.testing.assert_array_equal(model.grid.shift.data, ckpt.tensors["grid.shift"])
    np.testing.assert_array_equal(model.grid.scale.data, ckpt.tensors["grid.scale"])
    assert not np.all(model.grid.shift.data == 0)


def test_every_byte_is_protected(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, Checkpoint({"a": 1}, {"w": np.ones((2, 2), np.float32)}))
    raw = path.read_bytes()
    for i in range(len(raw)):
        bad = bytearray(raw)
        bad[i] ^= 0x01
        path.write_bytes(bytes(bad))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_truncated_magic_version_rejected(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, sample_checkpoint())
    raw = path.read_bytes()
    for cut in (0, 3, 8, 11, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
    path.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_float64_refused(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "a.ckpt", Checkpoint({}, {"w": np.zeros(2)}))


def test_mismatched_width_names_tensor(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", sample_checkpoint())
    with pytest.raises(ShapeError, match=r"'[a-z_.0-9]+'"):
        small_model(width=32).load_state_dict(load_checkpoint(tmp_path / "a.ckpt").tensors)
