import numpy as np
import pytest

from sparseseg.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from sparseseg.diffcore import Tensor


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = {
        "stem.weight": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "stem.bias": np.array([0.1, -0.2, 0.3, 1e-8], dtype=np.float32),
        "head.gain": rng.standard_normal(7).astype(np.float32),
    }
    path = tmp_path / "model.spseg"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(params)
    for name in params:
        assert loaded[name].shape == params[name].shape
        assert np.array_equal(
            loaded[name].view(np.uint32), params[name].view(np.uint32))


def test_accepts_tensors_and_casts_float64(tmp_path):
    params = {"w": Tensor(np.array([1.5, 2.5], dtype=np.float64))}
    path = tmp_path / "t.spseg"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert loaded["w"].dtype == np.float32
    np.testing.assert_array_equal(loaded["w"], [1.5, 2.5])


def test_rank_zero_scalar(tmp_path):
    path = tmp_path / "s.spseg"
    save_checkpoint(path, {"step": np.float32(42.0)})
    loaded = load_checkpoint(path)
    assert loaded["step"].shape == ()
    assert loaded["step"] == 42.0


def test_empty_checkpoint(tmp_path):
    path = tmp_path / "e.spseg"
    save_checkpoint(path, {})
    assert path.read_bytes() == MAGIC
    assert load_checkpoint(path) == {}


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.spseg"
    path.write_bytes(b"NOTMAG" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "trunc.spseg"
    save_checkpoint(path, {"w": np.ones((2, 2), dtype=np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_header_layout_is_little_endian(tmp_path):
    path = tmp_path / "layout.spseg"
    save_checkpoint(path, {"ab": np.zeros((3,), dtype=np.float32)})
    blob = path.read_bytes()
    assert blob[:6] == b"SPSEG1"
    assert blob[6:14] == (2).to_bytes(8, "little")      # name length
    assert blob[14:16] == b"ab"
    assert blob[16:24] == (1).to_bytes(8, "little")     # rank
    assert blob[24:32] == (3).to_bytes(8, "little")     # extent
    assert len(blob) == 32 + 3 * 4
