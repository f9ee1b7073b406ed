import numpy as np
import pytest

from scfm.checkpoint import (
    CheckpointError, LoadedModel, check_shapes, load_checkpoint, save_checkpoint, student_arrays,
    teacher_arrays,
)
from scfm.distill import SCFMDistiller
from scfm.flow import FlowMatchingTeacher
from scfm.network import NetConfig
from scfm.rng import Xoshiro256pp


@pytest.fixture(scope="module")
def fitted():
    g = Xoshiro256pp(0)
    X, y = g.normal((128, 2)) * 2, g.integers(2, 128)
    t = FlowMatchingTeacher(hidden_dim=8, num_hidden_layers=2, time_embed_dim=4, n_iter=5,
                            batch_size=16).fit(X, y)
    s = SCFMDistiller(t, variant="fast-slow", n_iter=3, grid_size=16).fit(X, y)
    return t, s


def test_raw_round_trip_is_bit_exact(tmp_path):
    g = Xoshiro256pp(1)
    arrays = {"a": g.normal((3, 4)), "scalar": np.array(2.5), "v": np.array([np.pi, -0.0, 1e-300])}
    save_checkpoint(tmp_path / "x.ckpt", arrays)
    back = load_checkpoint(tmp_path / "x.ckpt")
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()


def test_student_round_trip(tmp_path, fitted):
    _, s = fitted
    save_checkpoint(tmp_path / "s.ckpt", student_arrays(s))
    m = LoadedModel.load(tmp_path / "s.ckpt")
    assert m.kind == "student" and m.ema.fast is not None and m.optim.step == 3
    for k, v in s.lora_.factors.items():
        assert np.array_equal(m.lora.factors[k], v)
    x = Xoshiro256pp(2).normal((5, 2))
    assert np.array_equal(m.field(x, 0.5, np.array([0, 1, 0, 1, 0]), 2.0),
                          s.field_(x, 0.5, np.array([0, 1, 0, 1, 0]), 2.0))


def test_teacher_round_trip(tmp_path, fitted):
    t, _ = fitted
    save_checkpoint(tmp_path / "t.ckpt", teacher_arrays(t))
    back = LoadedModel.load(tmp_path / "t.ckpt").to_teacher()
    assert np.array_equal(back.sample(range(4), steps=3), t.sample(range(4), steps=3))


def test_corrupt_files(tmp_path, fitted):
    t, _ = fitted
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, teacher_arrays(t))
    blob = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    bad.write_bytes(blob[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)
    bad.write_bytes(blob[:4] + (2).to_bytes(4, "little") + blob[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)
    bad.write_bytes(blob + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(bad)


def test_shape_mismatch_names_layer(fitted):
    t, _ = fitted
    arrays = teacher_arrays(t)
    other = NetConfig(hidden_dim=16, num_hidden_layers=2, time_embed_dim=4, class_count=2)
    with pytest.raises(CheckpointError, match=r"layer \w+"):
        check_shapes(arrays, other)
    with pytest.raises(CheckpointError, match="layer"):
        LoadedModel(arrays, other)
