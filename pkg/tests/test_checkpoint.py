import numpy as np
import pytest

from taskmoe.checkpoint import load_model, save_model
from taskmoe.errors import DataFormatError
from taskmoe.model import forward_dense, forward_sparse, init_model
from taskmoe.routing import RoutingBudget


def make_model(seed=0):
    return init_model(
        np.random.default_rng(seed),
        num_features=6,
        d_hidden=9,
        d_in=7,
        d_out=5,
        num_experts=6,
        num_tasks=3,
        budget=RoutingBudget(2, 1),
        task_loss_weights=np.array([1.0, 0.5, 2.0]),
        lb_strength=0.02,
        expert_nonlinearity="relu",
        router_task_weights=np.array([1.0, 1.0, 3.0]),
    )


def test_round_trip_bitwise_identical_predictions(tmp_path):
    model = make_model()
    path = str(tmp_path / "model.bin")
    save_model(model, seed=42, path=path)
    loaded, seed = load_model(path)
    assert seed == 42
    assert loaded.budget == model.budget
    assert loaded.experts.nonlinearity == "relu"
    assert np.array_equal(loaded.task_loss_weights, model.task_loss_weights)
    assert np.array_equal(loaded.routers.task_weights, model.routers.task_weights)
    x = np.random.default_rng(1).standard_normal((9, 6))
    for forward in (forward_sparse, forward_dense):
        a = forward(x, model, keep_cache=False).predictions
        b = forward(x, loaded, keep_cache=False).predictions
        assert np.array_equal(a, b)


def test_save_is_byte_stable(tmp_path):
    model = make_model(seed=3)
    p1, p2 = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
    save_model(model, 7, p1)
    save_model(model, 7, p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_bad_magic_rejected(tmp_path):
    path = str(tmp_path / "junk.bin")
    with open(path, "wb") as handle:
        handle.write(b"NOTMAGIC" + b"\x00" * 64)
    with pytest.raises(DataFormatError, match="magic"):
        load_model(path)


def test_truncated_rejected(tmp_path):
    model = make_model(seed=4)
    path = str(tmp_path / "model.bin")
    save_model(model, 1, path)
    raw = open(path, "rb").read()
    with open(path, "wb") as handle:
        handle.write(raw[: len(raw) // 2])
    with pytest.raises(DataFormatError, match="truncated"):
        load_model(path)


def test_trailing_bytes_rejected(tmp_path):
    model = make_model(seed=5)
    path = str(tmp_path / "model.bin")
    save_model(model, 1, path)
    with open(path, "ab") as handle:
        handle.write(b"\x00" * 8)
    with pytest.raises(DataFormatError, match="trailing"):
        load_model(path)
