import numpy as np
import pytest

from csilab.autodiff import GraphError, ParameterStore, Tape, grad_check
from csilab.layers import he_uniform
from csilab.tensor import ShapeError


def small_tape(dtype=np.float64, seed=0):
    """conv -> bn -> leaky_relu -> pool -> conv -> sigmoid -> mse against a target."""
    store = ParameterStore(dtype=dtype, seed=seed)
    rng = store.rng
    store.register("c1.w", he_uniform(rng, (4, 2, 3, 3), 18, dtype))
    store.register("c1.b", np.zeros(4, dtype=dtype))
    store.register("bn.gamma", np.ones(4, dtype=dtype))
    store.register("bn.beta", np.zeros(4, dtype=dtype))
    store.register("bn.rm", np.zeros(4, dtype=dtype), trainable=False)
    store.register("bn.rv", np.ones(4, dtype=dtype), trainable=False)
    store.register("c2.w", he_uniform(rng, (2, 4, 3, 3), 36, dtype))
    store.register("c2.b", np.zeros(2, dtype=dtype))
    tape = Tape(store)
    x = tape.input("x")
    y = tape.add("conv2d", (x,), ("c1.w", "c1.b"), stride=1)
    y = tape.add("batch_norm", (y,), ("bn.gamma", "bn.beta", "bn.rm", "bn.rv"), momentum=0.99, eps=1e-3)
    y = tape.add("leaky_relu", (y,), alpha=0.3)
    y = tape.add("avg_pool2", (y,))
    y = tape.add("conv2d", (y,), ("c2.w", "c2.b"), stride=1)
    y = tape.add("sigmoid", (y,))
    t = tape.input("target")
    tape.add("mse_loss", (y, t))
    return tape


def bindings(rng, n=3):
    x = rng.random((n, 2, 8, 8))
    return {"x": x, "target": rng.random((n, 2, 4, 4))}


def test_store_registration_rules(rng):
    store = ParameterStore(dtype=np.float32)
    store.register("w", np.ones((2, 2)))
    with pytest.raises(GraphError):
        store.register("w", np.zeros((2, 2)))
    with pytest.raises(GraphError):
        store["nope"]
    with pytest.raises(ShapeError):
        store["w"] = np.zeros((3, 3))
    assert store.trainable_names() == ["w"]
    store.register("rm", np.zeros(2), trainable=False)
    assert not store.is_trainable("rm")


def test_store_clone_and_load(rng):
    store = ParameterStore(dtype=np.float64)
    store.register("a", rng.random((3, 3)))
    snap = store.clone_values()
    store["a"] = np.zeros((3, 3))
    store.load_values(snap)
    assert np.array_equal(store["a"], snap["a"])


def test_forward_requires_all_inputs(rng):
    tape = small_tape()
    with pytest.raises(GraphError, match="unbound"):
        tape.forward({"x": rng.random((1, 2, 8, 8))})


def test_backward_before_forward():
    tape = small_tape()
    with pytest.raises(GraphError, match="backward before forward"):
        tape.backward()


def test_backward_requires_scalar_terminal(rng):
    store = ParameterStore(dtype=np.float64)
    tape = Tape(store)
    tape.input("x")
    tape.forward({"x": rng.random((2, 2, 4, 4))})
    with pytest.raises(GraphError, match="scalar"):
        tape.backward()


def test_bad_graph_edges():
    tape = Tape(ParameterStore())
    with pytest.raises(GraphError):
        tape.add("leaky_relu", (0,), alpha=0.3)  # no node 0 yet


def test_unknown_op(rng):
    tape = Tape(ParameterStore(dtype=np.float64))
    x = tape.input("x")
    tape.add("frobnicate", (x,))
    with pytest.raises(GraphError, match="unknown op"):
        tape.forward({"x": rng.random((1, 1, 2, 2))})


def test_loss_value_matches_direct_computation(rng):
    tape = small_tape()
    b = bindings(rng)
    loss = float(tape.forward(b, mode="train").reshape(()))
    pred = tape.value(tape.output_id - 2)  # sigmoid output
    direct = np.sum((pred - b["target"]) ** 2) / b["x"].shape[0]
    assert np.isclose(loss, direct, rtol=1e-12)


def test_running_stats_update_only_in_train(rng):
    tape = small_tape()
    b = bindings(rng)
    rm0 = tape.store["bn.rm"].copy()
    tape.forward(b, mode="infer")
    assert np.array_equal(tape.store["bn.rm"], rm0)
    tape.forward(b, mode="train")
    assert not np.array_equal(tape.store["bn.rm"], rm0)


def test_input_gradient_flows(rng):
    tape = small_tape()
    b = bindings(rng)
    tape.forward(b, mode="train")
    _, input_grads = tape.backward()
    assert input_grads["x"].shape == b["x"].shape
    assert np.any(input_grads["x"] != 0)
    # target gradient is the negated prediction gradient direction
    assert input_grads["target"].shape == b["target"].shape


def test_grad_check_small_graph(rng):
    tape = small_tape()
    b = bindings(rng)
    for name in tape.store.trainable_names():
        err = grad_check(tape, b, name, probe_count=16, rng=rng)
        assert err < 1e-6, f"{name}: {err}"


def test_grad_check_rejects_float32(rng):
    tape = small_tape(dtype=np.float32)
    with pytest.raises(GraphError, match="float64"):
        grad_check(tape, bindings(rng), "c1.w")


def test_grad_check_eps_bounds(rng):
    tape = small_tape()
    with pytest.raises(ValueError):
        grad_check(tape, bindings(rng), "c1.w", eps=1e-2)


def test_forward_deterministic(rng):
    tape = small_tape()
    b = bindings(rng)
    y1 = tape.forward(b, mode="infer").copy()
    y2 = tape.forward(b, mode="infer")
    assert np.array_equal(y1, y2)
