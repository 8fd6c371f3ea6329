import numpy as np
import pytest

from ddsr.tensor import AdamState, NonFiniteError, Tensor, adam_step, grad_check, no_grad, ops


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    y = x * x + x * 3.0  # dy/dx = 2x + 3
    y.sum().backward()
    assert x.grad.tolist() == [7.0, -3.0]


def test_backward_needs_seed_for_vectors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()
    (x * 2.0).backward(np.array([1.0, 0.0, -1.0]))
    assert x.grad.tolist() == [2.0, 0.0, -2.0]


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_frozen_leaf_gets_no_grad():
    w = Tensor(np.ones((2, 2)))
    x = Tensor(np.ones((1, 2)), requires_grad=True)
    ops.linear(x, w).sum().backward()
    assert w.grad is None
    assert x.grad.tolist() == [[2.0, 2.0]]


def test_adam_zero_gradient_keeps_params():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    state = adam_step(p, {"w": np.zeros(2)}, AdamState(lr=0.1))
    assert p["w"].data.tolist() == [1.0, -2.0]
    assert state.step == 1


def test_adam_first_step_closed_form():
    p = {"x": Tensor(np.array([0.0]))}
    state = AdamState(lr=0.01, beta1=0.0, beta2=0.0, eps=1e-8)
    adam_step(p, {"x": np.array([1.0])}, state)
    assert p["x"].data[0] == pytest.approx(-0.01 / (1 + 1e-8), abs=1e-18)


def reference_adam(x, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_quadratic_matches_reference():
    p = {"x": Tensor(np.array([1.0]))}
    state = AdamState(lr=0.1)
    for _ in range(10):
        x = p["x"]
        x.requires_grad = True
        x.grad = None
        ops.square(x).sum().backward()
        adam_step(p, {"x": x.grad}, state)
    final = p["x"].data[0]
    assert abs(final) < 1.0
    assert final == pytest.approx(reference_adam(1.0, 10, 0.1), abs=1e-12)


def test_adam_rejects_nan_and_names_parameter():
    p = {"head.weight": Tensor(np.zeros(2))}
    with pytest.raises(NonFiniteError, match="head.weight"):
        adam_step(p, {"head.weight": np.array([0.0, np.nan])}, AdamState())
    assert p["head.weight"].data.tolist() == [0.0, 0.0]


def test_adam_rejects_non_positive_lr():
    with pytest.raises(ValueError):
        AdamState(lr=0.0)


def test_grad_check_examples():
    rng = np.random.default_rng(0)
    assert grad_check(lambda x, w: ops.linear(x, w), [rng.standard_normal((3, 3)), rng.standard_normal((3, 3))]) < 1e-6
    x, w = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((2, 2, 3, 3))
    assert grad_check(lambda x, w: ops.conv2d(x, w), [x, w]) < 1e-5


def test_grad_check_detects_wrong_gradient():
    from ddsr.tensor import make_op

    def bad_square(x):
        return make_op(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")  # missing factor 2

    err = grad_check(bad_square, [np.array([1.0, 2.0])])
    assert err == pytest.approx(0.5, rel=1e-6)
    with pytest.raises(AssertionError):
        grad_check(bad_square, [np.array([1.0, 2.0])], tolerance=1e-3)


def test_grad_check_requires_f64():
    with pytest.raises(TypeError):
        grad_check(ops.square, [Tensor(np.ones(2, dtype=np.float32))])
