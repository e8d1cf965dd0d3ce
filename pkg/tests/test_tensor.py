import numpy as np
import pytest

from radarflow import tensor as T
from radarflow.geometry import random_rotation

TOL = 1e-5


def _param(rng, *shape, low=None):
    data = rng.normal(size=shape)
    if low is not None:
        data = np.abs(data) + low
    return T.tensor(data, True)


def _weights(rng, shape):
    return T.tensor(rng.normal(size=shape))


UNARY = {
    "relu": lambda x: T.relu(x),
    "leaky_relu": lambda x: T.leaky_relu(x, 0.1),
    "exp": lambda x: T.exp(x),
    "abs": lambda x: T.tabs(x),
    "scale": lambda x: T.scale(x, -2.5),
    "softmax0": lambda x: T.softmax(x, axis=0),
    "softmax1": lambda x: T.softmax(x, axis=1),
    "reshape": lambda x: T.reshape(x, (2, 10)),
    "transpose": lambda x: T.transpose(x),
    "expand": lambda x: T.expand(x, 3),
    "sum0": lambda x: T.tsum(x, axis=0),
    "mean1": lambda x: T.mean(x, axis=1),
    "max0": lambda x: T.tmax(x, axis=0),
    "max1": lambda x: T.tmax(x, axis=1),
    "sqnorm": lambda x: T.squared_norm(x, axis=1),
    "gather": lambda x: T.gather(x, np.array([[0, 3], [3, 3], [1, 0]])),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    x = _param(rng, 4, 5)
    # keep entries away from the kinks of relu/abs and make max unique
    x.data = x.data + np.sign(x.data) * 0.05 + np.arange(20).reshape(4, 5) * 1e-3
    w = _weights(rng, UNARY[name](x).shape)
    err = T.gradcheck(lambda: T.tsum(T.mul(UNARY[name](x), w)), [x])
    assert err < TOL


def test_log_sqrt_gradients(rng):
    x = _param(rng, 3, 4, low=0.5)
    w = _weights(rng, (3, 4))
    assert T.gradcheck(lambda: T.tsum(T.mul(T.log(x), w)), [x]) < TOL
    assert T.gradcheck(lambda: T.tsum(T.mul(T.sqrt(x), w)), [x]) < TOL


def test_binary_gradients(rng):
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    s = T.tensor(rng.normal(), True)
    w = _weights(rng, (3, 4))
    for f in (T.add, T.sub, T.mul):
        assert T.gradcheck(lambda: T.tsum(T.mul(f(a, b), w)), [a, b]) < TOL
        assert T.gradcheck(lambda: T.tsum(T.mul(f(a, s), w)), [a, s]) < TOL
        assert T.gradcheck(lambda: T.tsum(T.mul(f(s, a), w)), [a, s]) < TOL


def test_matmul_linear_concat_gradients(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4, 2)
    x, wt, bias = _param(rng, 2, 3, 4), _param(rng, 4, 5), _param(rng, 5)
    assert T.gradcheck(lambda: T.tsum(T.mul(T.matmul(a, b), _fixed(rng, (3, 2)))), [a, b]) < TOL
    wl = _fixed(rng, (2, 3, 5))
    assert T.gradcheck(lambda: T.tsum(T.mul(T.linear(x, wt, bias), wl)), [x, wt, bias]) < TOL
    c = _param(rng, 3, 2)
    wc = _fixed(rng, (3, 6))
    assert T.gradcheck(lambda: T.tsum(T.mul(T.concat([a, c], axis=1), wc)), [a, c]) < TOL


_FIXED = {}


def _fixed(rng, shape):
    if shape not in _FIXED:
        _FIXED[shape] = T.tensor(rng.normal(size=shape))
    return _FIXED[shape]


def test_full_sum_and_mean_gradients(rng):
    x = _param(rng, 3, 3)
    assert T.gradcheck(lambda: T.tsum(T.mul(x, x)), [x]) < TOL
    assert T.gradcheck(lambda: T.mean(T.mul(x, x)), [x]) < TOL


@pytest.mark.parametrize("reflect", [False, True])
def test_procrustes_gradient(reflect, rng):
    R0 = random_rotation(rng)
    if reflect:
        R0 = R0 @ np.diag([1.0, 1.0, -1.0])
    m = T.tensor(R0 @ np.diag([5.0, 3.0, 1.0]) + 0.1 * rng.normal(size=(3, 3)), True)
    w = _weights(rng, (3, 3))
    R = T.procrustes_rotation(m).data
    assert np.allclose(R @ R.T, np.eye(3)) and np.linalg.det(R) == pytest.approx(1.0)
    assert T.gradcheck(lambda: T.tsum(T.mul(T.procrustes_rotation(m), w)), [m]) < TOL


def test_procrustes_maximizes_trace(rng):
    m = rng.normal(size=(3, 3))
    R = T.procrustes_rotation(T.tensor(m)).data
    best = np.trace(R.T @ m)
    for _ in range(200):
        assert np.trace(random_rotation(rng).T @ m) <= best + 1e-12


def test_max_tie_routes_to_first():
    x = T.tensor(np.array([[1.0, 3.0, 3.0], [2.0, 2.0, 0.0]]), True)
    T.backward(T.tsum(T.tmax(x, axis=1)))
    assert x.grad.tolist() == [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]


def test_gather_accumulates_repeats():
    x = T.tensor(np.arange(6.0).reshape(3, 2), True)
    T.backward(T.tsum(T.gather(x, np.array([0, 0, 2, 0]))))
    assert x.grad.tolist() == [[3.0, 3.0], [0.0, 0.0], [1.0, 1.0]]


def test_shared_subexpression_accumulates():
    x = T.tensor(np.array(2.0), True)
    y = T.mul(x, x)
    z = T.add(y, y)  # 2 x^2
    T.backward(z)
    assert x.grad == pytest.approx(8.0)


def test_backward_twice_is_stale():
    x = T.tensor(np.ones(3), True)
    loss = T.tsum(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(T.StaleTape):
        T.backward(loss)


def test_non_scalar_root():
    x = T.tensor(np.ones(3), True)
    with pytest.raises(T.NonScalarRoot):
        T.backward(T.scale(x, 2.0))


def test_shape_errors():
    a = T.tensor(np.ones((2, 3)))
    with pytest.raises(T.ShapeMismatch):
        T.add(a, T.tensor(np.ones((3, 2))))
    with pytest.raises(T.ShapeMismatch):
        T.linear(a, T.tensor(np.ones((2, 2))))
    with pytest.raises(T.ShapeMismatch):
        T.matmul(a, a)
    with pytest.raises(T.InvalidAxis):
        T.tsum(a, axis=2)
    with pytest.raises(T.GatherOutOfBounds):
        T.gather(a, np.array([2]))
    with pytest.raises(T.GatherOutOfBounds):
        T.gather(a, np.array([-1]))
    with pytest.raises(T.ShapeMismatch):
        T.procrustes_rotation(T.tensor(np.ones((2, 2))))


def test_constants_build_no_graph():
    a = T.tensor(np.ones(3))
    out = T.exp(a)
    assert not out.requires_grad and out._backward is None


def test_no_grad_block():
    x = T.tensor(np.ones(3), True)
    with T.no_grad():
        y = T.tsum(T.mul(x, x))
    assert not y.requires_grad
    assert T.tsum(T.mul(x, x)).requires_grad


def test_stop_gradient():
    x = T.tensor(np.array([1.0, 2.0]), True)
    T.backward(T.tsum(T.mul(x, T.stop_gradient(x))))
    assert x.grad.tolist() == [1.0, 2.0]


def test_operator_sugar():
    a = T.tensor(np.array([1.0, 2.0]), True)
    out = ((a + a) * a - a).sum()
    T.backward(out)
    assert np.allclose(a.grad, 4 * a.data - 1)


def test_relative_error_definition():
    assert T.relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert T.relative_error([0.0], [0.0]) == 0.0
    assert T.relative_error([1.0, 0.0], [0.0, 1.0]) == pytest.approx(np.sqrt(2))
