import numpy as np
import pytest

from balnorm.autodiff import Node, backward, conv2d, grad_check, matmul
from balnorm.errors import ConfigurationError, NonFiniteError, NonScalarRootError
from balnorm.tensor import ConvSpec


def test_sum_gradient_is_ones(rng):
    x = Node.leaf(rng.normal(size=(2, 3)))
    grads = backward(x.sum(), [x])
    np.testing.assert_array_equal(grads[x], np.ones((2, 3)))


def test_quadratic_gradient():
    p = Node.leaf([1.0, 2.0])
    grads = backward((p * p).sum(), [p])
    np.testing.assert_allclose(grads[p], [2.0, 4.0], rtol=1e-9)

    report = grad_check(lambda q: (q["p"] * q["p"]).sum(), {"p": [1.0, 2.0]})
    assert report.passed
    assert report.max_rel_error["p"] <= 1e-8


def test_non_scalar_root():
    x = Node.leaf(np.ones(3))
    with pytest.raises(NonScalarRootError):
        backward(x * 2.0)


def test_unreachable_leaf_gets_zeros():
    x, y = Node.leaf([1.0, 2.0]), Node.leaf([3.0])
    grads = backward(x.sum(), [x, y])
    np.testing.assert_array_equal(grads[y], [0.0])


def test_backward_twice_is_identical(rng):
    x = Node.leaf(rng.normal(size=(3, 3)))
    root = (x * x).exp().sum()
    first = backward(root, [x])[x].copy()
    second = backward(root, [x])[x]
    np.testing.assert_array_equal(first, second)


def test_shared_subexpression_accumulates():
    x = Node.leaf([3.0])
    y = x * 2.0
    grads = backward((y + y).sum(), [x])
    np.testing.assert_array_equal(grads[x], [4.0])


def test_gradient_is_linear(rng):
    values = rng.uniform(0.5, 2.0, size=(4,))

    def f(p):
        return (p.exp() * p).sum()

    def g(p):
        return (p**3.0).sum()

    x = Node.leaf(values)
    combined = backward(2.0 * f(x) + 3.0 * g(x), [x])[x]
    gf = backward(f(x), [x])[x]
    gg = backward(g(x), [x])[x]
    np.testing.assert_allclose(combined, 2.0 * gf + 3.0 * gg, rtol=1e-12)


def test_broadcast_gradients(rng):
    a = Node.leaf(rng.normal(size=(3, 1)))
    b = Node.leaf(rng.normal(size=(1, 4)))
    grads = backward((a * b).sum(), [a, b])
    np.testing.assert_allclose(grads[a][:, 0], np.full(3, b.value.sum()))
    np.testing.assert_allclose(grads[b][0], np.full(4, a.value.sum()))


@pytest.mark.parametrize(
    "name, fn",
    [
        ("div", lambda p: (p["a"] / p["b"]).sum()),
        ("pow", lambda p: (p["a"] ** 1.5).sum()),
        ("log", lambda p: (p["a"].log() * p["b"]).sum()),
        ("matmul", lambda p: matmul(p["a"], p["b"].reshape(3, 2)).exp().sum()),
        ("mean", lambda p: (p["a"].mean(axis=1, keepdims=True) * p["a"]).sum()),
        ("batch_head", lambda p: (p["a"].batch_head(1) * 3.0).sum() + p["b"].sum()),
        ("neg_sub", lambda p: (-(p["a"] - p["b"]) ** 2.0).sum()),
    ],
)
def test_primitive_gradients_match_finite_differences(rng, name, fn):
    params = {"a": rng.uniform(0.5, 2.0, size=(2, 3)), "b": rng.uniform(0.5, 2.0, size=(2, 3))}
    report = grad_check(fn, params)
    assert report.passed, f"{name}: {report.worst}"


@pytest.mark.parametrize("spec", [ConvSpec(1, "cyclic"), ConvSpec(2, "cyclic"), ConvSpec(1, "zero")])
def test_conv_gradient_matches_finite_differences(rng, spec):
    params = {"x": rng.normal(size=(2, 2, 4, 4)), "w": rng.normal(size=(3, 2, 3, 3))}
    projection = rng.normal(size=conv2d(params["x"], params["w"], spec).shape)
    report = grad_check(lambda p: (conv2d(p["x"], p["w"], spec) * projection).sum(), params)
    assert report.passed, report.worst


def test_kernel_gradient_of_total_output_is_channel_sum(rng):
    x = rng.uniform(size=(2, 3, 4, 4))
    w = Node.leaf(rng.normal(size=(2, 3, 3, 3)))
    grads = backward(conv2d(x, w).sum(), [w])
    v = x.sum(axis=(0, 2, 3))
    np.testing.assert_allclose(grads[w], np.broadcast_to(v[None, :, None, None], w.shape), rtol=1e-12)


def test_relu_kink_is_excluded():
    report = grad_check(lambda p: p["x"].relu().sum(), {"x": [0.0, 1.0, -1.0]})
    assert report.passed
    assert report.excluded["x"] == [(0,)]


def test_relu_subgradient_at_zero():
    x = Node.leaf([0.0, 2.0])
    np.testing.assert_array_equal(backward(x.relu().sum(), [x])[x], [0.0, 1.0])


def test_grad_check_rejects_bad_step():
    with pytest.raises(ConfigurationError):
        grad_check(lambda p: p["x"].sum(), {"x": [1.0]}, h=0.0)


def test_grad_check_non_finite():
    with pytest.raises(NonFiniteError):
        with np.errstate(invalid="ignore"):
            grad_check(lambda p: p["x"].log().sum(), {"x": [-1.0]})
