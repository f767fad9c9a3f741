import numpy as np
import pytest

from autofocus import autodiff as ad
from autofocus.autodiff import Node, Parameter
from autofocus.gradcheck import CASES, run_case
from autofocus.layers import ConvSpec, conv3d, relu
from autofocus.tensor_core import ShapeError


def test_forward_simple_graphs():
    x = Node(np.array([1.0, 2.0]))
    assert (x + x).value.tolist() == [2, 4]
    assert ad.relu(Node(np.array(-1.0))).value == 0


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((1, 2, 6, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    spec = ConvSpec(2, 3, 3, 2)
    a = relu(conv3d(x, spec, w)).value
    b = relu(conv3d(x, spec, w)).value
    assert a.tobytes() == b.tobytes()


def test_shape_error_names_shapes():
    with pytest.raises(ShapeError, match="broadcast"):
        ad.add(Node(np.zeros((2, 3))), Node(np.zeros((3, 2))))


def test_backward_dot():
    x = np.array([1.0, -2.0, 3.0])
    w = Parameter(np.array([0.5, 0.1, 0.2]), "w")
    grads = ad.backward(ad.sum_all(ad.mul(w, x)), [w])
    assert np.array_equal(grads["w"], x)


def test_backward_requires_scalar():
    w = Parameter(np.ones(3), "w")
    with pytest.raises(ShapeError):
        ad.backward(ad.mul(w, 2.0))


def test_unreachable_parameter_gets_zero():
    w = Parameter(np.ones(3), "w")
    u = Parameter(np.ones(2), "unused")
    grads = ad.backward(ad.sum_all(w), [w, u])
    assert np.array_equal(grads["unused"], np.zeros(2))
    assert grads.unreachable == ["unused"]


def test_shared_parameter_accumulates(rng):
    """A kernel used at K sites gets the sum of the K per-site gradients."""
    x = rng.standard_normal((1, 2, 5, 5, 5))
    w0 = rng.standard_normal((2, 2, 3, 3, 3))
    rates = (1, 2, 3)

    shared = Parameter(w0.copy(), "shared")
    loss = None
    for r in rates:
        term = ad.sum_all(ad.mul(conv3d(x, ConvSpec(2, 2, 3, r), shared), float(r)))
        loss = term if loss is None else ad.add(loss, term)
    g_shared = ad.backward(loss, [shared])["shared"]

    copies = [Parameter(w0.copy(), f"copy{r}") for r in rates]
    loss = None
    for r, c in zip(rates, copies):
        term = ad.sum_all(ad.mul(conv3d(x, ConvSpec(2, 2, 3, r), c), float(r)))
        loss = term if loss is None else ad.add(loss, term)
    g = ad.backward(loss, copies)
    total = g["copy1"] + g["copy2"] + g["copy3"]
    assert np.max(np.abs(g_shared - total)) <= 1e-12


def test_relative_error_formula():
    a = np.array([1.0, 2.0])
    n = np.array([1.0, 2.1])
    assert ad.relative_error(a, n) == pytest.approx(0.1 / 4.1)
    assert ad.relative_error(np.zeros(2), np.zeros(2)) == 0.0


def test_grad_check_detects_wrong_gradient():
    def bad(x):
        # forward x^2, backward claims 3x
        return Node(x.value ** 2, (x,), lambda g, needs: (3 * x.value * g,), "bad")

    report = ad.grad_check(bad, {"x": np.array([1.0, 2.0])})
    assert not report.passed


@pytest.mark.parametrize("name", sorted(CASES))
def test_registered_op_gradients(name):
    for seed in range(3):
        report = run_case(name, seed)
        assert report.passed, str(report)
