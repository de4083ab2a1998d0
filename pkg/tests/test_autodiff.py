import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nbadapt import autodiff as ad
from nbadapt.autodiff import AutodiffError, ShapeError, Tensor


@pytest.fixture(autouse=True)
def float64_mode():
    with ad.precision("float64"):
        ad.clear_tape()
        yield
        ad.clear_tape()


def fd_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f wrt array x, element by element."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            dn = f()
            flat[i] = orig
            gf[i] = (up - dn) / (2 * h)
    return g


def check_primitive(op, *shapes, seed=0, **kwargs):
    rng = np.random.default_rng(seed)
    tensors = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    out = op(*tensors, **kwargs)
    w = rng.normal(size=out.shape)  # random linear functional to make a scalar
    loss = ad.sum_(ad.mul(out, Tensor(w)))
    ad.backward(loss)
    for t in tensors:
        num = fd_grad(lambda t=t: float(np.sum(op(*tensors, **kwargs).data * w)), t.data)
        np.testing.assert_allclose(t.grad, num, rtol=1e-6, atol=1e-8)


# --- examples pinned by contract -------------------------------------------


def test_relu_definition():
    out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_softmax_symmetry():
    out = ad.softmax(Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [0.5, 0.5])


def test_softmax_scalar_value():
    # independent scalar computation: exp(1)/(exp(1)+exp(0)) = 1/(1+e^-1)
    out = ad.softmax(Tensor([1.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.7310585786300049, 0.2689414213699951],
                               rtol=0, atol=1e-12)


def test_square_sum_gradient():
    w = Tensor([3.0], requires_grad=True)
    loss = ad.sum_(ad.mul(w, w))
    ad.backward(loss)
    np.testing.assert_allclose(w.grad, [6.0], rtol=0, atol=0)


def test_nll_gradient_identity():
    # d(-log softmax(z)[k])/dz == softmax(z) - onehot(k), element by element
    z = Tensor([0.3, -1.2, 2.0, 0.1], requires_grad=True)
    k = 2
    loss = ad.neg(ad.take(ad.log_softmax(z), k))
    ad.backward(loss)
    soft = np.exp(z.data) / np.exp(z.data).sum()
    expect = soft.copy()
    expect[k] -= 1.0
    np.testing.assert_allclose(z.grad, expect, rtol=0, atol=1e-12)


# --- per-primitive finite-difference agreement ------------------------------


def test_add_gradient():
    check_primitive(ad.add, (3, 4), (3, 4))


def test_add_broadcast_gradient():
    check_primitive(ad.add, (3, 4), (4,))


def test_mul_gradient():
    check_primitive(ad.mul, (2, 5), (2, 5))


def test_mul_broadcast_scalar_gradient():
    check_primitive(ad.mul, (2, 3), ())


def test_matmul_gradient():
    check_primitive(ad.matmul, (3, 4), (4, 2))


def test_matmul_vector_gradient():
    check_primitive(ad.matmul, (4,), (4, 3))
    check_primitive(ad.matmul, (3, 4), (4,))


def test_matmul_transpose_flags():
    check_primitive(ad.matmul, (4, 3), (4, 2), transpose_a=True)
    check_primitive(ad.matmul, (3, 4), (2, 4), transpose_b=True)


def test_sigmoid_tanh_exp_log_gradients():
    check_primitive(ad.sigmoid, (3, 3))
    check_primitive(ad.tanh, (3, 3))
    check_primitive(ad.exp, (2, 2))
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(0.5, 2.0, size=(3,)), requires_grad=True)
    loss = ad.sum_(ad.log(x))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, 1.0 / x.data, rtol=1e-12)


def test_relu_gradient_off_kink():
    rng = np.random.default_rng(2)
    x = Tensor(rng.choice([-1.5, -0.7, 0.4, 1.2], size=(4, 4)), requires_grad=True)
    w = rng.normal(size=(4, 4))
    loss = ad.sum_(ad.mul(ad.relu(x), Tensor(w)))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, w * (x.data > 0), rtol=0, atol=0)


def test_softmax_gradient_with_temperature():
    check_primitive(ad.softmax, (5,), temperature=2.5)
    check_primitive(ad.softmax, (3, 4), temperature=0.7)


def test_softmax_temperature_equals_scaled_input():
    x = Tensor(np.linspace(-1, 2, 6))
    np.testing.assert_allclose(ad.softmax(x, temperature=3.0).data,
                               ad.softmax(Tensor(x.data / 3.0)).data, rtol=0, atol=1e-15)


def test_log_softmax_gradient():
    check_primitive(ad.log_softmax, (4,))
    check_primitive(ad.log_softmax, (2, 5))


def test_concat_stack_take_reshape_gradients():
    check_primitive(lambda a, b: ad.concat([a, b], axis=1), (2, 3), (2, 2))
    check_primitive(lambda a, b: ad.stack([a, b]), (3,), (3,))
    check_primitive(lambda a: ad.take(a, [2, 0, 2]), (4, 3))
    check_primitive(lambda a: ad.reshape(a, (6,)), (2, 3))


def test_sum_mean_gradients():
    check_primitive(lambda a: ad.sum_(a, axis=0), (3, 4))
    check_primitive(lambda a: ad.mean(a, axis=1), (3, 4))
    check_primitive(ad.mean, (2, 3))


def test_cross_entropy_gradient_and_value():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    targets = [1, 5, 0, 3]
    for eps in (0.0, 0.1):
        logits.grad = None
        loss = ad.cross_entropy(logits, targets, smoothing=eps)
        # independent scalar recomputation
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        t = np.full((4, 6), eps / 6)
        t[np.arange(4), targets] += 1.0 - eps
        expect = float(-(t * logp).sum() / 4)
        assert abs(loss.item() - expect) < 1e-12
        ad.backward(loss)
        num = fd_grad(lambda: float(ad.cross_entropy(logits, targets, smoothing=eps).data),
                      logits.data)
        np.testing.assert_allclose(logits.grad, num, rtol=1e-6, atol=1e-9)


def test_cross_entropy_validation():
    with pytest.raises(AutodiffError):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], smoothing=1.0)
    with pytest.raises(ShapeError):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1, 2])


# --- tape and backward semantics --------------------------------------------


def test_backward_requires_scalar_and_nonempty_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ad.mul(x, x)
    with pytest.raises(AutodiffError, match="scalar"):
        ad.backward(y)
    ad.clear_tape()
    with pytest.raises(AutodiffError, match="empty tape"):
        ad.backward(Tensor(1.0))


def test_tape_cleared_after_backward():
    x = Tensor([1.0], requires_grad=True)
    loss = ad.sum_(ad.mul(x, x))
    assert ad.tape_length() > 0
    ad.backward(loss)
    assert ad.tape_length() == 0


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        ad.mul(x, x)
    assert ad.tape_length() == 0


def test_gradient_accumulation_linearity():
    rng = np.random.default_rng(4)
    w = Tensor(rng.normal(size=(5,)), requires_grad=True)
    a, b = 0.3, 1.7

    def l1():
        return ad.sum_(ad.mul(w, w))

    def l2():
        return ad.sum_(ad.sigmoid(w))

    ad.backward(ad.add(ad.mul(l1(), Tensor(a)), ad.mul(l2(), Tensor(b))))
    combined = w.grad.copy()

    w.grad = None
    ad.backward(ad.mul(l1(), Tensor(a)))
    ad.backward(ad.mul(l2(), Tensor(b)))
    np.testing.assert_allclose(combined, w.grad, rtol=0, atol=1e-10)


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(5)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=(4,)))
        loss = ad.sum_(ad.tanh(ad.matmul(w, x)))
        ad.backward(loss)
        return loss.item(), w.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)


def test_grads_accumulate_across_backwards():
    w = Tensor([2.0], requires_grad=True)
    ad.backward(ad.sum_(ad.mul(w, w)))
    ad.backward(ad.sum_(ad.mul(w, w)))
    np.testing.assert_allclose(w.grad, [8.0], rtol=0, atol=0)


# --- shape validation --------------------------------------------------------


def test_broadcast_error_names_primitive_and_shapes():
    with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(3, 2\)"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError, match=r"mul"):
        ad.mul(Tensor(np.zeros((4,))), Tensor(np.zeros((5,))))


def test_broadcast_is_rightmost_size1_only():
    # (2, 3) + (3,) fine; (2, 3) + (2,) must fail even though numpy-with-
    # left-padding would also reject it; (2, 1) + (2, 3) fine
    ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    ad.add(Tensor(np.zeros((2, 1))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


def test_matmul_shape_error():
    with pytest.raises(ShapeError, match=r"matmul.*\(3, 4\).*\(5, 2\)"):
        ad.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))


# --- grad_check harness ------------------------------------------------------


def test_grad_check_quadratic_is_exact():
    w = Tensor(np.array([1.5, -2.0, 0.3]), requires_grad=True)
    report = ad.grad_check(lambda: ad.sum_(ad.mul(w, w)), {"w": w}, h=1e-4, tol=1e-10)
    assert report.passed
    assert report.max_rel_error < 1e-10


def test_grad_check_requires_float64():
    with ad.precision("float32"):
        w = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(AutodiffError, match="float64"):
            ad.grad_check(lambda: ad.sum_(ad.mul(w, w)), {"w": w})


def test_precision_mode_rejects_other_dtypes():
    with pytest.raises(AutodiffError):
        ad.set_default_dtype("int32")


# --- property tests ----------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-30, max_value=30), min_size=1, max_size=8))
def test_softmax_is_distribution(xs):
    y = ad.softmax(Tensor(np.array(xs, dtype=np.float64))).data
    assert np.all(y > 0)
    assert abs(y.sum() - 1.0) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-5, max_value=5), min_size=1, max_size=6))
def test_log_softmax_normalizes(xs):
    y = ad.log_softmax(Tensor(np.array(xs, dtype=np.float64))).data
    assert abs(np.exp(y).sum() - 1.0) < 1e-12
