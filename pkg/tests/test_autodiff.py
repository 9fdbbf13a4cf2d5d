import math

import numpy as np
import pytest

from timestream import autodiff as ad
from timestream.autodiff import ParameterStore, ShapeError, Tensor


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def numeric_grad(builder, x, eps=1e-6):
    return ad.finite_diff_grad(builder, x, eps).data


def test_sigmoid_values():
    assert ad.sigmoid(Tensor(0.0)).item() == pytest.approx(0.5, abs=1e-15)
    # 1/(1+e^-1) evaluated independently
    assert ad.sigmoid(Tensor(1.0)).item() == pytest.approx(0.7310585786300049, abs=1e-12)


def test_prelu_values():
    x = Tensor([-2.0, 3.0])
    out = ad.prelu(x, Tensor(0.25))
    assert np.allclose(out.data, [-0.5, 3.0])


def test_product_rule_grads():
    x = Tensor(2.0, requires_grad=True)
    y = Tensor(3.0, requires_grad=True)
    loss = ad.mul(x, y)
    loss.backward()
    assert x.grad == pytest.approx(3.0)
    assert y.grad == pytest.approx(2.0)


def test_sigmoid_grad_at_zero():
    x = Tensor(0.0, requires_grad=True)
    ad.sigmoid(x).backward()
    assert x.grad == pytest.approx(0.25, abs=1e-15)


def test_matmul_grad_matches_finite_diff():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    v = Tensor(rng.normal(size=3), requires_grad=True)
    loss = ad.tsum(ad.matmul(w, v))
    loss.backward()
    fd_w = numeric_grad(lambda t: ad.tsum(ad.matmul(t, v)), w)
    fd_v = numeric_grad(lambda t: ad.tsum(ad.matmul(w, t)), v)
    assert rel_err(w.grad, fd_w).max() <= 1e-5
    assert rel_err(v.grad, fd_v).max() <= 1e-5


OPS = [
    ("add", lambda a, b: ad.add(a, b), 2),
    ("sub", lambda a, b: ad.sub(a, b), 2),
    ("mul", lambda a, b: ad.mul(a, b), 2),
    ("div", lambda a, b: ad.div(a, ad.add(ad.mul(b, b), Tensor(1.0))), 2),
    ("matmul", lambda a, b: ad.matmul(ad.reshape(a, (2, 3)), ad.reshape(b, (3, 2))), 2),
    ("dot", lambda a, b: ad.dot(a, b), 2),
    ("concat", lambda a, b: ad.concat([a, b]), 2),
    ("sum", lambda a: ad.tsum(a), 1),
    ("mean", lambda a: ad.tmean(a), 1),
    ("sigmoid", lambda a: ad.sigmoid(a), 1),
    ("exp", lambda a: ad.exp(a), 1),
    ("log", lambda a: ad.log(ad.add(ad.mul(a, a), Tensor(0.5))), 1),
    ("neg", lambda a: ad.neg(a), 1),
    ("scale", lambda a: ad.scale(a, 1.7), 1),
    ("softmax", lambda a: ad.softmax(a), 1),
    ("prelu", lambda a, b: ad.prelu(a, ad.tmean(b)), 2),
    ("stack", lambda a, b: ad.stack([a, b]), 2),
    ("gather", lambda a: ad.gather_rows(ad.reshape(a, (3, 2)), np.array([0, 2, 2])), 1),
    ("segment", lambda a: ad.segment_sum(ad.reshape(a, (6, 1)), np.array([0, 0, 1, 1, 1, 2]), 3), 1),
    ("transpose", lambda a: ad.transpose(ad.reshape(a, (2, 3))), 1),
    ("clip", lambda a: ad.clip(a, -0.5, 0.5), 1),
    (
        "linear_sigmoid",
        lambda a, b: ad.linear_sigmoid(ad.reshape(a, (2, 3)), ad.reshape(b, (3, 2)), ad.tmean(a)),
        2,
    ),
    (
        "add_scaled",
        lambda a, b: ad.add_scaled(ad.reshape(a, (2, 3)), np.array([[0.7], [-1.3]]), ad.reshape(b, (2, 3))),
        2,
    ),
    (
        "rk4_combine",
        lambda a, b: ad.rk4_combine(
            ad.reshape(a, (2, 3)),
            np.array([[0.4], [0.9]]),
            ad.reshape(b, (2, 3)),
            ad.reshape(ad.scale(b, 2.0), (2, 3)),
            ad.reshape(ad.scale(a, 0.5), (2, 3)),
            ad.reshape(ad.add(a, b), (2, 3)),
        ),
        2,
    ),
]


@pytest.mark.parametrize("name,fn,arity", OPS, ids=[o[0] for o in OPS])
def test_op_gradients_match_finite_differences(name, fn, arity):
    rng = np.random.default_rng(hash(name) % (2**32))
    for _ in range(10):
        args = [Tensor(rng.normal(size=6), requires_grad=True) for _ in range(arity)]
        for i in range(arity):
            def rebuilt(x, i=i):
                probe = list(args)
                probe[i] = x
                return ad.tsum(fn(*probe))

            analytic = [Tensor(a.data, requires_grad=True) for a in args]
            ad.tsum(fn(*analytic)).backward()
            fd = numeric_grad(rebuilt, args[i])
            assert rel_err(analytic[i].grad, fd).max() <= 1e-5, name


def test_gradient_accumulation_is_exactly_double():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    loss = ad.tsum(ad.sigmoid(ad.matmul(w, Tensor(rng.normal(size=3)))))
    loss.backward()
    once = w.grad.copy()
    loss.backward()
    assert np.array_equal(w.grad, 2.0 * once)


def test_zeroing_isolates_backward_calls():
    w = Tensor([1.0, 2.0], requires_grad=True)
    ad.tsum(ad.mul(w, w)).backward()
    first = w.grad.copy()
    w.zero_grad()
    ad.tsum(ad.mul(w, w)).backward()
    assert np.array_equal(w.grad, first)


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(42)
        w = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
        v = Tensor(rng.normal(size=5))
        loss = ad.tmean(ad.sigmoid(ad.matmul(w, v)))
        loss.backward()
        return loss.data.copy(), w.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(g1, g2)


def test_backward_rejects_non_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.mul(w, w))


def test_backward_detects_detached_store():
    store = ParameterStore()
    store.add("w", [1.0, 2.0])
    other = Tensor([3.0], requires_grad=True)
    with pytest.raises(ValueError, match="detached"):
        ad.backward(ad.tsum(other), store)


def test_backward_returns_gradient_map():
    store = ParameterStore()
    w = store.add("w", [1.0, 2.0, 3.0])
    grads = ad.backward(ad.tsum(ad.mul(w, w)), store)
    assert np.allclose(grads["w"], [2.0, 4.0, 6.0])


def test_store_rejects_duplicate_paths():
    store = ParameterStore()
    store.add("a.b", [1.0])
    with pytest.raises(ValueError, match="already registered"):
        store.add("a.b", [2.0])


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "matmul" in str(exc.value)
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_softmax_max_subtraction_is_stable():
    out = ad.softmax(Tensor([1000.0, 1000.0, 999.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data.sum() == pytest.approx(1.0)


def test_finite_diff_on_square():
    fd = ad.finite_diff_grad(lambda t: ad.tsum(ad.mul(t, t)), Tensor([3.0]), eps=1e-6)
    assert fd.data[0] == pytest.approx(6.0, abs=1e-6)


def test_finite_diff_constant_fn_is_zero():
    fd = ad.finite_diff_grad(lambda t: Tensor(5.0), Tensor([1.0, 2.0]))
    assert np.array_equal(fd.data, [0.0, 0.0])


def test_finite_diff_validates_eps():
    with pytest.raises(ValueError, match="eps"):
        ad.finite_diff_grad(lambda t: ad.tsum(t), Tensor([1.0]), eps=1.0)


def test_finite_diff_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        ad.finite_diff_grad(lambda t: Tensor(math.inf), Tensor([1.0]))


def test_no_grad_suppresses_graph():
    w = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        out = ad.mul(w, w)
    assert out._vjp is None and not out.requires_grad


def test_gather_rows_accumulates_repeated_rows():
    table = Tensor(np.ones((4, 2)), requires_grad=True)
    out = ad.gather_rows(table, np.array([1, 1, 3]))
    ad.tsum(out).backward()
    assert np.array_equal(table.grad[1], [2.0, 2.0])
    assert np.array_equal(table.grad[3], [1.0, 1.0])
    assert np.array_equal(table.grad[0], [0.0, 0.0])


def test_log_rejects_non_positive():
    with pytest.raises(ValueError, match="positive"):
        ad.log(Tensor([1.0, -1.0]))
