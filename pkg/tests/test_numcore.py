import threading

import numpy as np
import pytest

import umaseq.numcore as nc


def test_sigmoid_at_zero():
    assert float(nc.sigmoid(nc.constant(0.0)).data) == pytest.approx(0.5, abs=0)


def test_softmax_uniform_rows():
    out = nc.softmax(nc.constant([0.0, 0.0, 0.0])).data
    np.testing.assert_allclose(out, np.full(3, 1.0 / 3.0), atol=1e-15)


def test_matmul_identity():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 3))
    out = nc.matmul(nc.constant(np.eye(3)), nc.constant(a)).data
    np.testing.assert_allclose(out, a, atol=0)


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(nc.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        nc.matmul(nc.constant(np.zeros((2, 3))), nc.constant(np.zeros((2, 3))))


def test_add_rejects_nonscalar_broadcast():
    with pytest.raises(nc.ShapeError):
        nc.add(nc.constant(np.zeros((2, 3))), nc.constant(np.zeros(3)))


def test_sigmoid_derivative_at_zero():
    tape = nc.Tape()
    with tape:
        x = nc.leaf(0.0)
        y = nc.sigmoid(x)
    tape.backward(y)
    assert float(x.grad) == pytest.approx(0.25, abs=1e-15)


def test_sum_gradient_is_ones():
    tape = nc.Tape()
    with tape:
        a = nc.leaf(np.arange(6.0).reshape(2, 3))
        s = nc.sum_all(a)
    tape.backward(s)
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))


def test_softmax_cross_entropy_gradient_uniform_onehot():
    # -log softmax(z)[0] at z = 0, 3 classes; frozen expectation [-2/3, 1/3, 1/3]
    # cross-checked against central differences below.
    def f(z):
        return nc.scale(nc.gather_rows(nc.log_softmax(z), [0]), -1.0)

    tape = nc.Tape()
    with tape:
        z = nc.leaf(np.zeros(3))
        loss = nc.sum_all(f(z))
    tape.backward(loss)
    np.testing.assert_allclose(z.grad, [-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], atol=1e-12)

    rel = nc.grad_check(lambda z: nc.sum_all(f(z)), [np.zeros(3)], step=1e-6)
    assert rel < 1e-8


def test_grad_check_quadratic():
    rel = nc.grad_check(lambda x: nc.sum_all(nc.mul(x, x)), [np.array(3.0)], step=1e-6)
    assert rel < 1e-8


def test_grad_check_constant_function():
    tape = nc.Tape()
    with tape:
        x = nc.leaf(np.ones(4))
        out = nc.sum_all(nc.scale(x, 0.0))
    tape.backward(out)
    np.testing.assert_array_equal(x.grad, np.zeros(4))


def test_grad_check_step_bounds():
    with pytest.raises(nc.NumcoreError):
        nc.grad_check(lambda x: nc.sum_all(x), [np.ones(2)], step=1e-2)


def test_backward_twice_without_reset_errors():
    tape = nc.Tape()
    with tape:
        x = nc.leaf(np.ones(2))
        out = nc.sum_all(x)
    tape.backward(out)
    with pytest.raises(nc.NumcoreError, match="reset"):
        tape.backward(out)


def test_tape_reset_allows_reuse():
    tape = nc.Tape()
    with tape:
        x = nc.leaf(np.ones(2))
        out = nc.sum_all(x)
    tape.backward(out)
    tape.reset()
    with tape:
        y = nc.leaf(np.full(2, 3.0))
        out2 = nc.sum_all(nc.mul(y, y))
    tape.backward(out2)
    np.testing.assert_allclose(y.grad, [6.0, 6.0])


def test_backward_needs_scalar():
    tape = nc.Tape()
    with tape:
        x = nc.leaf(np.ones(2))
        out = nc.mul(x, x)
    with pytest.raises(nc.ShapeError):
        tape.backward(out)


def test_backward_rejects_foreign_loss():
    tape = nc.Tape()
    with tape:
        x = nc.leaf(np.ones(2))
        nc.sum_all(x)
    other = nc.sum_all(nc.constant(np.ones(2)))
    with pytest.raises(nc.NumcoreError):
        tape.backward(other)


def test_forward_independent_of_taping():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 5))
    g = rng.normal(size=5)
    b = rng.normal(size=5)

    def run():
        t = nc.layer_norm(nc.as_tensor(x), nc.as_tensor(g), nc.as_tensor(b))
        return nc.softmax(t).data

    untaped = run()
    with nc.Tape():
        taped = run()
    np.testing.assert_array_equal(untaped, taped)


def test_softmax_rows_sum_to_one_and_log_softmax_consistent():
    rng = np.random.default_rng(3)
    x = rng.normal(scale=4.0, size=(6, 9))
    sm = nc.softmax(nc.constant(x)).data
    ls = nc.log_softmax(nc.constant(x)).data
    np.testing.assert_allclose(sm.sum(axis=-1), np.ones(6), atol=1e-12)
    np.testing.assert_allclose(ls, np.log(sm), atol=1e-10)


def _op_cases(rng):
    """One scalar-valued probe per op kind, with fresh random operands."""
    T, D, E = 4, 5, 3
    idx = np.array([0, 2, 2, 1])
    mask = np.array([1.0, 0.0, 1.0, 1.0])
    return [
        ("matmul", lambda a, b: nc.sum_all(nc.matmul(a, b)),
         [rng.normal(size=(T, D)), rng.normal(size=(D, E))]),
        ("transpose", lambda a: nc.sum_all(nc.mul(nc.transpose(a), nc.transpose(a))),
         [rng.normal(size=(T, D))]),
        ("add", lambda a, b: nc.sum_all(nc.mul(nc.add(a, b), nc.add(a, b))),
         [rng.normal(size=(T, D)), rng.normal(size=(T, D))]),
        ("add_scalar", lambda a, s: nc.sum_all(nc.mul(nc.add(a, s), nc.add(a, s))),
         [rng.normal(size=(T, D)), rng.normal(size=())]),
        ("mul", lambda a, b: nc.sum_all(nc.mul(a, b)),
         [rng.normal(size=(T, D)), rng.normal(size=(T, D))]),
        ("scale", lambda a: nc.sum_all(nc.mul(nc.scale(a, 1.7), nc.scale(a, 1.7))),
         [rng.normal(size=(T, D))]),
        ("add_rowvec", lambda a, v: nc.sum_all(nc.mul(nc.add_rowvec(a, v), nc.add_rowvec(a, v))),
         [rng.normal(size=(T, D)), rng.normal(size=D)]),
        ("sigmoid", lambda a: nc.sum_all(nc.mul(nc.sigmoid(a), nc.sigmoid(a))),
         [rng.normal(size=(T, D))]),
        ("tanh", lambda a: nc.sum_all(nc.mul(nc.tanh(a), nc.tanh(a))),
         [rng.normal(size=(T, D))]),
        ("gelu", lambda a: nc.sum_all(nc.mul(nc.gelu(a), nc.gelu(a))),
         [rng.normal(size=(T, D))]),
        ("softmax", lambda a: nc.sum_all(nc.mul(nc.softmax(a), nc.softmax(a))),
         [rng.normal(size=(T, D))]),
        ("log_softmax", lambda a: nc.sum_all(nc.mul(nc.log_softmax(a), nc.log_softmax(a))),
         [rng.normal(size=(T, D))]),
        ("layer_norm", lambda x, g, b: nc.sum_all(nc.mul(nc.layer_norm(x, g, b), nc.layer_norm(x, g, b))),
         [rng.normal(size=(T, D)), rng.normal(size=D), rng.normal(size=D)]),
        ("gather_rows", lambda a: nc.sum_all(nc.mul(nc.gather_rows(a, idx), nc.gather_rows(a, idx))),
         [rng.normal(size=(T, D))]),
        ("concat", lambda a, b: nc.sum_all(nc.mul(nc.concat([a, b], axis=0), nc.concat([a, b], axis=0))),
         [rng.normal(size=(T, D)), rng.normal(size=(2, D))]),
        ("masked_weighted_sum", lambda h, w: nc.sum_all(nc.mul(
            nc.masked_weighted_sum(h, w, mask), nc.masked_weighted_sum(h, w, mask))),
         [rng.normal(size=(T, D)), rng.normal(size=T)]),
        ("sum", lambda a: nc.mul(nc.sum_all(a), nc.sum_all(a)),
         [rng.normal(size=(T, D))]),
    ]


@pytest.mark.parametrize("point", range(10))
def test_every_op_grad_check(point):
    rng = np.random.default_rng(100 + point)
    for name, f, args in _op_cases(rng):
        rel = nc.grad_check(f, args, step=1e-5)
        assert rel < 1e-5, f"{name} failed grad check at point {point}: {rel}"


def test_custom_op_backward():
    # cube with a hand-supplied rule, chained through a regular op
    def cube(t):
        X = t.data
        return nc.custom([t], X ** 3, lambda g: (g * 3.0 * X ** 2,), op="cube")

    rel = nc.grad_check(lambda x: nc.sum_all(nc.mul(cube(x), x)), [np.array([0.5, -1.2, 2.0])])
    assert rel < 1e-7


def test_gather_rows_accumulates_duplicate_indices():
    tape = nc.Tape()
    with tape:
        a = nc.leaf(np.arange(6.0).reshape(3, 2))
        out = nc.sum_all(nc.gather_rows(a, [1, 1, 0]))
    tape.backward(out)
    np.testing.assert_array_equal(a.grad, [[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]])


def test_distinct_tapes_on_distinct_threads():
    results = {}

    def work(key, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(8, 8))
        tape = nc.Tape()
        with tape:
            t = nc.leaf(x)
            out = nc.sum_all(nc.mul(nc.softmax(t), nc.softmax(t)))
        tape.backward(out)
        results[key] = (float(out.data), t.grad.copy())

    threads = [threading.Thread(target=work, args=(i, 40 + i)) for i in range(4)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()

    for i in range(4):
        serial = {}
        work_serial = work  # same function, run serially for comparison
        work_serial(f"s{i}", 40 + i)
        val, grad = results[i]
        val2, grad2 = results[f"s{i}"]
        assert val == val2
        np.testing.assert_array_equal(grad, grad2)
