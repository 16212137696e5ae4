import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ssmn import autodiff as ad


def grad_of(build, *tensors):
    tape = ad.Tape()
    with tape:
        loss = build()
    return tape.backward(loss, list(tensors)), loss


def test_relu_values():
    assert ad.relu([-1.0, 0.0, 2.5]).value.tolist() == [0.0, 0.0, 2.5]


def test_identity_matmul():
    a = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(ad.matmul(np.eye(3), a).value, a)


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(np.zeros(4)).value, [0.25] * 4)


def test_dot_gradient():
    w = ad.param([1.0, 2.0], "w")
    g, _ = grad_of(lambda: ad.dot(w, ad.const([3.0, 4.0])), w)
    np.testing.assert_array_equal(g["w"], [3.0, 4.0])


def test_relu_subgradient():
    x = ad.param([-1.0, 2.0], "x")
    g, _ = grad_of(lambda: ad.sum_(ad.relu(x)), x)
    np.testing.assert_array_equal(g["x"], [0.0, 1.0])


def test_square_fd_is_near_exact():
    err = ad.scalar_fn_check(lambda x: float(x[0] ** 2), lambda x: 2 * x, [3.0])
    assert err < 1e-8


def _check_tensors(build, tensors, h=1e-5):
    tape = ad.Tape()
    with tape:
        loss = build()
    grads = tape.backward(loss, tensors)

    def fn():
        t = ad.Tape()
        with t:
            v = build().item()
        return v, t.activation_signature()

    return ad.finite_diff_check(fn, tensors, [grads[t.name] for t in tensors], h=h)


def test_two_layer_perceptron_matches_finite_differences():
    rng = np.random.default_rng(1)
    w1 = ad.param(rng.normal(size=(5, 7)), "w1")
    b1 = ad.param(rng.normal(size=7), "b1")
    w2 = ad.param(rng.normal(size=(7,)), "w2")
    x = ad.const(rng.normal(size=(4, 5)))
    res = _check_tensors(lambda: ad.sum_(ad.tanh(ad.matmul(ad.relu(ad.add(ad.matmul(x, w1), b1)), w2))), [w1, b1, w2])
    assert res.max_rel_error < 1e-6
    assert res.n_checked > 40


# one builder per primitive: (inputs, function of the parameter tensors -> scalar)
def _prim_cases(rng):
    m = lambda *s: rng.normal(size=s)
    r = lambda *s: ad.const(rng.normal(size=s))
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)
    ro3, r34b, r4 = r(3, 4), r(3, 4), r(2, 4, 4, 3)
    r2 = r(2, 2, 2, 3)
    return {
        "add": ([m(3, 4), m(4)], lambda a, b: ad.sum_(ad.mul(ad.add(a, b), ro3))),
        "sub": ([m(3, 4), m(3, 4)], lambda a, b: ad.sum_(ad.mul(ad.sub(a, b), ro3))),
        "mul": ([m(3, 4), m(3, 4)], lambda a, b: ad.sum_(ad.mul(a, b))),
        "scale": ([m(3, 4)], lambda a: ad.sum_(ad.mul(ad.scale(a, -2.5), ro3))),
        "matmul": ([m(3, 5), m(5, 4)], lambda a, b: ad.sum_(ad.mul(ad.matmul(a, b), ro3))),
        "dot": ([m(6), m(6)], lambda a, b: ad.dot(a, b)),
        "concat": ([m(3, 2), m(3, 2)], lambda a, b: ad.sum_(ad.mul(ad.concat([a, b], axis=1), ro3))),
        "take": ([m(5, 4)], lambda a: ad.sum_(ad.mul(ad.take(a, [4, 0, 4]), r34b))),
        "slice": ([m(5, 4)], lambda a: ad.sum_(ad.mul(ad.slice_(a, slice(1, 4)), ro3))),
        "reshape": ([m(12)], lambda a: ad.sum_(ad.mul(ad.reshape(a, (3, 4)), ro3))),
        "transpose": ([m(4, 3)], lambda a: ad.sum_(ad.mul(ad.transpose(a), ro3))),
        "relu": ([m(3, 4)], lambda a: ad.sum_(ad.mul(ad.relu(a), ro3))),
        "tanh": ([m(3, 4)], lambda a: ad.sum_(ad.mul(ad.tanh(a), ro3))),
        "sigmoid": ([m(3, 4)], lambda a: ad.sum_(ad.mul(ad.sigmoid(a), ro3))),
        "softmax": ([m(3, 4)], lambda a: ad.sum_(ad.mul(ad.softmax(a), ro3))),
        "log_softmax": ([m(3, 4)], lambda a: ad.sum_(ad.mul(ad.log_softmax(a), ro3))),
        "log": ([pos(3, 4)], lambda a: ad.sum_(ad.mul(ad.log(a), ro3))),
        "sum": ([m(3, 4)], lambda a: ad.sum_(a)),
        "conv2d": ([m(2, 4, 4, 2), m(3, 3, 2, 3), m(3)],
                   lambda x, w, b: ad.sum_(ad.mul(ad.conv2d(x, w, b), r4))),
        "maxpool2": ([m(2, 4, 4, 3)], lambda x: ad.sum_(ad.mul(ad.maxpool2(x), r2))),
    }


def test_every_primitive_has_a_gradient_case():
    assert set(_prim_cases(np.random.default_rng(0))) == set(ad.primitives())


@pytest.mark.parametrize("op", sorted(_prim_cases(np.random.default_rng(0))))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients(op, seed):
    values, fn = _prim_cases(np.random.default_rng([seed, 99]))[op]
    tensors = [ad.param(v, f"x{i}") for i, v in enumerate(values)]
    res = _check_tensors(lambda: fn(*tensors), tensors)
    assert res.n_checked > 0
    assert res.max_rel_error < 1e-4


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        ad.matmul(np.zeros((2, 3)), np.zeros((4, 5)))


def test_no_general_broadcasting():
    with pytest.raises(ad.ShapeError):
        ad.add(np.zeros((3, 4)), np.zeros((3, 1)))


def test_non_finite_values_are_rejected():
    with pytest.raises(FloatingPointError):
        ad.const([1.0, np.nan])
    with pytest.raises(FloatingPointError):
        ad.log([0.0, 1.0])


def test_backward_errors():
    x = ad.param(np.ones(3), "x")
    tape = ad.Tape()
    with tape:
        y = ad.relu(x)
    with pytest.raises(ad.ShapeError):
        tape.backward(y, [x])
    with pytest.raises(ValueError, match="not produced"):
        tape.backward(ad.sum_(x), [x])  # computed outside the tape
    with tape:
        s = ad.sum_(y)
    tape.backward(s, [x])
    with pytest.raises(RuntimeError):
        tape.backward(s, [x])


def test_unreachable_parameter_gets_zero():
    x = ad.param(np.ones(3), "x")
    z = ad.param(np.ones(2), "z")
    g, _ = grad_of(lambda: ad.sum_(x), x, z)
    np.testing.assert_array_equal(g["z"], 0.0)
    np.testing.assert_array_equal(z.grad, 0.0)


def test_gradient_accumulates_over_paths():
    rng = np.random.default_rng(3)
    w = ad.param(rng.normal(size=4), "w")
    x1, x2 = rng.normal(size=4), rng.normal(size=4)
    g, _ = grad_of(lambda: ad.add(ad.dot(w, x1), ad.sum_(ad.mul(w, ad.mul(w, ad.const(x2))))), w)
    np.testing.assert_allclose(g["w"], x1 + 2 * w.value * x2, rtol=1e-12)


def test_replay_is_bit_identical_and_forward_pure():
    rng = np.random.default_rng(4)
    x = ad.const(rng.normal(size=(2, 6, 6, 1)))
    w = ad.param(rng.normal(size=(3, 3, 1, 4)), "w")
    b = ad.param(rng.normal(size=4), "b")
    tape = ad.Tape()
    with tape:
        out = ad.maxpool2(ad.relu(ad.conv2d(x, w, b)))
    for recorded, fresh in zip(tape.nodes, tape.replay()):
        assert np.array_equal(recorded.output.value, fresh)
    assert np.array_equal(out.value, ad.maxpool2(ad.relu(ad.conv2d(x, w, b))).value)


def test_maxpool_ties_go_to_lowest_flat_index():
    x = ad.param(np.ones((1, 2, 2, 1)), "x")
    g, _ = grad_of(lambda: ad.sum_(ad.maxpool2(x)), x)
    assert g["x"].reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]


def test_conv_matches_direct_correlation():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    out = ad.conv2d(x, w, np.zeros(3)).value
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 5, 5, 3))
    for i in range(5):
        for j in range(5):
            ref[0, i, j] = np.einsum("abc,abcd->d", xp[0, i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_forward_op_by_name():
    assert ad.forward_op("relu", [[-2.0, 3.0]]).value.tolist() == [0.0, 3.0]
    with pytest.raises(KeyError):
        ad.forward_op("gelu", [[1.0]])


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(v):
    p = ad.softmax(v).value
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(ad.log_softmax(v).value, np.log(np.maximum(p, 1e-300)), atol=1e-9)


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-1e3, 1e3)))
def test_sigmoid_stable_and_bounded(v):
    s = ad.sigmoid(v).value
    assert np.all((s >= 0) & (s <= 1))


def test_gradient_check_flags_a_wrong_gradient():
    x = ad.param(np.array([1.0, -2.0]), "x")

    def fn():
        return float(np.sum(x.value ** 3)), ()

    good = ad.finite_diff_check(fn, [x], [3 * x.value ** 2])
    bad = ad.finite_diff_check(fn, [x], [3 * x.value ** 2 * 1.01])
    assert good.max_rel_error < 1e-8
    assert bad.max_rel_error > 1e-3
