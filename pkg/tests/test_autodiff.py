import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from simt import autodiff as ad
from simt.autodiff import Graph, GradientError, ParamSet, ShapeError, check_gradient, grad
from simt.nn import MLPConfig, init_params, mlp_forward


def test_build_examples():
    g = Graph()
    a, b = g.constant([1.0, 2.0]), g.constant([3.0, 4.0])
    assert np.array_equal(ad.build("add", [a, b]).value, [4.0, 6.0])
    m = ad.matmul(g.constant([[1.0, 2.0]]), g.constant([[3.0], [4.0]]))
    assert m.shape == (1, 1) and m.value[0, 0] == 11.0
    s = ad.softmax(g.constant([0.0, 0.0, 0.0]))
    assert np.allclose(s.value, 1 / 3, rtol=0, atol=1e-15)


def test_shape_error_names_op_and_shapes():
    g = Graph()
    with pytest.raises(ShapeError) as e:
        ad.add(g.constant(np.zeros((2, 3))), g.constant(np.zeros((3, 2))))
    assert "add" in str(e.value) and "(2, 3)" in str(e.value)
    with pytest.raises(ShapeError):
        ad.matmul(g.constant(np.zeros((2, 3))), g.constant(np.zeros((2, 3))))


def test_leading_broadcast_only():
    g = Graph()
    x = g.constant(np.ones((4, 2, 3)))
    assert ad.add(x, g.constant(np.ones((2, 3)))).shape == (4, 2, 3)
    with pytest.raises(ShapeError):
        ad.add(x, g.constant(np.ones((4, 1, 3))))


def test_power_rules():
    g = Graph()
    x = g.param(3.0)
    (dx,) = grad(ad.square(x), [x])
    assert dx.value == 6.0
    g = Graph()
    x = g.param(2.0)
    (d1,) = grad(ad.mul(ad.square(x), x), [x], create_graph=True)
    (d2,) = grad(d1, [x])
    assert d2.value == 12.0


def test_matmul_linearity_example():
    g = Graph()
    a = g.param([[1.0, 2.0]])
    b = g.constant([[3.0], [4.0]])
    (da,) = grad(ad.sum(ad.matmul(a, b)), [a])
    assert np.array_equal(da.value, [[3.0, 4.0]])


def test_nonscalar_output_rejected():
    g = Graph()
    x = g.param([1.0, 2.0])
    with pytest.raises(GradientError):
        grad(x, [x])


def test_unreachable_gets_zero_of_exact_shape():
    g = Graph()
    x, y = g.param(np.ones(3)), g.param(np.ones((2, 5)))
    dx, dy = grad(ad.sum(ad.square(x)), [x, y])
    assert dy.shape == (2, 5) and not np.any(dy.value)
    assert np.array_equal(dx.value, 2 * np.ones(3))


def test_without_create_graph_gradients_are_constants():
    g = Graph()
    x = g.param(np.array([1.0, -2.0]))
    (dx,) = grad(ad.sum(ad.square(x)), [x])
    assert not g.depends_on(dx, x)
    g = Graph()
    x = g.param(np.array([1.0, -2.0]))
    (dx,) = grad(ad.sum(ad.square(x)), [x], create_graph=True)
    assert g.depends_on(dx, x)


def _op_cases():
    """(name, f(graph, nodes) -> scalar, ParamSet) covering every differentiable op."""
    rng = np.random.default_rng(3)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    t3 = rng.standard_normal((2, 3, 4))
    w62 = rng.standard_normal((6, 2))
    cases = {
        "add_sub_mul": (lambda g, p: ad.sum(ad.mul(ad.sub(p["a"], ad.scale(p["c"], 2.0)),
                                                    ad.add(p["a"], p["c"]))),
                        {"a": a, "c": rng.standard_normal((3, 4))}),
        "matmul": (lambda g, p: ad.sum(ad.square(ad.matmul(p["a"], p["b"]))), {"a": a, "b": b}),
        "batched_matmul_shared": (lambda g, p: ad.sum(ad.tanh(ad.matmul(p["t"], p["b"]))),
                                  {"t": t3, "b": b}),
        "batched_matmul_left_shared": (
            lambda g, p: ad.sum(ad.tanh(ad.matmul(p["a"], p["u"]))),
            {"a": a, "u": rng.standard_normal((2, 4, 3))}),
        "unary": (lambda g, p: ad.sum(ad.add(ad.add(ad.exp(ad.scale(p["a"], 0.3)), ad.sin(p["a"])),
                                              ad.add(ad.cos(p["a"]), ad.neg(ad.tanh(p["a"]))))),
                  {"a": a}),
        "log_reciprocal": (lambda g, p: ad.sum(ad.add(ad.log(p["x"]), ad.reciprocal(p["x"]))),
                           {"x": pos}),
        "relu_off_kink": (lambda g, p: ad.sum(ad.square(ad.relu(p["a"]))), {"a": a}),
        "sum_mean_axes": (lambda g, p: ad.add(ad.sum(ad.square(ad.mean(p["t"], axis=1))),
                                              ad.sum(ad.square(ad.sum(p["t"], axis=-1, keepdims=True)))),
                          {"t": t3}),
        "max": (lambda g, p: ad.sum(ad.max(p["a"], axis=-1)), {"a": a}),
        "softmax": (lambda g, p: ad.sum(ad.mul(ad.softmax(p["a"]), g.constant(a))), {"a": a}),
        "log_softmax": (lambda g, p: ad.sum(ad.mul(ad.log_softmax(p["a"]), g.constant(a))),
                        {"a": a}),
        "concat_slice": (lambda g, p: ad.sum(ad.square(ad.slice(ad.concat([p["a"], p["c"]], axis=0),
                                                                0, 2, 5))),
                         {"a": a, "c": rng.standard_normal((2, 4))}),
        "reshape_transpose": (lambda g, p: ad.sum(ad.mul(ad.transpose(ad.reshape(p["a"], (2, 6))),
                                                         g.constant(w62))),
                              {"a": a}),
        "broadcast_sum_to": (lambda g, p: ad.sum(ad.square(ad.sum_to(
            ad.mul(ad.broadcast_to(p["v"], (3, 4)), p["a"]), (4,)))),
            {"v": rng.standard_normal(4), "a": a}),
        "mask_mul": (lambda g, p: ad.sum(ad.square(ad.mask_mul(p["a"], (a > 0).astype(float)))),
                     {"a": a}),
        "tile_leading": (lambda g, p: ad.sum(ad.tanh(ad.mul(ad.tile_leading(p["a"], 2), g.constant(t3)))),
                         {"a": a}),
    }
    return {k: (f, ParamSet(v.items())) for k, (f, v) in cases.items()}


@pytest.mark.parametrize("name", sorted(_op_cases()))
def test_op_gradients_match_finite_differences(name):
    f, at = _op_cases()[name]
    assert check_gradient(f, at, eps=1e-6) < 1e-6


@pytest.mark.parametrize("name", ["matmul", "unary", "softmax", "log_softmax", "batched_matmul_shared",
                                  "tile_leading", "broadcast_sum_to"])
def test_second_order_ops_match_finite_differences(name):
    """Gradient of ``sum(grad f * w)`` checks every VJP rule's own derivative."""
    f, at = _op_cases()[name]
    w = np.random.default_rng(9).standard_normal(at.size)
    wset = at.from_flat(w)

    def h(g, p):
        out = f(g, p)
        grads = grad(out, list(p.values()), create_graph=True)
        terms = [ad.sum(ad.mul(d, g.constant(wset[k]))) for k, d in zip(p, grads)]
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return total

    assert check_gradient(h, at, eps=1e-6) < 1e-5


def test_check_gradient_examples():
    x = ParamSet([("x", np.random.default_rng(0).standard_normal(10))])
    assert check_gradient(lambda g, p: ad.sum(ad.square(p["x"])), x, 1e-5) < 1e-6
    assert check_gradient(lambda g, p: ad.scale(ad.sum(ad.mul(p["x"], g.constant(0.0))), 1.0), x,
                          1e-5) == 0.0
    with pytest.raises(ValueError):
        check_gradient(lambda g, p: ad.sum(p["x"]), x, 1e-2)
    with pytest.raises(GradientError):
        check_gradient(lambda g, p: ad.sum(ad.log(ad.scale(ad.square(p["x"]), -1.0))), x, 1e-5)


def test_check_gradient_mlp_mse():
    cfg = MLPConfig(3, (8,), 2, "tanh", seed=1)
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((6, 3)), rng.standard_normal((6, 2))

    def f(g, p):
        out = mlp_forward(p, x, g, "tanh")
        return ad.mean(ad.square(ad.sub(out, g.constant(y))))

    assert check_gradient(f, init_params(cfg), 1e-5) < 1e-4


def test_hessian_symmetry():
    g = Graph()
    x = g.param(np.array([0.3, -1.2]))
    f = ad.sum(ad.mul(ad.sin(x), ad.exp(ad.scale(ad.slice(ad.concat([x, x]), 0, 1, 3), 0.5))))
    (d,) = grad(f, [x], create_graph=True)
    rows = []
    for i in range(2):
        (h,) = grad(ad.sum(ad.mask_mul(d, np.eye(2)[i])), [x])
        rows.append(h.value)
    hess = np.array(rows)
    assert np.max(np.abs(hess - hess.T)) < 1e-8


def test_eager_values_bit_identical():
    def run():
        g = Graph()
        cfg = MLPConfig(4, (16, 16), 3, "relu", seed=5)
        p = init_params(cfg).nodes(g)
        x = np.random.default_rng(2).standard_normal((7, 4))
        return ad.sum(ad.log_softmax(mlp_forward(p, x, g))).value

    assert run().tobytes() == run().tobytes()


def test_paramset_flat_roundtrip_and_compatibility():
    p = init_params(MLPConfig(2, (3,), 1))
    q = p.from_flat(p.to_flat())
    assert p.equal(q) and p.compatible(q)
    assert not p.compatible(init_params(MLPConfig(2, (4,), 1)))
    assert p.size == 2 * 3 + 3 + 3 + 1


small = arrays(np.float64, st.integers(1, 6), elements=st.floats(-3, 3))


@settings(max_examples=40, deadline=None)
@given(small, st.floats(-2, 2), st.floats(-2, 2))
def test_gradient_linearity(v, a, b):
    g = Graph()
    x = g.param(v)
    f1 = ad.sum(ad.sin(x))
    f2 = ad.sum(ad.mul(ad.square(x), ad.tanh(x)))
    (dl,) = grad(ad.add(ad.scale(f1, a), ad.scale(f2, b)), [x])
    (d1,) = grad(f1, [x])
    (d2,) = grad(f2, [x])
    assert np.allclose(dl.value, a * d1.value + b * d2.value, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-20, 20)))
def test_softmax_rows_sum_to_one(v):
    g = Graph()
    s = ad.softmax(g.constant(v)).value
    assert np.allclose(s.sum(-1), 1.0, rtol=0, atol=1e-12)
    assert np.allclose(np.exp(ad.log_softmax(g.constant(v)).value), s, rtol=0, atol=1e-12)


def test_detach_blocks_gradient():
    g = Graph()
    x = g.param(np.array([1.0, 2.0]))
    (dx,) = grad(ad.sum(ad.mul(ad.detach(x), x)), [x])
    assert np.array_equal(dx.value, [1.0, 2.0])
