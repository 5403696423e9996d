"""Gradient checks for every differentiable op against central finite differences."""

import numpy as np
import pytest

from earlyfuse import autodiff as ad

TOL = 1e-4
H = 1e-5


def check(fn, params):
    err = ad.finite_difference_check(fn, params, h=H)
    assert err <= TOL, f"gradcheck failed: max scaled rel error {err:.3e}"


def rand(rng, *shape):
    return ad.parameter(rng.standard_normal(shape))


def test_square_scalar():
    x = ad.parameter(3.0)
    value, grads = ad.forward_backward(lambda p: ad.mul(p["x"], p["x"]), {"x": x})
    assert value == 9.0
    assert grads["x"] == pytest.approx(6.0)


def test_softmax_sum_grad_is_zero():
    rng = np.random.default_rng(0)
    x = rand(rng, 7)
    value, grads = ad.forward_backward(
        lambda p: ad.sum_(ad.softmax(p["x"])), {"x": x}
    )
    assert value == pytest.approx(1.0)
    assert np.allclose(grads["x"], 0.0, atol=1e-12)


def test_l2norm_matvec_matches_finite_differences():
    rng = np.random.default_rng(1)
    w = rand(rng, 4, 3)
    v = rng.standard_normal((3, 1))

    def fn(p):
        y = ad.l2_normalize(ad.matmul(p["w"], ad.Tensor(v)), axis=0)
        return ad.sum_(ad.mul(y, y))

    check(fn, {"w": w})


@pytest.mark.parametrize("seed", range(20))
def test_randomized_composite_ops(seed):
    """Each elementwise/reduction op appears in a random composite graph."""
    rng = np.random.default_rng(seed)
    a = rand(rng, 3, 4)
    b = rand(rng, 3, 4)

    def fn(p):
        x = ad.add(ad.mul(p["a"], p["b"]), ad.div(p["a"], ad.add(ad.mul(p["b"], p["b"]), ad.Tensor(1.5))))
        x = ad.sub(x, ad.neg(p["a"]))
        x = ad.sigmoid(x)
        x = ad.add(x, ad.exp(ad.mul(p["a"], ad.Tensor(0.3))))
        x = ad.log(ad.add(x, ad.Tensor(2.0)))
        x = ad.gelu(x)
        x = ad.softplus(x)
        return ad.mean(x)

    check(fn, {"a": a, "b": b})


@pytest.mark.parametrize("seed", range(20))
def test_randomized_matmul_softmax_norms(seed):
    rng = np.random.default_rng(100 + seed)
    w = rand(rng, 4, 5)
    g = rand(rng, 5)
    be = rand(rng, 5)
    x = rng.standard_normal((3, 4))

    def fn(p):
        h = ad.matmul(ad.Tensor(x), p["w"])
        h = ad.layer_norm(h, p["g"], p["b"])
        s = ad.softmax(h, axis=-1)
        z = ad.logsumexp(h, axis=-1)
        y = ad.l2_normalize(h, axis=-1)
        return ad.add(ad.sum_(ad.mul(s, y)), ad.mean(z))

    check(fn, {"w": w, "g": g, "b": be})


@pytest.mark.parametrize("seed", range(20))
def test_randomized_structure_ops(seed):
    rng = np.random.default_rng(200 + seed)
    table = rand(rng, 6, 3)
    ids = rng.integers(0, 6, size=(2, 4))
    pos = rng.integers(0, 4, size=2)
    mask = rng.random((2, 4, 3)) < 0.3

    def fn(p):
        e = ad.embedding(p["t"], ids)
        e = ad.masked_fill(e, mask, -3.0)
        picked = ad.gather_positions(e, pos)
        rows = ad.gather_rows(ad.reshape(e, (8, 3)), np.array([1, 1, 5]))
        cat = ad.concat([picked, rows], axis=0)
        tr = ad.transpose(cat)
        return ad.sum_(ad.mul(tr, tr)) + ad.sum_(ad.getitem(cat, (slice(0, 2), 1)))

    check(fn, {"t": table})


@pytest.mark.parametrize("seed", range(20))
def test_randomized_batched_matmul(seed):
    rng = np.random.default_rng(300 + seed)
    a = rand(rng, 2, 3, 4)
    b = rand(rng, 2, 4, 3)
    w = rand(rng, 3, 2)

    def fn(p):
        x = ad.matmul(p["a"], p["b"])       # batched @ batched
        y = ad.matmul(x, p["w"])            # batched @ 2-D
        return ad.sum_(ad.gelu(y))

    check(fn, {"a": a, "b": b, "w": w})


@pytest.mark.parametrize("seed", range(20))
def test_randomized_take_labels_and_mean_axes(seed):
    rng = np.random.default_rng(400 + seed)
    x = rand(rng, 5, 4)
    labels = rng.integers(0, 4, size=5)

    def fn(p):
        lse = ad.logsumexp(p["x"], axis=1)
        picked = ad.take_labels(p["x"], labels)
        ce = ad.sub(lse, picked)
        return ad.add(ad.mean(ce), ad.sum_(ad.mean(p["x"], axis=0)))

    check(fn, {"x": x})


def test_l2_normalize_unit_norm_and_zero_error():
    rng = np.random.default_rng(7)
    x = ad.Tensor(rng.standard_normal((5, 3)))
    y = ad.l2_normalize(x, axis=-1)
    norms = np.linalg.norm(y.data, axis=-1)
    assert np.allclose(norms, 1.0, atol=1e-9)
    with pytest.raises(ZeroDivisionError):
        ad.l2_normalize(ad.Tensor(np.zeros(3)))


def test_shape_mismatch_names_op_and_shapes():
    a = ad.Tensor(np.zeros((2, 3)))
    b = ad.Tensor(np.zeros((2, 3)))
    with pytest.raises(ad.ShapeError, match=r"matmul.*2, 3"):
        ad.matmul(a, b)


def test_nonfinite_intermediate_reports_node():
    x = ad.Tensor([-1.0])
    with pytest.raises(ad.NonFiniteError, match=r"op 'log' \(node \d+\)"):
        ad.log(x)


def test_forward_backward_deterministic():
    rng = np.random.default_rng(11)
    w = rng.standard_normal((4, 4))

    def run():
        p = {"w": ad.parameter(w.copy())}
        return ad.forward_backward(
            lambda q: ad.sum_(ad.softmax(ad.matmul(q["w"], q["w"]))), p
        )

    v1, g1 = run()
    v2, g2 = run()
    assert v1 == v2
    assert np.array_equal(g1["w"], g2["w"])


def test_unused_param_gets_zero_grad():
    p = {"a": ad.parameter(2.0), "b": ad.parameter(5.0)}
    _, grads = ad.forward_backward(lambda q: ad.mul(q["a"], q["a"]), p)
    assert grads["b"] == pytest.approx(0.0)


def test_diamond_graph_accumulates():
    # f(x) = x*x + x*x reuses the same intermediate twice
    x = ad.parameter(3.0)

    def fn(p):
        y = ad.mul(p["x"], p["x"])
        return ad.add(y, y)

    value, grads = ad.forward_backward(fn, {"x": x})
    assert value == pytest.approx(18.0)
    assert grads["x"] == pytest.approx(12.0)
