import numpy as np
import pytest

from modweave import Tensor, default_dtype, set_default_dtype, tensor
from modweave.errors import DataError, ShapeError
from modweave.tensor import (add, concat, cross_entropy, dropout, embedding,
                             gather_rows, gelu, l2_loss, layer_norm, matmul,
                             mean_, mul, narrow, neg, relu, reshape,
                             scatter_rows, softmax, sub, sum_, transpose)
from modweave.util import rng_from


def _numeric_grad(build, arrays, h=1e-6):
    """Central differences of a scalar loss over a dict of float64 arrays."""
    grads = {}
    for name, arr in arrays.items():
        g = np.empty_like(arr)
        flat, out = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            hi = build()
            flat[i] = keep - h
            lo = build()
            flat[i] = keep
            out[i] = (hi - lo) / (2 * h)
        grads[name] = g
    return grads


def _check(build_loss, arrays, tol=1e-7):
    params = {k: tensor(v, requires_grad=True) for k, v in arrays.items()}
    loss = build_loss(params)
    loss.backward()
    fd = _numeric_grad(lambda: build_loss(
        {k: tensor(arrays[k]) for k in arrays}).item(), arrays)
    for k in arrays:
        err = np.abs(params[k].grad - fd[k]).max()
        assert err < tol, f"{k}: {err}"


# -- forward values against NumPy --------------------------------------------

def test_arithmetic_forward_matches_numpy():
    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 1, (3, 4)), rng.normal(0, 1, (3, 4))
    assert np.allclose(add(tensor(a), tensor(b)).data, a + b)
    assert np.allclose(sub(tensor(a), tensor(b)).data, a - b)
    assert np.allclose(mul(tensor(a), tensor(b)).data, a * b)
    assert np.allclose(neg(tensor(a)).data, -a)
    assert np.allclose(matmul(tensor(a), tensor(b.T)).data, a @ b.T, atol=1e-6)
    assert np.allclose(relu(tensor(a)).data, np.maximum(a, 0))
    assert np.allclose(softmax(tensor(a)).data.sum(axis=-1), 1.0, atol=1e-6)


def test_operator_sugar_matches_function_forms():
    rng = np.random.default_rng(1)
    a, b = tensor(rng.normal(0, 1, (2, 5))), tensor(rng.normal(0, 1, (2, 5)))
    assert np.allclose((a + b).data, add(a, b).data)
    assert np.allclose((a - b).data, sub(a, b).data)
    assert np.allclose((a * b).data, mul(a, b).data)
    assert (a @ tensor(rng.normal(0, 1, (5, 2)))).shape == (2, 2)
    assert np.allclose((2.0 * a).data, 2.0 * a.data)


def test_default_dtype_switch():
    assert default_dtype() == np.float32
    assert tensor([1.0]).dtype == np.float32
    set_default_dtype(np.float64)
    try:
        assert tensor([1.0]).dtype == np.float64
    finally:
        set_default_dtype(np.float32)


# -- gradients against central differences (float64) -------------------------

@pytest.mark.usefixtures("f64")
def test_elementwise_grads():
    rng = np.random.default_rng(2)
    arrays = {"a": rng.normal(0, 1, (3, 4)), "b": rng.normal(0, 1, (3, 4))}
    _check(lambda p: sum_(mul(add(p["a"], p["b"]), sub(p["a"], p["b"]))), arrays)
    _check(lambda p: sum_(mul(neg(p["a"]), p["b"])), arrays)


@pytest.mark.usefixtures("f64")
def test_broadcast_grads():
    rng = np.random.default_rng(3)
    arrays = {"a": rng.normal(0, 1, (4, 5)), "b": rng.normal(0, 1, (5,)),
              "c": rng.normal(0, 1, (4, 1))}
    _check(lambda p: sum_(mul(add(p["a"], p["b"]), p["c"])), arrays)


@pytest.mark.usefixtures("f64")
def test_activation_grads():
    # offsets keep relu away from its kink where central differences lie
    base = np.linspace(-2.7, 2.9, 24).reshape(4, 6) + 0.013
    _check(lambda p: sum_(relu(p["x"])), {"x": base.copy()})
    _check(lambda p: sum_(gelu(p["x"])), {"x": base.copy()})


@pytest.mark.usefixtures("f64")
def test_matmul_grads():
    rng = np.random.default_rng(4)
    arrays = {"a": rng.normal(0, 1, (3, 4)), "b": rng.normal(0, 1, (4, 2))}
    _check(lambda p: sum_(matmul(p["a"], p["b"])), arrays)
    batched = {"a": rng.normal(0, 1, (2, 3, 4)), "b": rng.normal(0, 1, (2, 4, 2))}
    _check(lambda p: sum_(matmul(p["a"], p["b"])), batched)


@pytest.mark.usefixtures("f64")
def test_shape_op_grads():
    rng = np.random.default_rng(5)
    arrays = {"x": rng.normal(0, 1, (2, 3, 4))}
    _check(lambda p: sum_(mul(reshape(p["x"], (6, 4)), 1.7)), arrays)
    _check(lambda p: sum_(mul(transpose(p["x"], (2, 0, 1)), 0.3)), arrays)
    _check(lambda p: sum_(narrow(p["x"], 1, 1, 2)), arrays)
    pair = {"x": rng.normal(0, 1, (2, 3)), "y": rng.normal(0, 1, (2, 5))}
    _check(lambda p: sum_(mul(concat([p["x"], p["y"]], axis=1), 0.9)), pair)


@pytest.mark.usefixtures("f64")
def test_reduction_grads():
    rng = np.random.default_rng(6)
    arrays = {"x": rng.normal(0, 1, (3, 5))}
    _check(lambda p: mul(sum_(p["x"]), 2.0), arrays)
    _check(lambda p: sum_(mul(sum_(p["x"], axis=0), 1.3)), arrays)
    _check(lambda p: sum_(mul(mean_(p["x"], axis=1, keepdims=True), 0.7)), arrays)


@pytest.mark.usefixtures("f64")
def test_softmax_and_layernorm_grads():
    rng = np.random.default_rng(7)
    w = rng.normal(0, 1, (3, 6))
    x = rng.normal(0, 2, (3, 6))
    _check(lambda p: sum_(mul(softmax(p["x"]), w)), {"x": x.copy()})
    _check(lambda p: sum_(mul(layer_norm(p["x"], p["gain"], p["bias"]), w)),
           {"x": x.copy(), "gain": rng.normal(1, 0.2, 6),
            "bias": rng.normal(0, 0.2, 6)})


@pytest.mark.usefixtures("f64")
def test_gather_scatter_embedding_grads():
    rng = np.random.default_rng(8)
    idx = np.array([3, 0, 3, 1])
    ids = np.array([[1, 0, 2], [2, 2, 0]])
    t = rng.normal(0, 1, (4, 5))
    _check(lambda p: sum_(mul(gather_rows(p["t"], idx), 0.5)), {"t": t.copy()})
    _check(lambda p: sum_(mul(scatter_rows(gather_rows(p["t"], idx), idx, 4), 1.1)),
           {"t": t.copy()})
    _check(lambda p: sum_(mul(embedding(p["e"], ids), 0.7)),
           {"e": rng.normal(0, 1, (3, 4))})


@pytest.mark.usefixtures("f64")
def test_loss_grads():
    rng = np.random.default_rng(9)
    labels = np.array([2, 0, 1, 2])
    _check(lambda p: cross_entropy(p["logits"], labels),
           {"logits": rng.normal(0, 1, (4, 3))})
    _check(lambda p: l2_loss(p["pred"], p["tgt"]),
           {"pred": rng.normal(0, 1, (4, 6)), "tgt": rng.normal(0, 1, (4, 6))})


def test_cross_entropy_forward_oracle():
    # independent log-sum-exp computation
    rng = np.random.default_rng(10)
    logits = rng.normal(0, 2, (5, 4)).astype(np.float64)
    labels = np.array([0, 3, 1, 2, 2])
    set_default_dtype(np.float64)
    try:
        got = cross_entropy(tensor(logits), labels).item()
    finally:
        set_default_dtype(np.float32)
    m = logits.max(axis=1, keepdims=True)
    lse = m.squeeze(1) + np.log(np.exp(logits - m).sum(axis=1))
    want = float(np.mean(lse - logits[np.arange(5), labels]))
    assert abs(got - want) < 1e-12


def test_cross_entropy_rejects_bad_labels():
    logits = tensor(np.zeros((2, 3)))
    with pytest.raises(DataError):
        cross_entropy(logits, np.array([0, 3]))
    with pytest.raises(DataError):
        cross_entropy(logits, np.array([-1, 0]))


def test_l2_loss_forward_oracle():
    pred = tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    tgt = tensor(np.array([[0.0, 0.0], [0.0, 0.0]]))
    # mean of squared residuals: (1+4+9+16)/4
    assert abs(l2_loss(pred, tgt).item() - 7.5) < 1e-6


# -- engine mechanics ---------------------------------------------------------

def test_diamond_graph_accumulates_once():
    x = tensor(np.array([3.0]), requires_grad=True)
    y = mul(x, x)
    z = add(y, y)  # dz/dx = 4x
    z.backward()
    assert np.allclose(x.grad, [12.0])


def test_grad_accumulates_across_backward_calls():
    x = tensor(np.array([2.0]), requires_grad=True)
    sum_(mul(x, x)).backward()
    first = x.grad.copy()
    sum_(mul(x, x)).backward()
    assert np.allclose(x.grad, 2 * first)
    x.zero_grad()
    assert x.grad is None


def test_backward_requires_scalar():
    x = tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        add(x, x).backward()


def test_no_grad_for_untracked_leaves():
    x = tensor(np.ones(3))
    y = tensor(np.ones(3), requires_grad=True)
    loss = sum_(mul(x, y))
    loss.backward()
    assert x.grad is None
    assert y.grad is not None


def test_tensor_refuses_tensor_wrapping():
    with pytest.raises(TypeError):
        Tensor(tensor([1.0]))


def test_deep_chain_does_not_recurse():
    # iterative topo sort: depth beyond any Python recursion limit
    x = tensor(np.array([0.001]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = add(y, x)
    sum_(y).backward()
    assert np.allclose(x.grad, [5001.0])


def test_dropout_zero_rate_is_identity():
    x = tensor(np.ones((4, 4)), requires_grad=True)
    y = dropout(x, 0.0, rng_from(0, "drop"))
    assert y is x or np.array_equal(y.data, x.data)


def test_dropout_scales_surviving_entries():
    rng = rng_from(0, "drop")
    x = tensor(np.ones((100, 100)), requires_grad=True)
    y = dropout(x, 0.25, rng)
    vals = np.unique(y.data)
    assert set(np.round(vals, 6)) <= {0.0, np.float32(1 / 0.75).round(6)}
    # survivors are rescaled so the expectation is preserved
    assert abs(y.data.mean() - 1.0) < 0.02
    sum_(y).backward()
    assert np.array_equal((x.grad != 0), (y.data != 0))


def test_narrow_out_of_range():
    x = tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        narrow(x, 1, 2, 5)
