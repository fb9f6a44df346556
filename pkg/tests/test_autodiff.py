import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from babelforge import autodiff as ad
from babelforge.autodiff import AutodiffError, Tensor
from conftest import gradcheck

F64 = np.float64


def leaf(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True, dtype=F64)


def probe(out: Tensor, seed=99) -> Tensor:
    """Random linear functional of ``out`` so every output entry matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return ad.sum(ad.mul(out, Tensor(w, dtype=F64)))


RNG = np.random.default_rng(1234)

OPS = {
    "add_broadcast": (lambda a, b: probe(ad.add(a, b)), lambda r: [leaf(r, 3, 4), leaf(r, 4)]),
    "add_keepdim": (lambda a, b: probe(a + b), lambda r: [leaf(r, 2, 3, 4), leaf(r, 2, 1, 4)]),
    "sub": (lambda a, b: probe(ad.sub(a, b)), lambda r: [leaf(r, 3, 4), leaf(r, 1, 4)]),
    "mul": (lambda a, b: probe(ad.mul(a, b)), lambda r: [leaf(r, 3, 4), leaf(r, 3, 1)]),
    "scale": (lambda a: probe(ad.scale(a, -2.5)), lambda r: [leaf(r, 5)]),
    "relu": (lambda a: probe(ad.relu(a)), lambda r: [leaf(r, 4, 6)]),
    "sum": (lambda a: ad.sum(a), lambda r: [leaf(r, 3, 2)]),
    "matmul_2d": (lambda a, b: probe(ad.matmul(a, b)), lambda r: [leaf(r, 3, 4), leaf(r, 4, 5)]),
    "matmul_3d_2d": (lambda a, b: probe(a @ b), lambda r: [leaf(r, 2, 3, 4), leaf(r, 4, 5)]),
    "matmul_4d": (lambda a, b: probe(ad.matmul(a, b)), lambda r: [leaf(r, 2, 2, 3, 4), leaf(r, 2, 2, 4, 3)]),
    "transpose": (lambda a: probe(ad.transpose(a, (2, 0, 1))), lambda r: [leaf(r, 2, 3, 4)]),
    "reshape": (lambda a: probe(ad.reshape(a, (4, 6))), lambda r: [leaf(r, 2, 3, 4)]),
    "concat": (lambda a, b: probe(ad.concat([a, b], axis=1)), lambda r: [leaf(r, 2, 3), leaf(r, 2, 2)]),
    "slice_rows": (lambda a: probe(ad.slice_rows(a, slice(1, 4))), lambda r: [leaf(r, 6, 3)]),
    "embedding": (lambda w: probe(ad.embedding(w, np.array([[0, 2, 2], [4, 0, 1]]))), lambda r: [leaf(r, 5, 3)]),
    "layer_norm": (lambda x, w, b: probe(ad.layer_norm(x, w, b)), lambda r: [leaf(r, 2, 3, 6), leaf(r, 6), leaf(r, 6)]),
    "softmax": (lambda a: probe(ad.softmax(a, axis=-1)), lambda r: [leaf(r, 3, 5)]),
    "softmax_axis0": (lambda a: probe(ad.softmax(a, axis=0)), lambda r: [leaf(r, 3, 5)]),
    "dropout": (lambda a: probe(ad.dropout(a, 0.3, np.random.default_rng(7), True)), lambda r: [leaf(r, 4, 5)]),
    "cross_entropy": (lambda z: ad.cross_entropy(z, [1, 0, 3, 2], 0.0, pad_id=0), lambda r: [leaf(r, 4, 6)]),
    "cross_entropy_smoothed": (lambda z: ad.cross_entropy(z, [[1, 5], [3, 0]], 0.1, pad_id=0),
                               lambda r: [leaf(r, 2, 2, 6)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    build, make = OPS[name]
    inputs = make(np.random.default_rng(abs(hash(name)) % 2**32))
    assert gradcheck(build, inputs) < 1e-4


def test_two_layer_network_gradcheck():
    r = np.random.default_rng(0)
    x = Tensor(r.standard_normal((5, 4)), dtype=F64)
    w1, b1, w2 = leaf(r, 4, 8), leaf(r, 8), leaf(r, 8, 3)

    def net(w1, b1, w2):
        h = ad.relu(ad.add(ad.matmul(x, w1), b1))
        return ad.cross_entropy(ad.matmul(h, w2), [0, 1, 2, 1, 2], 0.1, pad_id=-1)
    assert gradcheck(net, [w1, b1, w2]) < 1e-4


def test_softmax_examples():
    s = ad.softmax(Tensor([0.0, 0.0, 0.0, 0.0])).data
    assert np.allclose(s, 0.25, atol=1e-7)
    s = ad.softmax(Tensor(np.array([0.0, math.log(3.0)]), dtype=F64)).data
    assert np.allclose(s, [0.25, 0.75], atol=1e-15)
    v = np.random.default_rng(0).standard_normal(7).astype(np.float32)
    assert np.allclose(ad.softmax(Tensor(v)).data, ad.softmax(Tensor(v + 13.0)).data, atol=1e-6)


def test_cross_entropy_examples():
    z = Tensor(np.zeros((1, 8)))
    assert abs(float(ad.cross_entropy(z, [3], 0.0, pad_id=0).data) - math.log(8)) < 1e-6
    z = np.zeros((1, 8), dtype=F64)
    z[0, 3] = 30.0
    assert float(ad.cross_entropy(Tensor(z, dtype=F64), [3], 0.0, pad_id=0).data) < 1e-9
    z = Tensor(np.array([[0.0, math.log(3.0)]]), dtype=F64)
    assert abs(float(ad.cross_entropy(z, [1], 0.0, pad_id=-1).data) - 0.28768207245178085) < 1e-12


def test_cross_entropy_smoothing_formula():
    z = np.random.default_rng(3).standard_normal((3, 5))
    lsm = ad.log_softmax_np(z)
    want = np.mean([(0.9) * -lsm[i, t] + 0.1 * -lsm[i].mean() for i, t in enumerate([1, 2, 4])])
    got = float(ad.cross_entropy(Tensor(z, dtype=F64), [1, 2, 4], 0.1, pad_id=0).data)
    assert abs(got - want) < 1e-12


def test_cross_entropy_excludes_pad_rows():
    z = np.random.default_rng(4).standard_normal((4, 6))
    full = float(ad.cross_entropy(Tensor(z, dtype=F64), [1, 0, 2, 0], 0.0, pad_id=0).data)
    kept = float(ad.cross_entropy(Tensor(z[[0, 2]], dtype=F64), [1, 2], 0.0, pad_id=0).data)
    assert abs(full - kept) < 1e-12


def test_cross_entropy_errors():
    with pytest.raises(AutodiffError, match="all-pad"):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 0], 0.0, pad_id=0)
    with pytest.raises(AutodiffError, match="range"):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), [1, 3], 0.0, pad_id=0)


def test_backward_constant_loss_gives_zero():
    w = Tensor(np.ones(3), requires_grad=True, dtype=F64)
    loss = ad.sum(Tensor(np.ones(2), dtype=F64))
    grads = ad.backward(loss, [w])
    assert np.array_equal(grads[0], np.zeros(3))


def test_backward_linear_exact():
    x = np.array([1.5, -2.0, 0.25])
    w = Tensor(np.zeros(3), requires_grad=True, dtype=F64)
    ad.backward(ad.sum(ad.mul(w, Tensor(x, dtype=F64))))
    assert np.array_equal(w.grad, x)


def test_backward_twice_raises():
    w = Tensor(np.ones(3), requires_grad=True)
    loss = ad.sum(ad.scale(w, 2.0))
    loss.backward()
    with pytest.raises(AutodiffError, match="already"):
        loss.backward()


def test_backward_needs_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(AutodiffError, match="scalar"):
        ad.backward(ad.scale(w, 2.0))


def test_grad_accumulates_through_shared_use():
    w = Tensor(np.array([2.0]), requires_grad=True, dtype=F64)
    ad.backward(ad.sum(ad.mul(w, w)))
    assert np.allclose(w.grad, [4.0])


def test_no_grad_records_nothing():
    w = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.scale(w, 3.0)
    assert not y.requires_grad and y._parents == ()
    assert ad.grad_enabled()


def test_dropout_semantics():
    x = Tensor(np.ones((200, 50), dtype=np.float32))
    assert ad.dropout(x, 0.3, None, training=False) is x
    y = ad.dropout(x, 0.3, np.random.default_rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, np.float32(1 / 0.7)}
    assert abs(y.mean() - 1.0) < 0.03
    y2 = ad.dropout(x, 0.3, np.random.default_rng(0), training=True).data
    assert np.array_equal(y, y2)
    with pytest.raises(AutodiffError):
        ad.dropout(x, 0.3, None, training=True)


def test_float32_is_default():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.ones(2)).dtype == np.float64   # float inputs keep their precision
    m = np.ones((2, 2), dtype=np.float32)
    assert ad.matmul(Tensor(m), Tensor(m)).dtype == np.float32


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.floats(-50, 50), st.integers(0, 2**32 - 1))
def test_softmax_slices_sum_to_one(rows, cols, shift, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)).astype(np.float32) * 10 + shift
    s = ad.softmax(Tensor(x)).data
    assert np.all(s >= 0) and np.all(s <= 1)
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_matmul_gradcheck_random_shapes(b, m, k, seed):
    r = np.random.default_rng(seed)
    a, w = leaf(r, b, m, k), leaf(r, k, 3)
    assert gradcheck(lambda a, w: probe(ad.matmul(a, w)), [a, w]) < 1e-4


def test_forward_deterministic():
    r = np.random.default_rng(0)
    a = Tensor(r.standard_normal((64, 128)).astype(np.float32))
    b = Tensor(r.standard_normal((128, 96)).astype(np.float32))
    assert np.array_equal(ad.matmul(a, b).data, ad.matmul(a, b).data)
