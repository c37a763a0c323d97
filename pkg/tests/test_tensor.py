import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metauap import tensor as T
from metauap.verification import (check_primitive_gradients,
                                  check_unrolled_recurrence)


def test_matmul_identity():
    a = np.random.default_rng(0).random((3, 3)).astype(np.float32)
    out = T.matmul(T.Tensor(np.eye(3, dtype=np.float32)), T.Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_relu_definition():
    out = T.relu(T.Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_conv2d_padded_shape():
    x = T.Tensor(np.zeros((1, 1, 8, 8), dtype=np.float32))
    k = T.Tensor(np.zeros((4, 1, 3, 3), dtype=np.float32))
    assert T.conv2d(x, k, padding=1).shape == (1, 4, 8, 8)


def test_backward_square_sum():
    x = T.leaf(np.array([1.0, 2.0, 3.0], dtype=np.float32))
    g = T.backward(T.sum_(T.mul(x, x)))
    np.testing.assert_allclose(g.wrt(x).data, [2.0, 4.0, 6.0])


def test_backward_matmul_column_broadcast():
    v = np.array([[1.0], [2.0], [3.0]], dtype=np.float32)
    W = T.leaf(np.random.default_rng(1).random((3, 3)).astype(np.float32))
    g = T.backward(T.sum_(T.matmul(W, T.Tensor(v))))
    np.testing.assert_allclose(g.wrt(W).data, np.tile(v.T, (3, 1)))


def test_backward_mlp_matches_finite_differences():
    """Random 2-layer MLP loss vs a float64 finite-difference oracle."""
    rng = np.random.default_rng(7)
    w1 = rng.uniform(-1, 1, (5, 4)).astype(np.float32)
    w2 = rng.uniform(-1, 1, (4, 3)).astype(np.float32)
    x = rng.uniform(-1, 1, (2, 5)).astype(np.float32)
    y = np.array([0, 2])

    l1 = T.leaf(w1)
    l2 = T.leaf(w2)
    h = T.tanh(T.matmul(T.Tensor(x), l1))
    loss = T.mean_(T.softmax_cross_entropy(T.matmul(h, l2), y))
    grads = T.backward(loss)

    def ref(w1v, w2v):
        h64 = np.tanh(x.astype(np.float64) @ w1v)
        z = h64 @ w2v
        m = z.max(axis=1, keepdims=True)
        logp = z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))
        return -logp[np.arange(2), y].mean()

    h_fd = 1e-3
    for leaf_t, wv, other in ((l1, w1, w2), (l2, w2, w1)):
        fd = np.zeros_like(wv, dtype=np.float64)
        flat = wv.astype(np.float64).reshape(-1)
        for i in range(flat.size):
            for sgn in (+1, -1):
                pert = flat.copy()
                pert[i] += sgn * h_fd
                args = (pert.reshape(wv.shape), other) if leaf_t is l1 else (other, pert.reshape(wv.shape))
                fd.reshape(-1)[i] += sgn * ref(*args)
        fd /= 2 * h_fd
        ad = grads.wrt(leaf_t).data
        rel = np.linalg.norm(ad - fd) / np.linalg.norm(fd)
        assert rel <= 1e-4, f"rel err {rel}"


def test_every_primitive_gradient_matches_fd():
    for result in check_primitive_gradients():
        assert result.passed, f"{result.name}: {result.measured} > {result.bound}"


def test_unrolled_recurrence_gradient():
    result = check_unrolled_recurrence(K=3)
    assert result.passed, f"{result.name}: {result.measured}"


def test_detach_blocks_gradient():
    x = T.leaf(np.array([1.0, 2.0], dtype=np.float32))
    y = T.leaf(np.array([3.0, 4.0], dtype=np.float32))
    g = T.backward(T.sum_(T.add(T.detach(x), y)))
    np.testing.assert_array_equal(g.wrt(x).data, [0.0, 0.0])
    np.testing.assert_array_equal(g.wrt(y).data, [1.0, 1.0])


def test_detach_idempotent_and_value_preserving():
    x = T.leaf(np.array([1.5, -2.0], dtype=np.float32))
    d1 = T.detach(x)
    d2 = T.detach(d1)
    assert d2 is d1  # already unrecorded
    np.testing.assert_array_equal(d1.data, x.data)
    assert not d1.recorded


def test_unused_leaf_reads_zero_gradient():
    x = T.leaf(np.ones(3, dtype=np.float32))
    unused = T.leaf(np.ones(2, dtype=np.float32))
    g = T.backward(T.sum_(x))
    np.testing.assert_array_equal(g.wrt(unused).data, np.zeros(2))


def test_backward_rejects_nonscalar_and_unrecorded():
    x = T.leaf(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(T.TapeError):
        T.backward(T.mul(x, x))
    with pytest.raises(T.TapeError):
        T.backward(T.Tensor(np.float32(1.0)))


def test_shape_mismatch_names_both_shapes():
    a = T.Tensor(np.ones((2, 3), dtype=np.float32))
    b = T.Tensor(np.ones((4, 5), dtype=np.float32))
    with pytest.raises(T.ShapeMismatchError) as e:
        T.add(a, b)
    assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)


def test_nonfinite_result_raises():
    big = T.Tensor(np.full(4, 3e38, dtype=np.float32))
    with pytest.raises(T.NonFiniteError):
        T.add(big, big)
    with pytest.raises(T.NonFiniteError):
        T.Tensor(np.array([np.nan]))


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(42)
        x = T.leaf(rng.uniform(-1, 1, (2, 1, 8, 8)).astype(np.float32))
        k = T.Tensor(rng.uniform(-1, 1, (3, 1, 3, 3)).astype(np.float32))
        y = T.maxpool2x2(T.relu(T.conv2d(x, k, padding=1)))
        loss = T.mean_(T.mul(y, y))
        return loss.data.copy(), T.backward(loss).wrt(x).data.copy()

    (v1, g1), (v2, g2) = run(), run()
    assert v1.tobytes() == v2.tobytes()
    assert g1.tobytes() == g2.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=16))
def test_concat_roundtrip_and_clamp_bounds(values):
    arr = np.array(values, dtype=np.float32)
    t = T.concat([T.Tensor(arr), T.Tensor(arr)], axis=0)
    np.testing.assert_array_equal(t.data, np.concatenate([arr, arr]))
    c = T.clamp(T.Tensor(arr), 0.0, 1.0)
    assert c.data.min() >= 0.0 and c.data.max() <= 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_sum_matches_numpy(seed):
    arr = np.random.default_rng(seed).uniform(-1, 1, (3, 4)).astype(np.float32)
    np.testing.assert_allclose(T.sum_(T.Tensor(arr), axis=0).data,
                               arr.sum(axis=0), rtol=1e-6)
    np.testing.assert_allclose(T.mean_(T.Tensor(arr)).data,
                               arr.mean(dtype=np.float32), rtol=1e-6)
