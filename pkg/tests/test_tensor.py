import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from adaptconv import tensor as T
from adaptconv.tensor import (
    BatchNorm,
    ConfigError,
    ContractError,
    DimensionError,
    ParamStore,
    Tensor,
    backward,
)


def leaf(values):
    return Tensor(np.asarray(values, dtype=float), requires_grad=True)


def central_diff(f, x, step=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + step
        hi = f()
        x[i] = orig - step
        lo = f()
        x[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return g


# matmul

def test_matmul_identity():
    out = T.matmul(Tensor([[1.0, 2], [3, 4]]), Tensor([[1.0, 0], [0, 1]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_inner_product():
    assert T.matmul(Tensor([[1.0, 2]]), Tensor([[3.0], [4]])).data.tolist() == [[11.0]]


def test_matmul_gradient_is_row_sums(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    backward(T.total(T.matmul(a, b)))
    np.testing.assert_allclose(a.grad, np.tile(b.data.sum(axis=1), (3, 1)), rtol=1e-12)
    fd = central_diff(lambda: float((a.data @ b.data).sum()), a.data)
    np.testing.assert_allclose(a.grad, fd, rtol=1e-7)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


# concat

def test_concat_values():
    np.testing.assert_array_equal(T.concat([Tensor([1.0, 2]), Tensor([3.0])], axis=0).data,
                                  [1, 2, 3])


def test_concat_single_is_identity():
    x = Tensor([[1.0, 2.0]])
    np.testing.assert_array_equal(T.concat([x], axis=1).data, x.data)


def test_concat_gradient_is_ones():
    a, b = leaf(np.zeros((2, 3))), leaf(np.zeros((2, 1)))
    backward(T.total(T.concat([a, b], axis=1)))
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(b.grad, np.ones((2, 1)))


def test_concat_mismatch():
    with pytest.raises(DimensionError):
        T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)


# gather_rows

def test_gather_rows_example():
    out = T.gather_rows(Tensor([[1.0], [2.0], [3.0]]), [[0, 0], [1, 2], [2, 1]])
    np.testing.assert_array_equal(out.data, [[[1], [1]], [[2], [3]], [[3], [2]]])


def test_gather_rows_self_column(rng):
    x = Tensor(rng.normal(size=(5, 2)))
    idx = np.column_stack([np.arange(5), rng.integers(0, 5, (5, 2))])
    np.testing.assert_array_equal(T.gather_rows(x, idx).data[:, 0], x.data)


def test_gather_rows_gradient_counts_occurrences(rng):
    idx = rng.integers(0, 6, (6, 4))
    x = leaf(np.zeros((6, 2)))
    backward(T.total(T.gather_rows(x, idx)))
    counts = np.bincount(idx.ravel(), minlength=6)
    np.testing.assert_array_equal(x.grad, np.repeat(counts[:, None], 2, axis=1))


def test_gather_rows_out_of_range():
    with pytest.raises(IndexError):
        T.gather_rows(Tensor(np.zeros((3, 1))), [[0, 3]])


# leaky_relu

def test_leaky_relu_values():
    out = T.leaky_relu(Tensor([2.0, -1.0]), 0.2)
    np.testing.assert_allclose(out.data, [2.0, -0.2], rtol=0, atol=1e-16)


def test_leaky_relu_gradients():
    x = leaf([-3.0, 0.0, 4.0])
    backward(T.total(T.leaky_relu(x, 0.2)))
    # the kink at exactly 0 takes the positive branch's slope
    np.testing.assert_array_equal(x.grad, [0.2, 1.0, 1.0])


@pytest.mark.parametrize("slope", [0.0, 1.0, -0.1, 1.5])
def test_leaky_relu_rejects_slope(slope):
    with pytest.raises(ConfigError):
        T.leaky_relu(Tensor([1.0]), slope)


# batch_norm

def test_batch_norm_standardized_input_passes_through(rng):
    x = rng.normal(size=(200, 3))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    out = T.batch_norm(Tensor(x), BatchNorm(3), "train").data
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-12, atol=1e-12)


def test_batch_norm_constant_column_gives_shift():
    bn = BatchNorm(2)
    bn.shift.data = np.array([0.7, -0.3])
    x = np.column_stack([np.full(5, 4.0), np.arange(5.0)])
    out = T.batch_norm(Tensor(x), bn, "train").data
    np.testing.assert_allclose(out[:, 0], 0.7, atol=1e-12)


def test_batch_norm_train_moments(rng):
    x = rng.normal(3.0, 2.0, size=(64, 4))
    out = T.batch_norm(Tensor(x), BatchNorm(4), "train").data
    var = x.var(axis=0)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=0), var / (var + 1e-5), rtol=1e-12)


def test_batch_norm_running_stats_and_eval(rng):
    bn = BatchNorm(2, momentum=0.9)
    x = rng.normal(size=(10, 2))
    T.batch_norm(Tensor(x), bn, "train")
    np.testing.assert_allclose(bn.running_mean.data, 0.1 * x.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(bn.running_var.data, 0.9 + 0.1 * x.var(axis=0, ddof=1), rtol=1e-12)
    out = T.batch_norm(Tensor(x), bn, "eval").data
    expect = (x - bn.running_mean.data) / np.sqrt(bn.running_var.data + 1e-5)
    np.testing.assert_allclose(out, expect, rtol=1e-12)


def test_batch_norm_needs_two_rows():
    with pytest.raises(ConfigError):
        T.batch_norm(Tensor(np.ones((1, 3))), BatchNorm(3), "train")


def test_batch_norm_unknown_mode():
    with pytest.raises(ConfigError):
        T.batch_norm(Tensor(np.ones((4, 3))), BatchNorm(3), "test")


# reduce_max_axis

def test_reduce_max_example():
    vals, arg = T.reduce_max_axis(Tensor([[[1.0, 5.0], [3.0, 2.0]]]), axis=1)
    np.testing.assert_array_equal(vals.data, [[3, 5]])
    np.testing.assert_array_equal(arg, [[1, 0]])


def test_reduce_max_single_neighbor_is_identity(rng):
    x = rng.normal(size=(4, 1, 3))
    np.testing.assert_array_equal(T.reduce_max_axis(Tensor(x), axis=1)[0].data, x[:, 0])


def test_reduce_max_tie_gradient_first_index():
    x = leaf([[[2.0], [2.0]]])
    backward(T.total(T.reduce_max_axis(x, axis=1)[0]))
    np.testing.assert_array_equal(x.grad.ravel(), [1.0, 0.0])


def test_reduce_max_empty_axis():
    with pytest.raises(DimensionError):
        T.reduce_max_axis(Tensor(np.zeros((2, 0, 3))), axis=1)


def _max_oracle(x, axis):
    moved = np.moveaxis(x, axis, 0)
    out = np.empty(moved.shape[1:])
    for pos in np.ndindex(out.shape):
        best = moved[(0,) + pos]
        for j in range(1, moved.shape[0]):
            if moved[(j,) + pos] > best:
                best = moved[(j,) + pos]
        out[pos] = best
    return out


def test_reduce_max_exhaustive_small_shapes():
    rng = np.random.default_rng(0)
    for shape in itertools.product(range(1, 5), repeat=3):
        x = rng.integers(-2, 3, shape).astype(float)  # small integers force ties
        for axis in range(3):
            vals, _ = T.reduce_max_axis(Tensor(x), axis=axis)
            np.testing.assert_array_equal(vals.data, _max_oracle(x, axis))


# edge_inner_product

def test_edge_inner_product_basis_kernel(rng):
    geo = rng.normal(size=(2, 3, 6))
    kern = np.zeros((2, 3, 1, 6))
    kern[..., 0, 0] = 1.0
    out = T.edge_inner_product(Tensor(kern), Tensor(geo)).data
    np.testing.assert_array_equal(out[..., 0], geo[..., 0])


def test_edge_inner_product_zero_kernel(rng):
    out = T.edge_inner_product(Tensor(np.zeros((3, 2, 4, 6))), Tensor(rng.normal(size=(3, 2, 6))))
    np.testing.assert_array_equal(out.data, 0.0)


def test_edge_inner_product_loop_oracle(rng):
    kern, geo = rng.normal(size=(2, 2, 3, 6)), rng.normal(size=(2, 2, 6))
    out = T.edge_inner_product(Tensor(kern), Tensor(geo)).data
    for i, j, m in itertools.product(range(2), range(2), range(3)):
        expect = sum(kern[i, j, m, c] * geo[i, j, c] for c in range(6))
        assert abs(out[i, j, m] - expect) <= 1e-12


def test_edge_inner_product_width_mismatch():
    with pytest.raises(DimensionError):
        T.edge_inner_product(Tensor(np.zeros((2, 2, 3, 6))), Tensor(np.zeros((2, 2, 5))))


# softmax

def test_softmax_values():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                  elements=st.floats(-500, 500)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.all(out >= 0)


# backward

def test_backward_of_sum_is_ones():
    w = leaf(np.zeros((2, 3, 2)))
    backward(T.total(w))
    np.testing.assert_array_equal(w.grad, np.ones((2, 3, 2)))


def test_backward_of_square_norm(rng):
    w = leaf(rng.normal(size=5))
    backward(T.total(T.mul(w, w)))
    np.testing.assert_allclose(w.grad, 2 * w.data, rtol=1e-15)


def test_backward_accumulates(rng):
    w = leaf(rng.normal(size=3))
    backward(T.total(w))
    backward(T.total(w))
    np.testing.assert_array_equal(w.grad, [2.0, 2.0, 2.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        backward(T.mul(leaf([1.0, 2.0]), 2.0))


def test_backward_rejects_detached_loss():
    with pytest.raises(ContractError):
        backward(Tensor(1.0))


def test_shared_subexpression_counted_once_per_path(rng):
    x = leaf(rng.normal(size=3))
    y = T.mul(x, 3.0)
    backward(T.total(T.add(y, y)))
    np.testing.assert_allclose(x.grad, 6.0)


def test_tape_determinism(rng):
    from adaptconv.conv import AdaptConvLayer
    from adaptconv.graph import knn_spatial
    pos = rng.normal(size=(12, 3))
    idx = knn_spatial(pos, 4).idx
    grads = []
    for _ in range(2):
        layer = AdaptConvLayer(3, 4, rng=np.random.default_rng(5))
        x = leaf(pos.copy())
        backward(T.total(layer(x, idx, pos, training=True)))
        grads.append([x.grad] + [t.grad for t in layer.parameters()])
    for a, b in zip(*grads):
        assert np.array_equal(a, b)


def test_elementwise_broadcast_gradients(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=4))
    backward(T.total(T.mul(a, b)))
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0), rtol=1e-13)
    np.testing.assert_allclose(a.grad, np.tile(b.data, (3, 1)), rtol=0)


# ParamStore

def test_param_store_round_trip(tmp_path, rng):
    store = ParamStore()
    store["enc.conv1.kernel.w0"] = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    store["enc.conv1.norm.running_var"] = Tensor(rng.uniform(size=5))
    store["scalar"] = Tensor(np.array(np.pi), requires_grad=True)
    path = tmp_path / "p.acps"
    store.save(path)
    back = ParamStore.load(path)
    assert list(back) == list(store)
    for name in store:
        assert back[name].data.tobytes() == store[name].data.tobytes()
        assert back[name].data.shape == store[name].data.shape
        assert back[name].requires_grad == store[name].requires_grad
    assert back.to_bytes() == store.to_bytes()


def test_param_store_counts_trainable_only(rng):
    store = ParamStore()
    store["w"] = Tensor(np.zeros((3, 5)), requires_grad=True)
    store["b"] = Tensor(np.zeros(5), requires_grad=True)
    store["running"] = Tensor(np.zeros(7))
    assert store.count() == 20
    assert store.count(trainable_only=False) == 27


def test_param_store_rejects_bad_magic():
    with pytest.raises(ContractError):
        ParamStore.from_bytes(b"NOPE" + bytes(8))


def test_module_names_are_unique():
    from adaptconv.config import desk_segmentation
    from adaptconv.net import build_net
    net = build_net(desk_segmentation(), 4, 2, 6)
    names = [n for n, _ in net.named_tensors()]
    assert len(names) == len(set(names))


def test_grad_shapes_match_after_backward(rng):
    from adaptconv.conv import GraphConvLayer
    from adaptconv.graph import knn_spatial
    pos = rng.normal(size=(10, 3))
    layer = GraphConvLayer(3, 5, rng=rng)
    backward(T.total(layer(Tensor(pos), knn_spatial(pos, 3).idx, training=True)))
    for t in layer.parameters():
        assert t.grad.shape == t.data.shape
