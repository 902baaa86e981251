import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from parot import numkernel as nk
from parot.numkernel.gradcheck import gradcheck, relative_error
from randgraph import random_graph


def leaf(x):
    return nk.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


@pytest.mark.parametrize("seed", range(0, 100, 9))
def test_random_graph_gradients(seed):
    fn, leaves = random_graph(seed)
    res = gradcheck(fn, leaves)
    assert res.checked > 0
    assert res.max_rel_error < 1e-4


def test_relative_error_floor():
    assert relative_error(0.0, 1e-12) < 1e-5
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)


def test_shared_subexpression_accumulates():
    x = leaf([1.0, 2.0, 3.0])
    y = nk.mul(x, x)
    loss = nk.tsum(nk.add(y, y))
    nk.backward(loss)
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_backward_requires_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        nk.backward(nk.mul(x, 2.0))


def test_backward_without_graph():
    with pytest.raises(ValueError):
        nk.backward(nk.Tensor(np.array(1.0)))


def test_no_grad_records_nothing():
    x = leaf(np.ones(3))
    with nk.no_grad():
        y = nk.mul(x, 2.0)
    assert not y.requires_grad and y.is_leaf


def test_shape_mismatch_messages():
    with pytest.raises(ValueError, match="add"):
        nk.add(leaf(np.ones((2, 3))), leaf(np.ones((4, 3))))
    with pytest.raises(ValueError, match="matmul"):
        nk.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))


def test_apply_dispatch():
    x = leaf([[-1.0, 2.0]])
    np.testing.assert_array_equal(nk.apply("relu", x).data, [[0.0, 2.0]])
    with pytest.raises(ValueError, match="unknown primitive"):
        nk.apply("nope", x)


def test_max_pool_ties_lowest_index():
    x = leaf(np.array([[1.0, 5.0], [1.0, 5.0], [0.0, 5.0]]))
    out, arg = nk.max_pool(x, axis=0)
    np.testing.assert_array_equal(arg, [0, 0])
    nk.backward(nk.tsum(out))
    np.testing.assert_array_equal(x.grad, [[1, 1], [0, 0], [0, 0]])


def test_kink_trace_changes_across_relu_kink():
    x = leaf([0.5, -0.5])
    with nk.record_kinks() as t1:
        nk.relu(x)
    x.data[1] = 0.5
    with nk.record_kinks() as t2:
        nk.relu(x)
    assert not np.array_equal(t1[0], t2[0])


def test_gradcheck_skips_kinks():
    x = leaf([0.0, 1.0])
    res = gradcheck(lambda: nk.tsum(nk.relu(x)), [x])
    assert res.skipped == 1 and res.checked == 1


def test_gradcheck_rejects_float32():
    with pytest.raises(TypeError):
        gradcheck(lambda: None, [nk.Tensor(np.ones(2, np.float32), requires_grad=True)])


def test_batch_norm_gradients_eval_and_train():
    rng = np.random.default_rng(0)
    x = leaf(rng.normal(size=(6, 4)))
    gamma, beta = leaf(rng.uniform(0.5, 1.5, 4)), leaf(rng.normal(size=4))
    w = rng.normal(size=(6, 4))
    for training in (True, False):
        for act in ("none", "relu", "leaky_relu"):
            rm, rv = rng.normal(size=4), rng.uniform(0.5, 2, 4)

            def fn():
                out = nk.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training, activation=act)
                return nk.tsum(nk.mul(out, w))

            assert gradcheck(fn, [x, gamma, beta]).max_rel_error < 1e-4


def test_batch_norm_running_stats():
    x = np.arange(12, dtype=np.float64).reshape(4, 3)
    rm, rv = np.zeros(3), np.ones(3)
    nk.batch_norm(nk.Tensor(x), nk.Tensor(np.ones(3)), nk.Tensor(np.zeros(3)), rm, rv, True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(0, ddof=1))


def test_batch_norm_eval_uses_running_stats():
    x = np.ones((2, 2))
    out = nk.batch_norm(nk.Tensor(x), nk.Tensor(np.ones(2)), nk.Tensor(np.zeros(2)),
                        np.array([1.0, 0.0]), np.array([1.0, 4.0]), False, eps=0.0)
    np.testing.assert_allclose(out.data, [[0.0, 0.5], [0.0, 0.5]])


def test_dropout_identity_in_eval_and_scaled_in_train():
    x = nk.Tensor(np.ones((1000,)))
    assert nk.dropout(x, 0.5, None, False) is x
    out = nk.dropout(x, 0.5, np.random.default_rng(0), True).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.1
    with pytest.raises(ValueError):
        nk.dropout(x, 1.0, np.random.default_rng(0), True)


def test_softmax_cross_entropy_value():
    logits = nk.Tensor(np.log(np.array([[1.0, 3.0]])))
    loss = nk.softmax_cross_entropy(logits, [1])
    assert float(loss.data) == pytest.approx(-np.log(0.75))


def test_adam_matches_functional_step():
    rng = np.random.default_rng(1)
    p = leaf(rng.normal(size=5))
    ref = [p.data.copy()]
    opt = nk.Adam([("p", p)], weight_decay=1e-6)
    state = nk.AdamState([p])
    for _ in range(3):
        g = rng.normal(size=5)
        p.grad = g.copy()
        opt.step(1e-2)
        ref = nk.adam_step(ref, [g], state, 1e-2, 1e-6)
    np.testing.assert_allclose(p.data, ref[0], rtol=1e-12)


def test_adam_first_step_moves_by_lr():
    p = leaf([1.0, -1.0])
    p.grad = np.array([3.0, -0.5])
    nk.Adam([("p", p)], weight_decay=0.0).step(0.1)
    np.testing.assert_allclose(p.data, [0.9, -0.9], rtol=1e-6)


def test_adam_rejects_bad_input():
    p = leaf([1.0])
    opt = nk.Adam([("block.w", p)])
    p.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="block.w"):
        opt.step(1e-3)
    with pytest.raises(ValueError):
        opt.step(0.0)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    mlp = nk.MLP([3, 8, 4], rng)
    mlp.layers[0].bn.running_mean[:] = rng.normal(size=8)
    path = tmp_path / "m.ckpt"
    nk.save_checkpoint(mlp, path)
    other = nk.MLP([3, 8, 4], np.random.default_rng(5))
    nk.load_checkpoint(other, path)
    for (n1, a), (n2, b) in zip(mlp.state_blocks().items(), other.state_blocks().items()):
        assert n1 == n2
        np.testing.assert_array_equal(a, b)
    nk.save_checkpoint(other, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTIT")
    with pytest.raises(nk.CheckpointError, match="magic"):
        nk.load_blocks(bad)
    good = tmp_path / "g.ckpt"
    nk.save_blocks({"w": np.ones((2, 2))}, good)
    bad.write_bytes(good.read_bytes()[:-3])
    with pytest.raises(nk.CheckpointError, match="truncated"):
        nk.load_blocks(bad)
    mlp = nk.MLP([2, 2], np.random.default_rng(0))
    with pytest.raises(KeyError, match="missing"):
        nk.load_checkpoint(mlp, good)


def test_dense_has_no_bias_before_norm():
    d = nk.Dense(3, 4, np.random.default_rng(0))
    assert d.fc.bias is None
    assert nk.Dense(3, 4, np.random.default_rng(0), norm=False).fc.bias is not None


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)), arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
def test_add_mul_gradients_property(a, b):
    x, y = leaf(a), leaf(b)
    nk.backward(nk.tsum(nk.add(nk.mul(x, y), x)))
    np.testing.assert_allclose(x.grad, b + 1.0)
    np.testing.assert_allclose(y.grad, a)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-5, 5)), st.integers(0, 2**31))
def test_gather_backward_is_scatter_add(x, seed):
    idx = np.random.default_rng(seed).integers(0, 5, size=(1, 7))
    t = leaf(x[None])
    nk.backward(nk.tsum(nk.gather(t, idx)))
    expected = np.zeros(5)
    np.add.at(expected, idx[0], 1.0)
    np.testing.assert_array_equal(t.grad[0], np.repeat(expected[:, None], 3, axis=1))
