import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densekit.autodiff import (BnState, Tape, Tensor, Workspace, add, avg_pool2, batch_norm, concat_channels,
                               conv2d, dropout, global_avg_pool, linear_softmax_xent, max_pool, parameter,
                               reduce_sum, relu)
from densekit.autodiff.gradcheck import Probe, check, gradcheck_network, numeric_grad
from densekit.builder import NetworkSpec
from densekit.errors import ConfigError, DataError, DegenerateBatchError, PlanBugError, UsageError

from oracles import batch_norm_two_pass, conv2d_loops, pool_windows, softmax_xent_mp


def leaf(a, name="x"):
    return parameter(np.array(a, dtype=np.float64), name)


# ---------------------------------------------------------------- conv2d


def test_conv_box_sum():
    y = conv2d(leaf(np.ones((1, 1, 3, 3))), leaf(np.ones((1, 1, 3, 3))), 1, 1).data
    assert y[0, 0, 1, 1] == 9
    assert y[0, 0, 0, 0] == y[0, 0, 2, 2] == y[0, 0, 0, 2] == 4


def test_conv_scalar():
    y = conv2d(leaf([[[[1.5]]]]), leaf([[[[-2.0]]]])).data
    assert y.shape == (1, 1, 1, 1) and y[0, 0, 0, 0] == -3.0


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 3, 7)])
def test_conv_matches_loop_oracle(stride, pad, k):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, k, k))
    y = conv2d(leaf(x), leaf(w), stride, pad).data
    np.testing.assert_allclose(y, conv2d_loops(x, w, stride, pad), rtol=0, atol=1e-12)


def test_conv_shape_errors_name_both_shapes():
    with pytest.raises(ConfigError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)"):
        conv2d(leaf(np.zeros((1, 2, 4, 4))), leaf(np.zeros((3, 5, 3, 3))))
    with pytest.raises(ConfigError, match="unsupported"):
        conv2d(leaf(np.zeros((1, 2, 4, 4))), leaf(np.zeros((3, 2, 5, 5))))
    with pytest.raises(ConfigError, match="empty"):
        conv2d(leaf(np.zeros((1, 2, 2, 2))), leaf(np.zeros((3, 2, 3, 3))))


# ---------------------------------------------------------------- batch norm


def bn_state(c, rng=None):
    st_ = BnState.create(c, "bn")
    if rng is not None:
        st_.gamma.data[:] = rng.normal(size=c)
        st_.beta.data[:] = rng.normal(size=c)
    return st_


def test_bn_standardizes():
    x = np.random.default_rng(0).normal(3, 5, size=(4, 3, 5, 5))
    y = batch_norm(leaf(x), bn_state(3), True).data
    assert np.all(np.abs(y.mean(axis=(0, 2, 3))) < 1e-6)
    assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1) < 1e-5)


def test_bn_affine_identity():
    x = np.random.default_rng(0).normal(size=(4, 2, 3, 3))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    s = bn_state(2)
    s.gamma.data[:] = 2
    s.beta.data[:] = 3
    s.eps = 1e-300
    np.testing.assert_allclose(batch_norm(leaf(x), s, True).data, 2 * x + 3, atol=1e-12)


def test_bn_two_pass_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(1, 2, size=(3, 4, 5, 5))
    s = bn_state(4, rng)
    y = batch_norm(leaf(x), s, True).data
    np.testing.assert_allclose(y, batch_norm_two_pass(x, s.gamma.data, s.beta.data, s.eps), atol=1e-10)


def test_bn_running_stats_and_eval():
    rng = np.random.default_rng(3)
    x = rng.normal(2, 3, size=(4, 2, 3, 3))
    s = bn_state(2)
    batch_norm(leaf(x), s, True)
    n = 4 * 9
    np.testing.assert_allclose(s.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(s.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))
    y = batch_norm(leaf(x), s, False).data
    expect = (x - s.running_mean[None, :, None, None]) / np.sqrt(s.running_var[None, :, None, None] + s.eps)
    np.testing.assert_allclose(y, expect, atol=1e-12)


def test_bn_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        batch_norm(leaf(np.ones((1, 2, 1, 1))), bn_state(2), True)
    batch_norm(leaf(np.ones((1, 2, 1, 1))), bn_state(2), False)  # eval mode is fine


def test_bn_channel_mismatch():
    with pytest.raises(ConfigError, match="3 channels"):
        batch_norm(leaf(np.ones((2, 3, 2, 2))), bn_state(2), True)


def test_bn_state_invariants():
    with pytest.raises(ConfigError):
        BnState.create(2, "b", eps=0)
    with pytest.raises(ConfigError):
        BnState.create(2, "b", momentum=1.0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 4), c=st.integers(1, 4), hw=st.integers(2, 5), seed=st.integers(0, 2 ** 31),
       loc=st.floats(-50, 50), scale=st.floats(0.1, 50))
def test_prop_bn_training_moments(n, c, hw, seed, loc, scale):
    x = np.random.default_rng(seed).normal(loc, scale, size=(n, c, hw, hw))
    s = bn_state(c)
    s.eps = 1e-12
    y = batch_norm(leaf(x), s, True).data
    assert np.all(np.abs(y.mean(axis=(0, 2, 3))) < 1e-6)
    assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1) < 1e-5)
    assert np.all(s.running_var >= 0)


# ---------------------------------------------------------------- relu, concat, pools


def test_relu_values():
    np.testing.assert_array_equal(relu(leaf([[[[-1.0, 0.0, 2.0]]]])).data, [[[[0, 0, 2]]]])
    assert not relu(leaf(-np.ones((2, 2, 2, 2)))).data.any()


def test_relu_gradient_fd():
    x = leaf([[[[-0.5, -0.1, 0.1, 0.7]]]])
    tape = Tape()
    tape.backward(reduce_sum(relu(x, tape=tape), tape=tape))
    np.testing.assert_array_equal(x.grad, [[[[0, 0, 1, 1]]]])
    f = lambda: float(relu(Tensor(x.data)).data.sum())
    for i in range(4):
        assert numeric_grad(f, x.data, (0, 0, 0, i)) == pytest.approx(x.grad[0, 0, 0, i], abs=1e-9)


def test_concat_identity_single():
    x = leaf(np.random.default_rng(0).normal(size=(2, 3, 2, 2)))
    np.testing.assert_array_equal(concat_channels([x]).data, x.data)


def test_concat_layout():
    a, b = leaf(np.zeros((1, 2, 2, 2))), leaf(np.ones((1, 3, 2, 2)))
    y = concat_channels([a, b]).data
    assert y.shape == (1, 5, 2, 2)
    assert not y[:, :2].any() and y[:, 2:].all()


def test_concat_spatial_mismatch_names_index():
    with pytest.raises(ConfigError, match="input 2"):
        concat_channels([leaf(np.zeros((1, 1, 2, 2))), leaf(np.zeros((1, 1, 2, 2))), leaf(np.zeros((1, 1, 3, 2)))])
    with pytest.raises(ConfigError):
        concat_channels([])


@settings(max_examples=40, deadline=None)
@given(widths=st.lists(st.integers(1, 4), min_size=1, max_size=5), seed=st.integers(0, 2 ** 31))
def test_prop_concat_slice_identity(widths, seed):
    rng = np.random.default_rng(seed)
    xs = [leaf(rng.normal(size=(2, c, 3, 3)), f"x{i}") for i, c in enumerate(widths)]
    tape = Tape()
    y = concat_channels(xs, tape=tape)
    g = rng.normal(size=y.data.shape)
    tape.backward(reduce_sum(y, g, tape=tape))
    off = 0
    for x, c in zip(xs, widths):
        np.testing.assert_array_equal(y.data[:, off:off + c], x.data)
        np.testing.assert_array_equal(x.grad, g[:, off:off + c])
        off += c


def test_pool_trivia():
    assert avg_pool2(leaf(np.array([1.0, 2, 3, 4]).reshape(1, 1, 2, 2))).data.item() == 2.5
    c = np.full((1, 2, 6, 6), 1.75)
    assert np.all(avg_pool2(leaf(c)).data == 1.75)
    assert np.all(max_pool(leaf(c), 3, 2, 1).data == 1.75)
    assert global_avg_pool(leaf(c)).data.shape == (1, 2, 1, 1)


def test_pools_match_window_oracle():
    x = np.random.default_rng(4).normal(size=(1, 2, 6, 6))
    np.testing.assert_allclose(avg_pool2(leaf(x)).data, pool_windows(x, 2, 2, 0, np.mean), atol=1e-12)
    np.testing.assert_allclose(max_pool(leaf(x), 3, 2, 1).data, pool_windows(x, 3, 2, 1, max), atol=1e-12)
    np.testing.assert_allclose(max_pool(leaf(x), 2, 2, 0).data, pool_windows(x, 2, 2, 0, max), atol=1e-12)
    np.testing.assert_allclose(global_avg_pool(leaf(x)).data[:, :, 0, 0], x.mean(axis=(2, 3)), atol=1e-12)


def test_pool_too_small():
    with pytest.raises(ConfigError):
        avg_pool2(leaf(np.zeros((1, 1, 1, 4))))
    with pytest.raises(ConfigError):
        max_pool(leaf(np.zeros((1, 1, 2, 2))), 3, 2, 0)


# ---------------------------------------------------------------- dropout


def test_dropout_identities():
    x = leaf(np.random.default_rng(0).normal(size=(2, 2, 3, 3)))
    assert dropout(x, 0.0, np.random.default_rng(0), True) is x
    assert dropout(x, 0.5, np.random.default_rng(0), False) is x
    with pytest.raises(ConfigError):
        dropout(x, 1.0, np.random.default_rng(0), True)


def test_dropout_law_of_large_numbers():
    y = dropout(leaf(np.ones((1, 1, 1000, 1000))), 0.2, np.random.default_rng(0), True).data
    assert 0.995 <= y.mean() <= 1.005
    assert 0.198 <= np.mean(y == 0) <= 0.202
    assert np.allclose(y[y != 0], 1.25)


def test_dropout_backward_uses_mask():
    x = leaf(np.ones((1, 1, 4, 4)))
    tape = Tape()
    y = dropout(x, 0.5, np.random.default_rng(1), True, tape=tape)
    tape.backward(reduce_sum(y, tape=tape))
    np.testing.assert_array_equal(x.grad, y.data)


# ---------------------------------------------------------------- classifier


def test_xent_uniform_is_log_c():
    w = leaf(np.zeros((5, 3)))
    loss = linear_softmax_xent(leaf(np.ones((4, 3, 1, 1))), w, leaf(np.zeros(5)), [0, 1, 2, 4])
    assert float(loss.data) == pytest.approx(np.log(5), abs=1e-15)


def test_xent_is_stable():
    b = np.zeros(3)
    b[1] = 1000
    loss = float(linear_softmax_xent(leaf(np.zeros((1, 2, 1, 1))), leaf(np.zeros((3, 2))), leaf(b), [1]).data)
    assert np.isfinite(loss) and loss == pytest.approx(0, abs=1e-12)


def test_xent_extended_precision_oracle():
    rng = np.random.default_rng(5)
    x, w, b = rng.normal(size=(6, 4, 1, 1)), rng.normal(size=(7, 4)) * 3, rng.normal(size=7)
    y = rng.integers(0, 7, size=6)
    loss, logits = linear_softmax_xent(leaf(x), leaf(w), leaf(b), y, return_logits=True)
    assert float(loss.data) == pytest.approx(softmax_xent_mp(logits, y), abs=1e-10)


def test_xent_label_errors_name_sample():
    with pytest.raises(DataError, match="sample 2"):
        linear_softmax_xent(leaf(np.zeros((3, 2, 1, 1))), leaf(np.zeros((3, 2))), leaf(np.zeros(3)), [0, 1, 3])


# ---------------------------------------------------------------- tape


def test_backward_sum_gives_ones():
    x = leaf(np.random.default_rng(0).normal(size=(2, 3, 2, 2)))
    tape = Tape()
    tape.backward(reduce_sum(x, tape=tape))
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_backward_before_forward_is_usage_error():
    with pytest.raises(UsageError):
        Tape().backward(Tensor(np.asarray(1.0)))
    t1, t2 = Tape(), Tape()
    loss = reduce_sum(leaf(np.ones((1, 1, 1, 1))), tape=t1)
    with pytest.raises(UsageError):
        t2.backward(loss)


def test_tape_is_topological_and_reversed():
    rng = np.random.default_rng(0)
    x, w = leaf(rng.normal(size=(1, 2, 4, 4))), leaf(rng.normal(size=(3, 2, 3, 3)), "w")
    tape = Tape()
    y = relu(conv2d(x, w, 1, 1, tape=tape), tape=tape)
    loss = reduce_sum(avg_pool2(y, tape=tape), tape=tape)
    produced = set()
    for node in tape.nodes:
        assert all(t.producer is None or t.id in produced for t in node.inputs)
        produced.add(node.output.id)
    order = []
    orig = [n.backward for n in tape.nodes]
    for node, fn in zip(tape.nodes, orig):
        node.backward = (lambda n, f: (lambda g: (order.append(n.index), f(g))[1]))(node, fn)
    tape.backward(loss)
    assert order == sorted(order, reverse=True) == list(range(len(tape) - 1, -1, -1))


def test_workspace_stale_read_is_plan_bug():
    ws = Workspace(8)
    a, b = Tensor(None, "a"), Tensor(None, "b")
    ws.claim(a, (1, 1, 2, 2))
    ws.claim(b, (1, 1, 2, 2))
    with pytest.raises(PlanBugError, match="overwritten"):
        a.read()
    with pytest.raises(PlanBugError):
        ws.claim(Tensor(None), (1, 1, 3, 3))


def test_determinism_same_seed():
    def once():
        rng = np.random.default_rng(7)
        x, w = leaf(rng.normal(size=(2, 3, 5, 5))), leaf(rng.normal(size=(4, 3, 3, 3)), "w")
        s = bn_state(4, rng)
        tape = Tape()
        h = relu(batch_norm(conv2d(x, w, 1, 1, tape=tape), s, True, tape=tape), tape=tape)
        tape.backward(reduce_sum(h, rng.normal(size=h.data.shape), tape=tape))
        return x.grad, w.grad, s.gamma.grad
    for a, b in zip(once(), once()):
        np.testing.assert_array_equal(a, b)


def test_recompute_backward_equals_stored():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 3, 4, 4))
    g = rng.normal(size=(2, 3, 4, 4))

    def grads(use_ws):
        xin, s = leaf(x), bn_state(3, np.random.default_rng(1))
        tape = Tape()
        ws = Workspace(x.size) if use_ws else None
        h = relu(batch_norm(xin, s, True, tape=tape, workspace=ws), tape=tape)
        y = add(h, Tensor(np.zeros_like(x)), tape=tape)
        if ws:
            ws.release()
        tape.backward(reduce_sum(y, g, tape=tape))
        return (xin.grad, s.gamma.grad, s.beta.grad), tape

    (a, ta), (b, tb) = grads(False), grads(True)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    assert len(tb.recompute_nodes) == 2 and sum(tb.recompute_counts.values()) == 2
    assert not ta.recompute_nodes


# ---------------------------------------------------------------- finite differences


def _fd_case(build, tensors, samples=30, seed=0, tol=1e-5):
    def f():
        return float(build(None).data)

    tape = Tape()
    tape.backward(build(tape))
    return check(f, tensors, samples, np.random.default_rng(seed), tol=tol)


def test_fd_relu_conv_composition():
    rng = np.random.default_rng(9)
    x, w = leaf(rng.normal(size=(2, 3, 5, 5))), leaf(rng.normal(size=(4, 3, 3, 3)), "w")
    probe = rng.normal(size=(2, 4, 5, 5))
    res = _fd_case(lambda t: reduce_sum(relu(conv2d(x, w, 1, 1, tape=t), tape=t), probe, tape=t), [x, w],
                   samples=60, tol=1e-6)
    assert len(res.probes) == 60 and res.passed, res.worst


def test_check_rejects_zero_samples():
    with pytest.raises(UsageError):
        check(lambda: 0.0, [], 0, np.random.default_rng(0))


def test_probe_relative_error():
    assert Probe("p", (0,), 1.0, 1.0).rel_err == 0
    assert Probe("p", (0,), 0.0, 0.0).rel_err == 0
    assert Probe("p", (0,), 1.0, 0.5).rel_err == pytest.approx(0.5)


def test_gradcheck_network_guards():
    with pytest.raises(UsageError):
        gradcheck_network(NetworkSpec(blocks=(1,), growth=2, classes=2), samples=0)
    with pytest.raises(ConfigError, match="200,000"):
        gradcheck_network(NetworkSpec(blocks=(16, 16, 16), growth=12), samples=1)


@pytest.mark.parametrize("variant", [dict(), dict(bn_placement="post"), dict(bottleneck_mult=0),
                                     dict(connectivity="power-of-two", blocks=(3,)),
                                     dict(growth_schedule="exponential", growth=2)])
def test_gradcheck_network_variants(variant):
    spec = NetworkSpec(blocks=variant.pop("blocks", (2, 2)), growth=variant.pop("growth", 4), classes=3,
                       **variant)
    res = gradcheck_network(spec, samples=15, seed=1)
    assert res.passed, res.worst


def test_gradcheck_negative_control():
    res = gradcheck_network(NetworkSpec(blocks=(2, 2), growth=4, classes=3), samples=5, corrupt=True)
    assert not res.passed
    assert res.failures() and res.worst.rel_err > 1e-3
