import numpy as np
import pytest

from triggerlab import autograd as ag


def finite_diff(f, x, h=1e-6):
    """Central differences of a scalar function over every coordinate."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def check_grad(build, x, tol=1e-5):
    leaf = ag.tensor(x, requires_grad=True)
    ag.backward(ag.reduce_sum(build(leaf)))
    fd = finite_diff(lambda v: float(ag.reduce_sum(build(ag.constant(v))).data), x)
    assert rel_err(leaf.grad, fd) < tol


RNG = np.random.default_rng(1234)


def test_sum_gradient_is_ones():
    x = ag.tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    ag.backward(ag.reduce_sum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_inner_product_gradient_is_weights():
    a = RNG.normal(size=7)
    x = ag.tensor(RNG.normal(size=7), requires_grad=True)
    ag.backward(ag.reduce_sum(ag.mul(ag.constant(a), x)))
    assert np.array_equal(x.grad, a)


@pytest.mark.parametrize("op", ["add", "mul", "matmul", "log", "relu", "clamp",
                                "take", "concat", "reshape", "transpose",
                                "mean", "log_softmax"])
def test_primitive_gradients_match_finite_differences(op):
    x = RNG.normal(size=(5, 6))
    if op == "add":
        other = ag.constant(RNG.normal(size=(5, 6)))
        check_grad(lambda t: ag.add(t, other), x)
    elif op == "mul":
        other = ag.constant(RNG.normal(size=(5, 6)))
        check_grad(lambda t: ag.mul(t, other), x)
    elif op == "matmul":
        other = ag.constant(RNG.normal(size=(6, 3)))
        check_grad(lambda t: ag.matmul(t, other), x)
    elif op == "log":
        check_grad(lambda t: ag.log(t), np.abs(x) + 0.5)
    elif op == "relu":
        check_grad(lambda t: ag.relu(t), x + 0.01)  # keep away from the kink
    elif op == "clamp":
        check_grad(lambda t: ag.clamp(t, -0.5, 0.5), x)
    elif op == "take":
        idx = RNG.integers(0, 30, size=(4, 8))
        check_grad(lambda t: ag.take(t, idx), RNG.normal(size=30))
    elif op == "concat":
        other = ag.constant(RNG.normal(size=(2, 6)))
        check_grad(lambda t: ag.concat([t, other]), x)
    elif op == "reshape":
        up = ag.constant(RNG.normal(size=(3, 10)))
        check_grad(lambda t: ag.mul(ag.reshape(t, (3, 10)), up), x)
    elif op == "transpose":
        up = ag.constant(RNG.normal(size=(6, 5)))
        check_grad(lambda t: ag.mul(ag.transpose(t), up), x)
    elif op == "mean":
        check_grad(lambda t: ag.reduce_mean(ag.mul(t, t)), x)
    elif op == "log_softmax":
        up = ag.constant(RNG.normal(size=(5, 6)))
        check_grad(lambda t: ag.mul(ag.log_softmax(t), up), x)


def test_conv2d_gradients_match_finite_differences():
    x = RNG.normal(size=(2, 3, 6, 7))
    w = RNG.normal(size=(4, 3, 3, 3))
    b = RNG.normal(size=4)
    up = ag.constant(RNG.normal(size=(2, 4, 4, 5)))

    for which, val in (("x", x), ("w", w), ("b", b)):
        leaf = ag.tensor(val, requires_grad=True)
        parts = {"x": ag.constant(x), "w": ag.constant(w), "b": ag.constant(b)}
        parts[which] = leaf
        ag.backward(ag.reduce_sum(ag.mul(ag.conv2d(parts["x"], parts["w"], parts["b"]), up)))

        def f(v):
            args = {"x": x, "w": w, "b": b}
            args[which] = v
            out = ag.conv2d(ag.constant(args["x"]), ag.constant(args["w"]),
                            ag.constant(args["b"]))
            return float(ag.reduce_sum(ag.mul(out, up)).data)

        assert rel_err(leaf.grad, finite_diff(f, val)) < 1e-5, which


def test_maxpool_gradient_and_tie_routing():
    x = RNG.normal(size=(1, 2, 4, 6))
    check_grad(lambda t: ag.maxpool2d(ag.mul(t, t)), x)
    # exact tie in one window: gradient goes to the first element in scan order
    tied = np.zeros((1, 1, 2, 2))
    leaf = ag.tensor(tied, requires_grad=True)
    ag.backward(ag.reduce_sum(ag.maxpool2d(leaf)))
    assert leaf.grad[0, 0, 0, 0] == 1.0
    assert leaf.grad.sum() == 1.0


def test_nll_loss_gradient():
    x = RNG.normal(size=(4, 5))
    labels = np.array([0, 3, 2, 1])
    leaf = ag.tensor(x, requires_grad=True)
    ag.backward(ag.nll_loss(ag.log_softmax(leaf), labels))
    fd = finite_diff(lambda v: float(
        ag.nll_loss(ag.log_softmax(ag.constant(v)), labels).data), x)
    assert rel_err(leaf.grad, fd) < 1e-5


def build_cnn_loss(x, w1, b1, w2, b2, labels):
    h = ag.relu(ag.conv2d(x, w1, b1))
    h = ag.maxpool2d(h)
    B = h.data.shape[0]
    h = ag.reshape(h, (B, -1))
    logits = ag.add(ag.matmul(h, w2), b2)
    return ag.nll_loss(ag.log_softmax(logits), labels)


def test_composite_cnn_loss_gradient_double_precision():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 1, 8, 10))
    w1 = rng.normal(size=(4, 1, 3, 3)) * 0.5
    b1 = rng.normal(size=4) * 0.1
    w2 = rng.normal(size=(4 * 3 * 4, 5)) * 0.3
    b2 = rng.normal(size=5) * 0.1
    labels = np.array([0, 2, 4])

    leaf = ag.tensor(w1, requires_grad=True)
    ag.backward(build_cnn_loss(ag.constant(x), leaf, ag.constant(b1),
                               ag.constant(w2), ag.constant(b2), labels))
    fd = finite_diff(lambda v: float(build_cnn_loss(
        ag.constant(x), ag.constant(v), ag.constant(b1), ag.constant(w2),
        ag.constant(b2), labels).data), w1)
    assert rel_err(leaf.grad, fd) < 1e-4


def test_composite_cnn_loss_gradient_single_precision():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 1, 8, 10)).astype(np.float32)
    w1 = (rng.normal(size=(4, 1, 3, 3)) * 0.5).astype(np.float32)
    b1 = (rng.normal(size=4) * 0.1).astype(np.float32)
    w2 = (rng.normal(size=(4 * 3 * 4, 5)) * 0.3).astype(np.float32)
    b2 = (rng.normal(size=5) * 0.1).astype(np.float32)
    labels = np.array([1, 3])

    leaf = ag.tensor(w1, requires_grad=True)
    ag.backward(build_cnn_loss(ag.constant(x), leaf, ag.constant(b1),
                               ag.constant(w2), ag.constant(b2), labels))
    fd = finite_diff(lambda v: float(build_cnn_loss(
        ag.constant(x), ag.constant(v.astype(np.float32)), ag.constant(b1),
        ag.constant(w2), ag.constant(b2), labels).data),
        w1.astype(np.float64), h=1e-3)
    assert rel_err(leaf.grad.astype(np.float64), fd) < 5e-2


def test_backward_requires_scalar_loss():
    x = ag.tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ag.AutogradError, match="scalar"):
        ag.backward(ag.mul(x, x))


def test_backward_reports_nan_with_op_name():
    x = ag.tensor(np.array([-1.0, 2.0]), requires_grad=True)
    out = ag.log(x)          # produces a NaN
    with pytest.raises(ag.AutogradError, match="log"):
        ag.backward(ag.reduce_sum(out))


def test_backward_does_not_mutate_forward_values():
    x = ag.tensor(RNG.normal(size=(3, 3)), requires_grad=True)
    mid = ag.mul(x, x)
    before = mid.data.copy()
    ag.backward(ag.reduce_sum(mid))
    assert np.array_equal(mid.data, before)


def test_grad_accumulates_over_reuse():
    x = ag.tensor(np.array([2.0]), requires_grad=True)
    y = ag.add(ag.mul(x, x), x)    # d/dx (x^2 + x) = 2x + 1
    ag.backward(ag.reduce_sum(y))
    assert np.allclose(x.grad, [5.0])


# ---------------------------------------------------------------------------
# Adam and clip
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_parameters():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.zeros(2)}
    new, state = ag.adam_step(p, g, ag.AdamState(), alpha=0.1)
    assert np.array_equal(new["w"], p["w"])
    assert state.step == 1


def test_adam_unit_gradient_first_step_magnitude():
    # mhat = 1, vhat = 1 after bias correction: update = alpha / (1 + eps)
    p = {"w": np.array([0.0])}
    g = {"w": np.array([1.0])}
    alpha = 0.25
    new, _ = ag.adam_step(p, g, ag.AdamState(), alpha=alpha)
    assert np.allclose(new["w"], [-alpha / (1.0 + 1e-8)], rtol=0, atol=1e-15)


def test_adam_is_deterministic_and_pure():
    rng = np.random.default_rng(5)
    p = {"w": rng.normal(size=4)}
    g = {"w": rng.normal(size=4)}
    s0 = ag.AdamState()
    out1, s1 = ag.adam_step(p, g, s0, 0.01)
    out2, s2 = ag.adam_step(p, g, s0, 0.01)
    assert np.array_equal(out1["w"], out2["w"])
    assert np.array_equal(s1.m["w"], s2.m["w"])
    assert s0.step == 0 and s0.m == {}


def test_adam_shape_mismatch_raises():
    with pytest.raises(ValueError, match="shape"):
        ag.adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, ag.AdamState(), 0.1)


def test_clip_basic_and_idempotent():
    out = ag.clip(np.array([-2.0, 0.5, 2.0]), -1, 1)
    assert np.array_equal(out, [-1.0, 0.5, 1.0])
    inside = np.array([0.1, -0.3])
    assert np.array_equal(ag.clip(inside, -1, 1), inside)
    assert np.array_equal(ag.clip(ag.clip(out, -1, 1), -1, 1), out)


def test_clip_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        ag.clip(np.zeros(3), 1, -1)


def test_clamp_boundary_gradient_is_zero():
    x = ag.tensor(np.array([-1.5, -1.0, 0.0, 1.0, 1.5]), requires_grad=True)
    ag.backward(ag.reduce_sum(ag.clamp(x, -1, 1)))
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0, 0.0, 0.0])
