import numpy as np
import pytest

from cropduet import Tape, Tensor
from cropduet import tensor as T
from cropduet.errors import ContractError, DegenerateBatchError, DimensionError
from cropduet.tensor import RunningStats

from oracles import finite_diff_grad, max_rel_err


def fd_check(build_loss, tensors, tol=1e-4, eps=1e-5):
    """Analytic gradients of build_loss() vs central finite differences."""
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        num = finite_diff_grad(lambda: float(build_loss().data), t.data, eps)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, max_rel_err(ana, num))
    assert worst < tol, f"max relative error {worst}"
    return worst


def projected(out, rng):
    """Random fixed projection to a scalar so every output element matters."""
    proj = Tensor(rng.uniform(0.5, 1.5, out.shape), dtype=out.dtype)
    return T.tsum(T.mul(out, proj))


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv2d_identity_kernel():
    x = Tensor(np.ones((1, 1, 3, 3)))
    k = Tensor(np.ones((1, 1, 1, 1)))
    out = T.conv2d(x, k, stride=1, padding=0)
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 3, 3), dtype=np.float32))


def test_conv2d_zero_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    k = Tensor(np.zeros((4, 3, 3, 3)))
    out = T.conv2d(x, k, stride=1, padding=1)
    assert not out.data.any()


def test_conv2d_shape_law():
    x = Tensor(np.zeros((1, 2, 9, 7)))
    k = Tensor(np.zeros((3, 2, 3, 3)))
    assert T.conv2d(x, k, stride=2, padding=1).shape == (1, 3, 5, 4)


def test_conv2d_channel_mismatch():
    x = Tensor(np.zeros((1, 2, 5, 5)))
    k = Tensor(np.zeros((1, 3, 3, 3)))
    with pytest.raises(DimensionError):
        T.conv2d(x, k, 1, 0)


def test_conv2d_kernel_too_large():
    x = Tensor(np.zeros((1, 1, 3, 3)))
    k = Tensor(np.zeros((1, 1, 5, 5)))
    with pytest.raises(DimensionError):
        T.conv2d(x, k, 1, 0)


def test_conv2d_gradients(f64):
    rng = np.random.default_rng(11)
    x = Tensor(rng.uniform(-2, 2, (1, 2, 5, 5)), requires_grad=True)
    k = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
    for stride, padding in ((1, 0), (1, 1), (2, 1)):
        fd_check(lambda: projected(T.conv2d(x, k, stride, padding),
                                   np.random.default_rng(5)),
                 [x, k], tol=1e-4)


# ---------------------------------------------------------------------------
# relu / sigmoid
# ---------------------------------------------------------------------------

def test_relu_values():
    out = T.relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_relu_all_negative_zero_grad():
    x = Tensor([-3.0, -1.0, -0.5], requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.relu(x))
    tape.backward(loss)
    assert not loss.data.any()
    np.testing.assert_array_equal(x.grad, np.zeros(3, dtype=np.float32))


def test_relu_gradient(f64):
    rng = np.random.default_rng(2)
    vals = rng.uniform(-2, 2, size=40)
    vals = vals[np.abs(vals) > 1e-3]  # keep away from the kink
    x = Tensor(vals, requires_grad=True)
    fd_check(lambda: projected(T.relu(x), np.random.default_rng(3)), [x])


def test_sigmoid_at_zero():
    assert T.sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5)


def test_sigmoid_symmetry():
    rng = np.random.default_rng(4)
    x = rng.uniform(-5, 5, size=50)
    lhs = T.sigmoid(Tensor(x)).data
    rhs = 1.0 - T.sigmoid(Tensor(-x)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_sigmoid_overflow_safe_and_open_interval():
    out = T.sigmoid(Tensor([-1e3, -50.0, 0.0, 50.0, 1e3])).data
    assert np.all(out > 0.0) and np.all(out < 1.0)
    assert np.all(np.diff(out) >= 0)


def test_sigmoid_gradient(f64):
    rng = np.random.default_rng(6)
    x = Tensor(rng.uniform(-2, 2, size=30), requires_grad=True)
    fd_check(lambda: projected(T.sigmoid(x), np.random.default_rng(7)), [x], tol=1e-5)


# ---------------------------------------------------------------------------
# batch_norm
# ---------------------------------------------------------------------------

def test_batch_norm_standardizes(f64):
    rng = np.random.default_rng(8)
    x = Tensor(rng.uniform(-3, 5, (4, 3, 6, 6)))
    scale = Tensor(np.ones(3))
    shift = Tensor(np.zeros(3))
    out = T.batch_norm(x, scale, shift, RunningStats(3), mode="train")
    mu = out.data.mean(axis=(0, 2, 3))
    var = out.data.var(axis=(0, 2, 3))
    assert np.all(np.abs(mu) < 1e-5)
    assert np.all(np.abs(var - 1.0) < 1e-4)


def test_batch_norm_identity_on_standardized(f64):
    rng = np.random.default_rng(9)
    raw = rng.normal(size=(8, 2, 4, 4))
    mu = raw.mean(axis=(0, 2, 3))[:, None, None]
    sd = np.sqrt(raw.var(axis=(0, 2, 3)))[:, None, None]
    raw = (raw - mu) / sd
    x = Tensor(raw)
    out = T.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       RunningStats(2), mode="train")
    # the eps inside the variance sqrt perturbs proportionally to |x|
    np.testing.assert_allclose(out.data, raw, rtol=1e-5, atol=1e-5)


def test_batch_norm_running_stats_update():
    rng = np.random.default_rng(10)
    stats = RunningStats(2)
    x = Tensor(rng.uniform(2, 4, (4, 2, 3, 3)))
    T.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, mode="train")
    expected_mean = 0.9 * 0.0 + 0.1 * x.data.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(stats.mean.data, expected_mean, rtol=1e-6)
    frozen = RunningStats(2)
    T.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), frozen,
                 mode="train", update_running=False)
    assert not frozen.mean.data.any()


def test_batch_norm_degenerate_batch():
    x = Tensor(np.zeros((1, 2, 1, 1)))
    with pytest.raises(DegenerateBatchError):
        T.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                     RunningStats(2), mode="train")


def test_batch_norm_gradients(f64):
    rng = np.random.default_rng(12)
    x = Tensor(rng.uniform(-2, 2, (3, 2, 4, 4)), requires_grad=True)
    scale = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    shift = Tensor(rng.uniform(-0.5, 0.5, 2), requires_grad=True)
    stats = RunningStats(2)
    fd_check(lambda: projected(
        T.batch_norm(x, scale, shift, stats, "train", update_running=False),
        np.random.default_rng(13)), [x, scale, shift], tol=1e-4)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def test_max_pool_constant():
    x = Tensor(np.full((1, 2, 6, 6), 3.5))
    out = T.max_pool(x, 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 2, 3, 3), 3.5, dtype=np.float32))


def test_max_pool_two_by_two():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = T.max_pool(x, 2, 2)
    assert out.data.reshape(()) == 4.0


def test_max_pool_tie_routes_to_first():
    x = Tensor(np.array([[5.0, 5.0], [5.0, 5.0]]).reshape(1, 1, 2, 2),
               requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.max_pool(x, 2, 2))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad.reshape(4), [1.0, 0.0, 0.0, 0.0])


def test_max_pool_window_too_large():
    with pytest.raises(DimensionError):
        T.max_pool(Tensor(np.zeros((1, 1, 2, 2))), 3, 1)


def test_max_pool_gradient(f64):
    rng = np.random.default_rng(14)
    # snap to a coarse lattice then jitter so windows have clear max gaps
    vals = np.round(rng.uniform(-2, 2, (1, 2, 6, 6)), 1)
    vals += rng.uniform(0.001, 0.004, vals.shape) * rng.choice([-1, 1], vals.shape)
    x = Tensor(vals, requires_grad=True)
    fd_check(lambda: projected(T.max_pool(x, 2, 2), np.random.default_rng(15)), [x])


def test_global_avg_pool_constant():
    out = T.global_avg_pool(Tensor(np.full((2, 3, 4, 5), 1.25)))
    np.testing.assert_allclose(out.data, np.full((2, 3), 1.25), rtol=1e-7)


def test_global_avg_pool_mean():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert T.global_avg_pool(x).data.reshape(()) == 2.5


def test_global_avg_pool_gradient_is_uniform():
    x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.global_avg_pool(x))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, np.full(x.shape, 0.25), rtol=1e-6)


# ---------------------------------------------------------------------------
# fully_connected / mse
# ---------------------------------------------------------------------------

def test_fully_connected_identity():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    out = T.fully_connected(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x.data)


def test_fully_connected_zero_weight_broadcasts_bias():
    x = Tensor(np.ones((4, 3)))
    bias = Tensor(np.array([1.0, -2.0]))
    out = T.fully_connected(x, Tensor(np.zeros((2, 3))), bias)
    np.testing.assert_array_equal(out.data, np.tile([1.0, -2.0], (4, 1)).astype(np.float32))


def test_fully_connected_mismatch():
    with pytest.raises(DimensionError):
        T.fully_connected(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_fully_connected_gradients(f64):
    rng = np.random.default_rng(16)
    x = Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, 2), requires_grad=True)
    fd_check(lambda: projected(T.fully_connected(x, w, b),
                               np.random.default_rng(17)), [x, w, b])


def test_mse_zero_when_equal():
    p = Tensor([0.3, 0.7])
    assert float(T.mse_loss(p, Tensor([0.3, 0.7])).data) == 0.0


def test_mse_arithmetic():
    loss = T.mse_loss(Tensor([1.0, 0.0]), Tensor([0.0, 0.0]))
    assert float(loss.data) == pytest.approx(0.5)


def test_mse_empty_batch():
    with pytest.raises(DegenerateBatchError):
        T.mse_loss(Tensor(np.zeros(0)), Tensor(np.zeros(0)))


def test_mse_gradient(f64):
    rng = np.random.default_rng(18)
    p = Tensor(rng.uniform(-1, 1, 6), requires_grad=True)
    t = Tensor(rng.uniform(-1, 1, 6))
    fd_check(lambda: T.mse_loss(p, t), [p], tol=1e-6)


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.arange(5.0), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones(5, dtype=np.float32))


def test_backward_two_uses_add():
    x = Tensor([1.5], requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.add(x, x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = T.relu(x)
    with pytest.raises(ContractError):
        tape.backward(out)


def test_backward_loss_must_be_on_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        T.tsum(x)
    with Tape() as other:
        loss = T.tsum(x)
    with pytest.raises(ContractError):
        tape.backward(loss)
    other.backward(loss)  # the right tape works


def test_backward_accumulates_on_repeat():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.mul(x, x))
    tape.backward(loss)
    first = x.grad.copy()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 2.0 * first)


def test_backward_deterministic():
    def run():
        rng = np.random.default_rng(19)
        x = Tensor(rng.uniform(-1, 1, (2, 2, 6, 6)), requires_grad=True)
        k = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(T.relu(T.conv2d(x, k, 1, 1)))
        tape.backward(loss)
        return x.grad.tobytes(), k.grad.tobytes()

    assert run() == run()


def test_no_grad_writes_without_requires_grad():
    x = Tensor(np.ones(4), requires_grad=False)
    y = Tensor(np.ones(4), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.mul(x, y))
    tape.backward(loss)
    assert x.grad is None
    assert y.grad is not None


def test_no_tape_records_nothing():
    x = Tensor(np.ones(4), requires_grad=True)
    out = T.relu(x)
    assert out.requires_grad is False  # nothing recorded outside a tape
