import numpy as np
import pytest

from cropduet import Tape, Tensor
from cropduet import tensor as T
from cropduet.nn import (AssessorNet, BatchNorm2d, Conv2d, Linear,
                         LocalizerNet, ResidualBlock, frozen, he_uniform)

from oracles import finite_diff_grad, max_rel_err


def rng():
    return np.random.default_rng(50)


def test_he_uniform_bounds():
    draws = he_uniform(rng(), (64, 8, 3, 3), fan_in=8 * 9)
    bound = np.sqrt(6.0 / 72)
    assert np.abs(draws).max() <= bound
    assert draws.std() > 0.3 * bound  # actually spread out


def test_residual_block_zero_branch_is_identity():
    block = ResidualBlock(4, 4, rng())
    for conv in block.convs:
        conv.kernel.data[:] = 0.0
    x = Tensor(np.random.default_rng(51).normal(size=(2, 4, 8, 8)))
    out = block.forward(x, mode="train")
    assert out.data.tobytes() == x.data.tobytes()


def test_residual_block_stride_two_halves_dims():
    block = ResidualBlock(4, 8, rng(), strides=(2, 1))
    out = block.forward(Tensor(np.zeros((1, 4, 12, 12))), mode="train")
    assert out.shape == (1, 8, 6, 6)
    # odd input rounds per the conv contract
    out = block.forward(Tensor(np.zeros((1, 4, 13, 13))), mode="train")
    assert out.shape == (1, 8, 7, 7)


def test_residual_block_gradients(f64):
    block = ResidualBlock(2, 3, np.random.default_rng(52), strides=(2, 1))
    x = Tensor(np.random.default_rng(53).uniform(-2, 2, (2, 2, 6, 6)),
               requires_grad=True)
    params = list(block.named_params().values())

    def build():
        return T.tsum(block.forward(x, "train", update_stats=False))

    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    for t in [x] + params:
        num = finite_diff_grad(lambda: float(build().data), t.data)
        assert max_rel_err(t.grad, num) < 1e-4
        t.zero_grad()


def test_assessor_has_no_bias_parameters():
    net = AssessorNet(rng())
    for name in net.named_params():
        assert not name.endswith(".bias"), name


def test_assessor_output_range():
    net = AssessorNet(rng())
    x = Tensor(np.random.default_rng(54).uniform(-1, 1, (4, 3, 24, 24)))
    out = net.forward(x, mode="train")
    assert out.shape == (4, 1)
    assert np.all(out.data > 0) and np.all(out.data < 1)


def test_localizer_initial_prediction_is_centered_window():
    net = LocalizerNet(rng())
    x = Tensor(np.random.default_rng(55).uniform(-1, 1, (3, 3, 48, 48)))
    theta = net.forward(x, mode="train")
    np.testing.assert_array_equal(theta.data,
                                  np.tile([0.8, 0.0, 0.8, 0.0], (3, 1)).astype(np.float32))


def test_localizer_without_coord_channels():
    net = LocalizerNet(rng(), coord_channels=False)
    assert net.stem.kernel.shape[1] == 3
    x = Tensor(np.random.default_rng(56).uniform(-1, 1, (1, 3, 48, 48)))
    assert net.forward(x, mode="train").shape == (1, 4)


def test_named_params_unique_and_ordered():
    net = LocalizerNet(rng())
    names = list(net.named_tensors())
    assert len(names) == len(set(names))
    params = net.named_params()
    assert "head.weight" in params and "head.bias" in params
    assert any("running_mean" in n for n in net.named_tensors())


def test_frozen_blocks_gradient_writes():
    net = AssessorNet(rng())
    x = Tensor(np.random.default_rng(57).uniform(-1, 1, (2, 3, 24, 24)),
               requires_grad=True)
    with frozen(net):
        with Tape() as tape:
            loss = T.tsum(net.forward(x, mode="train", update_stats=False))
        tape.backward(loss)
        # gradient flowed through the activations to the input, but no
        # parameter received a write
        assert x.grad is not None and np.abs(x.grad).sum() > 0
        assert all(p.grad is None for p in net.named_params().values())
    assert all(p.requires_grad for p in net.named_params().values())


def test_batch_norm_layer_modes():
    layer = BatchNorm2d(3)
    x = Tensor(np.random.default_rng(58).uniform(1, 3, (4, 3, 5, 5)))
    layer.forward(x, mode="train", update_stats=True)
    ref = layer.stats.mean.data.copy()
    layer.forward(x, mode="infer")
    np.testing.assert_array_equal(layer.stats.mean.data, ref)  # infer never updates


def test_conv_layer_default_padding():
    conv = Conv2d(3, 8, 3, rng())
    out = conv.forward(Tensor(np.zeros((1, 3, 10, 10))))
    assert out.shape == (1, 8, 10, 10)
    conv4 = Conv2d(3, 8, 4, rng(), stride=2)
    assert conv4.forward(Tensor(np.zeros((1, 3, 12, 12)))).shape == (1, 8, 6, 6)


def test_linear_layer_bias_optional():
    lin = Linear(4, 2, rng(), bias=False)
    assert lin.bias is None
    assert "bias" not in lin.named_params()
