"""Built-in 64-bit finite-difference spot checks, run by `train --verify-grad`.

A quick sanity pass over the differentiable operator set before a long run;
the full gradient test suite lives with the tests.
"""

import numpy as np

from . import nn
from . import tensor as T
from .stn import AffineParams, bilinear_sample, generate_grid, outside_penalty
from .tensor import Tape, Tensor


def _numeric_grad(fn, arr, eps=1e-5):
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def _check(name, build, tensors, tol=1e-4):
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        num = _numeric_grad(lambda: float(build().data), t.data)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = np.maximum(np.abs(num) + np.abs(ana), 1.0)
        worst = max(worst, float(np.max(np.abs(num - ana) / denom)))
        t.zero_grad()
    ok = worst < tol
    print(f"  {'ok ' if ok else 'FAIL'} {name}: max rel err {worst:.2e}")
    return ok


def verify_gradients(seed=0):
    """Run the spot checks in float64; returns True when all pass."""
    rng = np.random.default_rng(seed)
    results = []
    with T.use_dtype(np.float64):
        x = Tensor(rng.uniform(-2, 2, (2, 3, 6, 6)), requires_grad=True)
        k = Tensor(rng.uniform(-1, 1, (4, 3, 3, 3)), requires_grad=True)
        results.append(_check("conv2d", lambda: T.tsum(T.conv2d(x, k, 1, 1)), [x, k]))

        w = Tensor(rng.uniform(-1, 1, (3, 5)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
        h = Tensor(rng.uniform(-2, 2, (4, 5)), requires_grad=True)
        results.append(_check("fully_connected",
                              lambda: T.tsum(T.sigmoid(T.fully_connected(h, w, b))),
                              [h, w, b]))

        bn_x = Tensor(rng.uniform(-2, 2, (3, 2, 4, 4)), requires_grad=True)
        scale = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
        shift = Tensor(rng.uniform(-1, 1, 2), requires_grad=True)
        stats = T.RunningStats(2)
        results.append(_check(
            "batch_norm",
            lambda: T.tsum(T.batch_norm(bn_x, scale, shift, stats, "train", False)),
            [bn_x, scale, shift]))

        img = Tensor(rng.uniform(0, 1, (1, 2, 7, 7)), requires_grad=True)
        params = AffineParams.from_values(0.63, 0.071, 0.59, -0.083, requires_grad=True)

        def sample_loss():
            grid = generate_grid(params, 4, 4)
            return T.add(T.tsum(bilinear_sample(img, grid)), outside_penalty(grid))

        results.append(_check("bilinear_sample+grid", sample_loss,
                              [img, params.scale_x, params.shift_x,
                               params.scale_y, params.shift_y], tol=1e-3))

        block = nn.ResidualBlock(2, 3, rng=np.random.default_rng(seed + 1), strides=(2, 1))
        bx = Tensor(rng.uniform(-2, 2, (2, 2, 6, 6)), requires_grad=True)
        block_params = list(block.named_params().values())
        results.append(_check(
            "residual_block",
            lambda: T.tsum(block.forward(bx, "train", False)),
            [bx] + block_params))
    return all(results)
