"""Minimal reverse-mode automatic differentiation on numpy arrays.

Operations executed while a Tape is active are recorded in order; Tape.backward
replays them strictly in reverse and accumulates gradients into every tensor
that requires them.  Training runs in float32; gradient verification switches
the whole engine to float64 via `use_dtype(np.float64)` because central finite
differences are unreliable in single precision.
"""

import contextlib
import threading

import numpy as np

from .errors import ContractError, DegenerateBatchError, DimensionError

_state = threading.local()


def _tls():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.dtype = np.float32
    return _state


def get_default_dtype():
    return _tls().dtype


def set_default_dtype(dtype):
    if dtype not in (np.float32, np.float64):
        raise ContractError("default dtype must be float32 or float64")
    _tls().dtype = dtype


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    tls = _tls()
    prev = tls.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        tls.dtype = prev


class Tensor:
    """An n-dimensional array plus a lazily allocated gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g):
        if not self.requires_grad:
            raise ContractError("gradient write to a tensor with requires_grad=False")
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars are promoted to constant tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)


def _as_tensor(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False, dtype=dtype)


class Tape:
    """Ordered record of operations; backward walks it in reverse."""

    def __init__(self):
        self._ops = []
        self._output_ids = set()

    def __enter__(self):
        _tls().tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tls().tapes.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._ops)

    def _record(self, out, inputs, backward_fn):
        self._ops.append((out, inputs, backward_fn))
        self._output_ids.add(id(out))

    def backward(self, loss):
        """Accumulate d(loss)/d(t) into t.grad for every recorded tensor t.

        Seeds d(loss)/d(loss) = 1.  Gradients add across multiple uses of a
        tensor, and across repeated backward calls on the same tape.
        """
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ContractError("backward requires a scalar loss tensor")
        if id(loss) not in self._output_ids:
            raise ContractError("loss was not recorded on this tape")

        flows = {id(loss): np.ones_like(loss.data)}
        holders = {id(loss): loss}
        for out, inputs, backward_fn in reversed(self._ops):
            g = flows.pop(id(out), None)
            if g is None:
                continue
            holders.pop(id(out))
            if out.requires_grad:
                out._accumulate(g)
            for inp, ig in zip(inputs, backward_fn(g)):
                if ig is None:
                    continue
                key = id(inp)
                if key in flows:
                    flows[key] = flows[key] + ig
                else:
                    flows[key] = ig
                    holders[key] = inp
        for key, g in flows.items():
            t = holders[key]
            if t.requires_grad:
                t._accumulate(g)


def backward(loss, tape):
    tape.backward(loss)


def _active_tape():
    tapes = _tls().tapes
    return tapes[-1] if tapes else None


def _record(out, inputs, backward_fn):
    tape = _active_tape()
    if tape is None:
        return out
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    # Sum out axes that numpy broadcasting expanded.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and reduction operations
# ---------------------------------------------------------------------------

def add(a, b):
    out = Tensor(a.data + b.data, dtype=a.dtype)

    def bwd(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bwd)


def sub(a, b):
    out = Tensor(a.data - b.data, dtype=a.dtype)

    def bwd(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bwd)


def mul(a, b):
    out = Tensor(a.data * b.data, dtype=a.dtype)

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bwd)


def neg(x):
    out = Tensor(-x.data, dtype=x.dtype)

    def bwd(g):
        return (-g,)

    return _record(out, (x,), bwd)


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape), dtype=x.dtype)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), bwd)


def narrow(x, axis, start, length):
    """Contiguous slice along one axis."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(x.data[index].copy(), dtype=x.dtype)

    def bwd(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _record(out, (x,), bwd)


def concat_channels(a, b):
    """Concatenate two (N,C,H,W) tensors along the channel axis."""
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat_channels shapes {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1), dtype=a.dtype)

    def bwd(g):
        ga = g[:, :ca] if a.requires_grad else None
        gb = g[:, ca:] if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bwd)


def tsum(x):
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype), dtype=x.dtype)

    def bwd(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _record(out, (x,), bwd)


def tmean(x):
    n = x.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype), dtype=x.dtype)

    def bwd(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=True),)

    return _record(out, (x,), bwd)


def relu(x):
    """max(0, x); the gradient at exactly 0 is 0."""
    out = Tensor(np.maximum(x.data, 0), dtype=x.dtype)
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _record(out, (x,), bwd)


def sigmoid(x):
    """Logistic sigmoid, overflow-safe for |x| up to at least 1e3.

    The output is clamped into the open interval (0, 1): saturation would
    otherwise underflow to exactly 0.0 / round to 1.0 for large |x|.
    """
    e = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    tiny = np.finfo(x.dtype).tiny
    y = np.clip(y, tiny, 1.0 - np.finfo(x.dtype).epsneg).astype(x.dtype)
    out = Tensor(y, dtype=x.dtype)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _record(out, (x,), bwd)


def mse_loss(pred, target):
    """Mean squared error over all elements; returns a scalar tensor."""
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    n = pred.size
    if n == 0:
        raise DegenerateBatchError("mse_loss on an empty batch")
    diff = pred.data - target.data
    out = Tensor(np.asarray((diff * diff).mean(), dtype=pred.dtype), dtype=pred.dtype)

    def bwd(g):
        base = (2.0 / n) * diff * g
        gp = base if pred.requires_grad else None
        gt = -base if target.requires_grad else None
        return gp, gt

    return _record(out, (pred, target), bwd)


# ---------------------------------------------------------------------------
# Neural-network operators
# ---------------------------------------------------------------------------

def _pool_windows(data, kh, kw, stride):
    # (N, C, Hp, Wp) -> (N, C, Ho, Wo, kh, kw) strided view, no copy
    win = np.lib.stride_tricks.sliding_window_view(data, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, kernel, stride=1, padding=0):
    """2D cross-correlation: x (N,C,H,W) with kernel (K,C,kh,kw).

    Output spatial size follows floor((H + 2*padding - kh) / stride) + 1.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    k, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"kernel expects {ck} input channels, got {c}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError("kernel larger than padded input")
    if stride < 1:
        raise DimensionError("stride must be >= 1")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = _pool_windows(xp, kh, kw, stride)
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(k, c * kh * kw)
    out_mat = cols @ kmat.T
    out = Tensor(out_mat.reshape(n, ho, wo, k).transpose(0, 3, 1, 2), dtype=x.dtype)

    def bwd(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, k)
        gk = None
        if kernel.requires_grad:
            gk = (g_mat.T @ cols).reshape(k, c, kh, kw)
        gx = None
        if x.requires_grad:
            gcols = (g_mat @ kmat).reshape(n, ho, wo, c, kh, kw)
            gcols = np.ascontiguousarray(gcols.transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return _record(out, (x, kernel), bwd)


def max_pool(x, size, stride):
    """Max pooling; gradient routes to the first (row-major) max per window."""
    if x.ndim != 4:
        raise DimensionError("max_pool expects a 4-d input")
    n, c, h, w = x.shape
    if size > h or size > w:
        raise DimensionError("pool window larger than input")
    win = _pool_windows(x.data, size, size, stride)
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, size * size)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = Tensor(out_data, dtype=x.dtype)

    def bwd(g):
        ni, ci, hi, wi = np.ogrid[:n, :c, :ho, :wo]
        rows = hi * stride + arg // size
        cols = wi * stride + arg % size
        gx = np.zeros_like(x.data)
        np.add.at(gx, (ni, ci, rows, cols), g)
        return (gx,)

    return _record(out, (x,), bwd)


def global_avg_pool(x):
    """Spatial mean per channel: (N,C,H,W) -> (N,C)."""
    if x.ndim != 4:
        raise DimensionError("global_avg_pool expects a 4-d input")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)), dtype=x.dtype)

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype, copy=True),)

    return _record(out, (x,), bwd)


def fully_connected(x, weight, bias=None):
    """Affine map: x (N,D) @ weight (M,D)^T + bias (M)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"fully_connected shapes {x.shape} x {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError("bias shape does not match output features")
    out_data = x.data @ weight.data.T
    if bias is not None:
        out_data = out_data + bias.data
    out = Tensor(out_data, dtype=x.dtype)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _record(out, inputs, bwd)


class RunningStats:
    """Exponential-moving batch statistics for batch normalization."""

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=None):
        dtype = dtype or get_default_dtype()
        self.mean = Tensor(np.zeros(channels, dtype=dtype), dtype=dtype)
        self.var = Tensor(np.ones(channels, dtype=dtype), dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def update(self, batch_mean, batch_var):
        m = self.momentum
        self.mean.data = m * self.mean.data + (1.0 - m) * batch_mean
        self.var.data = m * self.var.data + (1.0 - m) * batch_var


def batch_norm(x, scale, shift, state, mode="train", update_running=True):
    """Per-channel normalization of a (N,C,H,W) tensor.

    Train mode normalizes with batch statistics (and updates the running
    statistics unless update_running is False); infer mode uses the stored
    running statistics.  The backward pass implements the full batch-statistic
    gradient.
    """
    if x.ndim != 4:
        raise DimensionError("batch_norm expects a 4-d input")
    if mode not in ("train", "infer"):
        raise ContractError(f"unknown batch_norm mode {mode!r}")
    n, c, h, w = x.shape
    eps = state.eps
    axes = (0, 2, 3)

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise DegenerateBatchError("batch_norm train mode needs N*H*W >= 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_running:
            state.update(mean, var)
    else:
        m = None
        mean = state.mean.data
        var = state.var.data

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[:, None, None]) * inv_std[:, None, None]
    out = Tensor(xhat * scale.data[:, None, None] + shift.data[:, None, None], dtype=x.dtype)

    def bwd(g):
        gscale = (g * xhat).sum(axis=axes) if scale.requires_grad else None
        gshift = g.sum(axis=axes) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * scale.data[:, None, None]
            if mode == "train":
                mean_gh = gh.mean(axis=axes)
                mean_gh_xhat = (gh * xhat).mean(axis=axes)
                gx = inv_std[:, None, None] * (
                    gh - mean_gh[:, None, None] - xhat * mean_gh_xhat[:, None, None]
                )
            else:
                gx = gh * inv_std[:, None, None]
        return gx, gscale, gshift

    return _record(out, (x, scale, shift), bwd)
