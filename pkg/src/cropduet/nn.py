"""Layers and the two small convolutional networks built on the tape engine.

Parameters are He-style fan-in scaled uniform draws from an explicit rng, so
network construction is a pure function of the seed.  Convolutions carry no
bias (a batch-norm follows each one); the judge network is additionally
bias-free in its output layer, while the crop-predicting head keeps a bias so
it can start from a large centered window.
"""

import contextlib

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import RunningStats, Tensor


class Module:
    """Tracks parameter and state tensors by attribute name."""

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self.__dict__.setdefault("_tensors", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self.__dict__.setdefault("_children", {})[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_tensors(self, prefix=""):
        """All parameter and state tensors with dotted names, in definition order."""
        out = {}
        for name, t in self.__dict__.get("_tensors", {}).items():
            out[prefix + name] = t
        for name, child in self.__dict__.get("_children", {}).items():
            out.update(child.named_tensors(prefix + name + "."))
        return out

    def named_params(self, prefix=""):
        return {k: v for k, v in self.named_tensors(prefix).items() if v.requires_grad}

    def zero_grad(self):
        for t in self.named_params().values():
            t.zero_grad()


@contextlib.contextmanager
def frozen(module):
    """Disable gradient writes to a module's parameters for the duration."""
    params = module.named_params()
    for t in params.values():
        t.requires_grad = False
    try:
        yield
    finally:
        for t in params.values():
            t.requires_grad = True


def he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(T.get_default_dtype())


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, ksize, rng, stride=1, padding=None, bias=False):
        self.stride = stride
        self.padding = (ksize - 1) // 2 if padding is None else padding
        self.kernel = Tensor(
            he_uniform(rng, (out_ch, in_ch, ksize, ksize), in_ch * ksize * ksize),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def forward(self, x):
        y = T.conv2d(x, self.kernel, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            y = T.add(y, T.reshape(self.bias, (1, -1, 1, 1)))
        return y


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.9, eps=1e-5):
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        self.stats = RunningStats(channels, momentum=momentum, eps=eps)
        # expose running stats for serialization
        self.running_mean = self.stats.mean
        self.running_var = self.stats.var

    def forward(self, x, mode="train", update_stats=True):
        return T.batch_norm(x, self.scale, self.shift, self.stats,
                            mode=mode, update_running=update_stats)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        self.weight = Tensor(he_uniform(rng, (out_features, in_features), in_features),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x):
        return T.fully_connected(x, self.weight, self.bias)


class ResidualBlock(Module):
    """conv -> bn -> relu chain plus a shortcut, summed without a trailing relu.

    A zeroed convolution branch therefore leaves the input untouched when the
    shortcut is the identity.  The shortcut becomes a strided 1x1 projection
    whenever channels or resolution change.
    """

    def __init__(self, in_ch, out_ch, rng, kernels=(3, 3), strides=(1, 1)):
        convs = []
        norms = []
        ch = in_ch
        for k, s in zip(kernels, strides):
            convs.append(Conv2d(ch, out_ch, k, rng, stride=s))
            norms.append(BatchNorm2d(out_ch))
            ch = out_ch
        self.convs = convs
        self.norms = norms
        total_stride = int(np.prod(strides))
        if total_stride > 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, rng, stride=total_stride, padding=0)
            self.proj_norm = BatchNorm2d(out_ch)
        else:
            self.proj = None

    def forward(self, x, mode="train", update_stats=True):
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = T.relu(norm.forward(conv.forward(h), mode, update_stats))
        if self.proj is not None:
            shortcut = self.proj_norm.forward(self.proj.forward(x), mode, update_stats)
        else:
            shortcut = x
        return T.add(h, shortcut)


class LocalizerNet(Module):
    """Backbone + 4-output head predicting the crop transform.

    Head weights start at zero with bias (0.8, 0, 0.8, 0): before any training
    the predicted crop is a centered window covering 80% of the image span.
    Two fixed coordinate ramp channels are appended to the input by default;
    global average pooling would otherwise leave the from-scratch backbone
    with almost no way to express object position.
    """

    HEAD_INIT = (0.8, 0.0, 0.8, 0.0)

    def __init__(self, rng, stem_channels=16, block_channels=(16, 32), block_strides=(1, 2),
                 coord_channels=True):
        if len(block_channels) != len(block_strides):
            raise DimensionError("block_channels and block_strides lengths differ")
        self.coord_channels = coord_channels
        self.stem = Conv2d(3 + (2 if coord_channels else 0), stem_channels, 3, rng)
        self.stem_norm = BatchNorm2d(stem_channels)
        blocks = []
        ch = stem_channels
        for out_ch, stride in zip(block_channels, block_strides):
            blocks.append(ResidualBlock(ch, out_ch, rng, strides=(stride, 1)))
            ch = out_ch
        self.blocks = blocks
        self.head = Linear(ch, 4, rng, bias=True)
        self.head.weight.data[:] = 0.0
        self.head.bias.data[:] = np.asarray(self.HEAD_INIT, dtype=self.head.bias.dtype)

    def forward(self, x, mode="train", update_stats=True):
        h = x
        if self.coord_channels:
            n, _, height, width = x.shape
            ramp_x = np.linspace(-1.0, 1.0, width, dtype=x.dtype)
            ramp_y = np.linspace(-1.0, 1.0, height, dtype=x.dtype)
            coords = np.empty((n, 2, height, width), dtype=x.dtype)
            coords[:, 0] = ramp_x[None, None, :]
            coords[:, 1] = ramp_y[None, :, None]
            h = T.concat_channels(x, Tensor(coords, dtype=x.dtype))
        h = T.relu(self.stem_norm.forward(self.stem.forward(h), mode, update_stats))
        h = T.max_pool(h, 3, 2)
        for block in self.blocks:
            h = block.forward(h, mode, update_stats)
        h = T.global_avg_pool(h)
        return self.head.forward(h)


class AssessorNet(Module):
    """Overlap-scoring network: residual blocks, global pooling, sigmoid head.

    Every convolution and the output layer are bias-free; downsampling blocks
    use a stride-2 4x4 second convolution, resolution-preserving blocks use
    two 3x3 convolutions.
    """

    def __init__(self, rng, block_channels=(32, 32, 32, 32), block_strides=(2, 2, 1, 1)):
        if len(block_channels) != len(block_strides):
            raise DimensionError("block_channels and block_strides lengths differ")
        blocks = []
        ch = 3
        for out_ch, stride in zip(block_channels, block_strides):
            kernels = (3, 4) if stride > 1 else (3, 3)
            blocks.append(ResidualBlock(ch, out_ch, rng, kernels=kernels, strides=(1, stride)))
            ch = out_ch
        self.blocks = blocks
        self.head = Linear(ch, 1, rng, bias=False)

    def forward(self, x, mode="train", update_stats=True):
        h = x
        for block in self.blocks:
            h = block.forward(h, mode, update_stats)
        h = T.global_avg_pool(h)
        return T.sigmoid(self.head.forward(h))
