"""Differentiable crop attention: constrained affine transform, sampling grid,
bilinear sampler, box extraction, and the two grid regularizers.

Coordinate conventions used throughout:
  * Normalized image coordinates put (-1, -1) on the center of the top-left
    input pixel and (+1, +1) on the center of the bottom-right one.
  * The output lattice is the regular grid over [-1, 1]^2 with steps
    2/(W_o - 1) and 2/(H_o - 1).
  * Normalized -> pixel mapping: u_px = (u + 1) / 2 * (W - 1).

The transform is axis-aligned (crop, translate, scale only): a grid column
shares one u coordinate and a grid row shares one v coordinate, so grids are
stored as a vector of u values per column and v values per row.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor, _record


@dataclass
class AffineParams:
    """Batched crop transform: u = scale_x * x + shift_x, v = scale_y * y + shift_y.

    Rotation entries of the underlying 2x3 matrix are zero by construction.
    Each field is an (N, 1) tensor on the tape.
    """

    scale_x: Tensor
    shift_x: Tensor
    scale_y: Tensor
    shift_y: Tensor

    @classmethod
    def from_head(cls, head_out):
        """Split a (N, 4) head output into the four transform parameters."""
        if head_out.ndim != 2 or head_out.shape[1] != 4:
            raise DimensionError(f"expected (N, 4) head output, got {head_out.shape}")
        return cls(*(T.narrow(head_out, 1, i, 1) for i in range(4)))

    @classmethod
    def from_values(cls, scale_x, shift_x, scale_y, shift_y, requires_grad=False):
        def col(v):
            arr = np.atleast_1d(np.asarray(v, dtype=T.get_default_dtype()))
            return Tensor(arr.reshape(-1, 1), requires_grad=requires_grad)

        return cls(col(scale_x), col(shift_x), col(scale_y), col(shift_y))

    @property
    def batch(self):
        return self.scale_x.shape[0]

    def matrices(self):
        """The 2x3 transform matrices as an (N, 2, 3) array (rotation zeros included)."""
        n = self.batch
        m = np.zeros((n, 2, 3), dtype=self.scale_x.dtype)
        m[:, 0, 0] = self.scale_x.data[:, 0]
        m[:, 0, 2] = self.shift_x.data[:, 0]
        m[:, 1, 1] = self.scale_y.data[:, 0]
        m[:, 1, 2] = self.shift_y.data[:, 0]
        return m


@dataclass
class SamplingGrid:
    """Sampling coordinates for an H_o x W_o output: u per column, v per row."""

    us: Tensor  # (N, W_o)
    vs: Tensor  # (N, H_o)

    @property
    def batch(self):
        return self.us.shape[0]

    @property
    def width(self):
        return self.us.shape[1]

    @property
    def height(self):
        return self.vs.shape[1]

    def coords(self):
        """Materialize the full (N, H_o, W_o, 2) array of (u, v) pairs."""
        n, wo, ho = self.batch, self.width, self.height
        out = np.empty((n, ho, wo, 2), dtype=self.us.dtype)
        out[..., 0] = self.us.data[:, None, :]
        out[..., 1] = self.vs.data[:, :, None]
        return out


def lattice(n, dtype):
    """Regular 1-d lattice over [-1, 1] with exact endpoints."""
    return np.linspace(-1.0, 1.0, n, dtype=dtype)


def generate_grid(params: AffineParams, out_h: int, out_w: int) -> SamplingGrid:
    """Map the regular output lattice through the transform (differentiably)."""
    if out_h < 2 or out_w < 2:
        raise DimensionError("grid size must be at least 2x2")
    dtype = params.scale_x.dtype
    lat_x = Tensor(lattice(out_w, dtype)[None, :], dtype=dtype)
    lat_y = Tensor(lattice(out_h, dtype)[None, :], dtype=dtype)
    us = T.add(T.mul(params.scale_x, lat_x), params.shift_x)
    vs = T.add(T.mul(params.scale_y, lat_y), params.shift_y)
    return SamplingGrid(us, vs)


def _snap_tolerance(dtype):
    # Kills float roundoff from the normalized-coordinate round trip so that
    # sampling at what is mathematically a pixel center hits it exactly.
    return 1e-4 if dtype == np.float32 else 1e-6


def _to_pixels(coords, extent):
    px = (coords + 1.0) * 0.5 * (extent - 1.0)
    nearest = np.rint(px)
    return np.where(np.abs(px - nearest) < _snap_tolerance(px.dtype), nearest, px)


def bilinear_sample(image, grid: SamplingGrid):
    """Sample image (N,C,H,W) at grid coordinates -> (N,C,H_o,W_o).

    Each output pixel is the bilinear blend of its four source neighbors;
    coordinates outside the image contribute zero.  Gradients flow to both
    the image values and the grid coordinates.
    """
    if image.ndim != 4:
        raise DimensionError("bilinear_sample expects a 4-d image tensor")
    if grid.us.shape[0] != image.shape[0]:
        raise DimensionError("grid batch does not match image batch")
    if not (np.isfinite(grid.us.data).all() and np.isfinite(grid.vs.data).all()):
        raise ContractError("non-finite sampling grid")
    us, vs = grid.us, grid.vs
    n, c, h, w = image.shape
    wo, ho = grid.width, grid.height

    px = _to_pixels(us.data, w)  # (N, Wo)
    py = _to_pixels(vs.data, h)  # (N, Ho)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = (px - x0).astype(image.dtype)
    fy = (py - y0).astype(image.dtype)
    x1 = x0 + 1
    y1 = y0 + 1

    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]

    def gather(ys, xs):
        valid = ((ys >= 0) & (ys < h))[:, None, :, None] & ((xs >= 0) & (xs < w))[:, None, None, :]
        yc = np.clip(ys, 0, h - 1)[:, None, :, None]
        xc = np.clip(xs, 0, w - 1)[:, None, None, :]
        return image.data[ni, ci, yc, xc] * valid

    v00 = gather(y0, x0)
    v01 = gather(y0, x1)
    v10 = gather(y1, x0)
    v11 = gather(y1, x1)

    wx0 = (1.0 - fx)[:, None, None, :]
    wx1 = fx[:, None, None, :]
    wy0 = (1.0 - fy)[:, None, :, None]
    wy1 = fy[:, None, :, None]

    out = Tensor(v00 * wy0 * wx0 + v01 * wy0 * wx1 + v10 * wy1 * wx0 + v11 * wy1 * wx1,
                 dtype=image.dtype)

    def bwd(g):
        gi = None
        if image.requires_grad:
            gi = np.zeros_like(image.data)
            yc0 = np.clip(y0, 0, h - 1)[:, None, :, None]
            yc1 = np.clip(y1, 0, h - 1)[:, None, :, None]
            xc0 = np.clip(x0, 0, w - 1)[:, None, None, :]
            xc1 = np.clip(x1, 0, w - 1)[:, None, None, :]
            my0 = ((y0 >= 0) & (y0 < h))[:, None, :, None]
            my1 = ((y1 >= 0) & (y1 < h))[:, None, :, None]
            mx0 = ((x0 >= 0) & (x0 < w))[:, None, None, :]
            mx1 = ((x1 >= 0) & (x1 < w))[:, None, None, :]
            nb = np.broadcast_to(ni, g.shape)
            cb = np.broadcast_to(ci, g.shape)
            for yc, my, wy in ((yc0, my0, wy0), (yc1, my1, wy1)):
                for xc, mx, wx in ((xc0, mx0, wx0), (xc1, mx1, wx1)):
                    contrib = g * wy * wx * (my & mx)
                    np.add.at(gi, (nb, cb,
                                   np.broadcast_to(yc, g.shape),
                                   np.broadcast_to(xc, g.shape)), contrib)
        gu = gv = None
        if us.requires_grad:
            ddx = wy0 * (v01 - v00) + wy1 * (v11 - v10)
            gu = (g * ddx).sum(axis=(1, 2)) * (0.5 * (w - 1))
        if vs.requires_grad:
            ddy = wx0 * (v10 - v00) + wx1 * (v11 - v01)
            gv = (g * ddy).sum(axis=(1, 3)) * (0.5 * (h - 1))
        return gi, gu, gv

    return _record(out, (image, us, vs), bwd)


def grid_to_bbox(grid: SamplingGrid, image_w: int, image_h: int):
    """Pixel-space bounding boxes of the sampled regions, clipped to the image.

    Returns one BBox per batch entry; a grid entirely outside the image clips
    to a zero-area box at the border.
    """
    from .boxes import BBox

    us = grid.us.data
    vs = grid.vs.data
    x_lo = (us.min(axis=1) + 1.0) * 0.5 * (image_w - 1)
    x_hi = (us.max(axis=1) + 1.0) * 0.5 * (image_w - 1)
    y_lo = (vs.min(axis=1) + 1.0) * 0.5 * (image_h - 1)
    y_hi = (vs.max(axis=1) + 1.0) * 0.5 * (image_h - 1)
    boxes = []
    for i in range(grid.batch):
        boxes.append(BBox(
            float(np.clip(x_lo[i], 0, image_w - 1)),
            float(np.clip(y_lo[i], 0, image_h - 1)),
            float(np.clip(x_hi[i], 0, image_w - 1)),
            float(np.clip(y_hi[i], 0, image_h - 1)),
        ))
    return boxes


def direction_penalty(params: AffineParams):
    """Hinge on negative scales; zero iff neither axis of the grid is mirrored.

    Batch entries are averaged.
    """
    return T.add(T.tmean(T.relu(T.neg(params.scale_x))),
                 T.tmean(T.relu(T.neg(params.scale_y))))


def outside_penalty(grid: SamplingGrid):
    """Mean over grid points of max(0,|u|-1) + max(0,|v|-1).

    Zero iff every sampling coordinate lies inside the image; batch entries
    are averaged.  Differentiable with respect to the transform parameters.
    """
    def hinge(t):
        return T.add(T.relu(t - 1.0), T.relu(T.neg(t) - 1.0))

    return T.add(T.tmean(hinge(grid.us)), T.tmean(hinge(grid.vs)))
