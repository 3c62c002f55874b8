"""PNG codec helpers and the align-corners bilinear resizer.

All rasters are numpy uint8 arrays shaped (H, W, 3) for RGB or (H, W, 4) for
RGBA.  The resizer uses the same pixel-center convention as the sampling grid,
so resizing an image to its own size is the identity.
"""

import numpy as np
from PIL import Image

from .errors import DataError


def read_image(path, mode="RGB"):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc


def write_image(path, array):
    if array.dtype != np.uint8:
        raise DataError("images must be uint8")
    Image.fromarray(array).save(path, format="PNG")


def _axis_weights(n_out, n_in):
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.linspace(0.0, n_in - 1.0, n_out)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(image, out_h, out_w):
    """Bilinear resize of a (H, W, C) float or uint8 array; returns float64."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    ylo, yhi, fy = _axis_weights(out_h, h)
    xlo, xhi, fx = _axis_weights(out_w, w)
    top = img[ylo][:, xlo] * (1 - fx)[None, :, None] + img[ylo][:, xhi] * fx[None, :, None]
    bot = img[yhi][:, xlo] * (1 - fx)[None, :, None] + img[yhi][:, xhi] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def resize_bilinear_u8(image, out_h, out_w):
    out = resize_bilinear(image, out_h, out_w)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)
