"""Raster geometry helpers shared by the feature, attention and training
code: bilinear resizing, context crops, block pooling and box utilities.

Boxes are float arrays [x_min, y_min, x_max, y_max] with half-open
intervals in pixel coordinates.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError


def as_box(box) -> np.ndarray:
    arr = np.asarray(box, dtype=np.float64).reshape(4)
    if not np.all(np.isfinite(arr)) or arr[0] >= arr[2] or arr[1] >= arr[3]:
        raise InvalidInputError(f"degenerate box {arr.tolist()}")
    return arr


def clip_box(box: np.ndarray, height: int, width: int) -> np.ndarray:
    out = np.asarray(box, dtype=np.float64).copy()
    out[0] = min(max(out[0], 0.0), width - 1.0)
    out[1] = min(max(out[1], 0.0), height - 1.0)
    out[2] = min(max(out[2], out[0] + 1.0), float(width))
    out[3] = min(max(out[3], out[1] + 1.0), float(height))
    return out


def scale_box(box, sy: float, sx: float) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    return np.array([b[0] * sx, b[1] * sy, b[2] * sx, b[3] * sy], dtype=np.float64)


def _sample_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel-center convention, clamped to the source extent
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resize a (h, w) or (h, w, c) float array."""
    a = np.asarray(arr, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise InvalidInputError("output dimensions must be positive")
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
    h, w = a.shape[:2]
    y0, y1, fy = _sample_axis(h, out_h)
    x0, x1, fx = _sample_axis(w, out_w)
    top = a[y0][:, x0] * (1.0 - fx)[None, :, None] + a[y0][:, x1] * fx[None, :, None]
    bot = a[y1][:, x0] * (1.0 - fx)[None, :, None] + a[y1][:, x1] * fx[None, :, None]
    out = top * (1.0 - fy)[:, None, None] + bot * fy[:, None, None]
    return out[:, :, 0] if squeeze else out


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an 8-bit image, rounding back to uint8."""
    out = resize_bilinear(np.asarray(image, dtype=np.float64), out_h, out_w)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_shorter_side(
    image: np.ndarray, shorter: int, longer_cap: int
) -> tuple[np.ndarray, tuple[float, float]]:
    """Resize so the shorter side hits `shorter` without the longer side
    exceeding `longer_cap`. Returns the frame plus the realized (sy, sx)
    scale factors needed to map source boxes into the frame."""
    h, w = image.shape[:2]
    s = shorter / min(h, w)
    if max(h, w) * s > longer_cap:
        s = longer_cap / max(h, w)
    out_h = max(int(round(h * s)), 1)
    out_w = max(int(round(w * s)), 1)
    frame = resize_image(image, out_h, out_w)
    return frame, (out_h / h, out_w / w)


def crop_with_margin(
    image: np.ndarray, box, margin: float, out_size: int
) -> np.ndarray:
    """Cut a context window of `margin` times the box extent around the
    box center, clipped to the image, and resize it to a square."""
    b = as_box(box)
    h, w = image.shape[:2]
    cx = 0.5 * (b[0] + b[2])
    cy = 0.5 * (b[1] + b[3])
    half_w = max((b[2] - b[0]) * margin, 4.0) * 0.5
    half_h = max((b[3] - b[1]) * margin, 4.0) * 0.5
    x0 = int(np.floor(cx - half_w))
    x1 = int(np.ceil(cx + half_w))
    y0 = int(np.floor(cy - half_h))
    y1 = int(np.ceil(cy + half_h))
    x0 = max(x0, 0)
    y0 = max(y0, 0)
    x1 = min(max(x1, x0 + 2), w)
    y1 = min(max(y1, y0 + 2), h)
    x0 = min(x0, x1 - 2) if x1 - 2 >= 0 else 0
    y0 = min(y0, y1 - 2) if y1 - 2 >= 0 else 0
    sub = image[max(y0, 0) : y1, max(x0, 0) : x1]
    return resize_image(sub, out_size, out_size)


def block_reduce_mean(arr: np.ndarray, stride: int) -> np.ndarray:
    """Mean over stride x stride blocks; edge blocks cover the remaining
    pixels only. Output dims are ceil(h / stride) x ceil(w / stride)."""
    a = np.asarray(arr, dtype=np.float64)
    h, w = a.shape[:2]
    if stride < 1:
        raise InvalidInputError("stride must be positive")
    # integral image with a zero row/column prefix
    pad_shape = (h + 1, w + 1) + a.shape[2:]
    integral = np.zeros(pad_shape, dtype=np.float64)
    integral[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    ys = np.arange(0, h, stride)
    xs = np.arange(0, w, stride)
    ye = np.minimum(ys + stride, h)
    xe = np.minimum(xs + stride, w)
    sums = (
        integral[np.ix_(ye, xe)]
        - integral[np.ix_(ys, xe)]
        - integral[np.ix_(ye, xs)]
        + integral[np.ix_(ys, xs)]
    )
    areas = (ye - ys)[:, None] * (xe - xs)[None, :]
    if a.ndim == 3:
        areas = areas[:, :, None]
    return sums / areas


def rasterize_box(box, height: int, width: int) -> np.ndarray:
    """Boolean mask of the pixels whose integer coordinates fall inside
    the half-open box."""
    b = np.asarray(box, dtype=np.float64)
    mask = np.zeros((height, width), dtype=bool)
    x0 = max(int(np.floor(b[0])), 0)
    y0 = max(int(np.floor(b[1])), 0)
    x1 = min(int(np.ceil(b[2])), width)
    y1 = min(int(np.ceil(b[3])), height)
    if x1 > x0 and y1 > y0:
        mask[y0:y1, x0:x1] = True
    return mask
