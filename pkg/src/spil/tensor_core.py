"""Dense feature machinery: the pluggable feature providers standing in
for a pretrained backbone, spatial pooling, mean-kernel construction and
depth-wise cross-correlation.

Feature maps are float64 arrays of shape (h, w, c); kernels are float64
vectors of shape (c,); images are uint8 arrays of shape (h, w, 3).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .fileio import load_feature_map
from .imageops import block_reduce_mean

PATCH_STAT_CHANNELS = 11  # mean R, G, B plus 8 gradient-orientation bins
HIST_GAIN = 6.0  # puts histogram norms on the scale of the color means
_ORIENT_BINS = 8
_CONV_WIDTHS = (8, 16)
_CONV_SIGMA = 0.1
_MODES = ("seeded-conv", "patch-stats", "file")


@dataclass(frozen=True)
class FeatureProviderConfig:
    """Backbone stand-in settings. `feature_dir` is only used by the
    "file" mode, which loads precomputed maps named `<image_id>.fmap`."""

    mode: str = "patch-stats"
    seed: int = 0
    stride: int = 4
    out_channels: int = PATCH_STAT_CHANNELS
    feature_dir: str | None = None

    def validate(self) -> None:
        if self.mode not in _MODES:
            raise InvalidInputError(f"unknown feature mode {self.mode!r}")
        if self.stride not in (2, 4, 8):
            raise InvalidInputError(f"stride must be 2, 4 or 8, got {self.stride}")
        if self.out_channels < 4:
            raise InvalidInputError("out_channels must be at least 4")
        if self.mode == "patch-stats" and self.out_channels != PATCH_STAT_CHANNELS:
            raise InvalidInputError(
                f"patch-stats mode produces {PATCH_STAT_CHANNELS} channels, "
                f"configured {self.out_channels}"
            )
        if self.mode == "file" and not self.feature_dir:
            raise InvalidInputError("file mode requires feature_dir")


def validate_image(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError(f"expected (h, w, 3) image, got shape {arr.shape}")
    if arr.shape[0] < 8 or arr.shape[1] < 8:
        raise InvalidInputError(f"image must be at least 8x8, got {arr.shape[:2]}")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255):
            raise InvalidInputError("pixel values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def validate_feature_map(fm: np.ndarray) -> np.ndarray:
    arr = np.asarray(fm, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise InvalidInputError(f"expected (h, w, c) feature map, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("feature map contains non-finite values")
    return arr


def extract_features(
    image: np.ndarray,
    cfg: FeatureProviderConfig,
    image_id: str | None = None,
) -> np.ndarray:
    """Dense features for an image on a grid of `cfg.stride`-sized cells.

    Output shape is (ceil(h / stride), ceil(w / stride), out_channels) and
    is a pure function of (image, cfg): repeated calls are bit-identical.
    """
    cfg.validate()
    if cfg.mode == "file":
        if image_id is None:
            raise InvalidInputError("file mode needs an image_id to locate the map")
        fm = load_feature_map(os.path.join(cfg.feature_dir, f"{image_id}.fmap"))
        if fm.shape[2] != cfg.out_channels:
            raise InvalidInputError(
                f"{image_id}: file supplies {fm.shape[2]} channels, "
                f"configured {cfg.out_channels}"
            )
        return fm
    arr = validate_image(image)
    if arr.shape[0] < cfg.stride or arr.shape[1] < cfg.stride:
        raise InvalidInputError(
            f"image {arr.shape[:2]} smaller than stride {cfg.stride}"
        )
    if cfg.mode == "patch-stats":
        return _patch_stats(arr, cfg.stride)
    return _seeded_conv(arr, cfg)


def _patch_stats(image: np.ndarray, stride: int) -> np.ndarray:
    img = image.astype(np.float64) / 255.0
    means = block_reduce_mean(img, stride)
    # per-pixel gradient of the strongest channel, so color boundaries
    # register even when luminance stays flat
    gy, gx = np.gradient(img, axis=(0, 1))
    mags = np.hypot(gx, gy)
    pick = np.argmax(mags, axis=2)
    rows, cols = np.indices(pick.shape)
    gx = gx[rows, cols, pick]
    gy = gy[rows, cols, pick]
    mag = mags[rows, cols, pick]
    ang = np.arctan2(gy, gx)  # [-pi, pi]
    bins = np.floor((ang + np.pi) / (2.0 * np.pi / _ORIENT_BINS)).astype(np.int64)
    bins = np.clip(bins, 0, _ORIENT_BINS - 1)
    hist_planes = np.zeros(pick.shape + (_ORIENT_BINS,), dtype=np.float64)
    hist_planes[rows, cols, bins] = mag
    hists = block_reduce_mean(hist_planes, stride) * HIST_GAIN
    return np.concatenate([means, hists], axis=2)


def _conv_strides(total: int) -> tuple[int, int, int]:
    return {8: (2, 2, 2), 4: (2, 2, 1), 2: (2, 1, 1)}[total]


def _conv2d_same(x: np.ndarray, weights: np.ndarray, stride: int) -> np.ndarray:
    # SAME-with-ceil padding: out = ceil(in / stride)
    h, w, _ = x.shape
    out_h = -(-h // stride)
    out_w = -(-w // stride)
    pad_h = max((out_h - 1) * stride + 3 - h, 0)
    pad_w = max((out_w - 1) * stride + 3 - w, 0)
    x = np.pad(
        x,
        ((pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2), (0, 0)),
    )
    windows = np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(0, 1))
    windows = windows[::stride, ::stride]  # (out_h, out_w, c_in, 3, 3)
    return np.einsum("ijckl,klco->ijo", windows, weights, optimize=True)


def _seeded_conv(image: np.ndarray, cfg: FeatureProviderConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    widths = (*_CONV_WIDTHS, cfg.out_channels)
    strides = _conv_strides(cfg.stride)
    x = image.astype(np.float64) / 255.0
    c_in = 3
    for width, stride in zip(widths, strides):
        weights = rng.normal(0.0, _CONV_SIGMA, size=(3, 3, c_in, width))
        x = np.maximum(_conv2d_same(x, weights, stride), 0.0)
        c_in = width
    return x


def avg_pool_spatial(fm: np.ndarray) -> np.ndarray:
    """Spatial-wise average pool: per-channel mean over all grid cells."""
    arr = validate_feature_map(fm)
    return arr.mean(axis=(0, 1))


def mean_kernel(crops: list[np.ndarray]) -> np.ndarray:
    """Element-wise mean of the spatially pooled crop features; the
    template kernel slid over the search-side feature map."""
    if not crops:
        raise InvalidInputError("mean_kernel needs at least one crop")
    pooled = [avg_pool_spatial(c) for c in crops]
    channels = pooled[0].shape[0]
    for i, p in enumerate(pooled[1:], start=1):
        if p.shape[0] != channels:
            raise InvalidInputError(
                f"crop {i} has {p.shape[0]} channels, expected {channels}"
            )
    return np.mean(pooled, axis=0)


def depthwise_xcorr(kernel: np.ndarray, fm: np.ndarray) -> np.ndarray:
    """Depth-wise cross-correlation of a 1x1 spatial kernel with a feature
    map, i.e. per-channel scaling: out[i, j, ch] = kernel[ch] * fm[i, j, ch].
    """
    k = np.asarray(kernel, dtype=np.float64).reshape(-1)
    arr = validate_feature_map(fm)
    if k.shape[0] != arr.shape[2]:
        raise InvalidInputError(
            f"kernel has {k.shape[0]} channels, map has {arr.shape[2]}"
        )
    if not np.all(np.isfinite(k)):
        raise InvalidInputError("kernel contains non-finite values")
    return arr * k[None, None, :]
