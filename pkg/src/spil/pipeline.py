"""Shared plumbing for the training, evaluation and few-shot paths: a
per-image cache of resized frames, feature maps and segmentations, the
conditioned correlation fed to the detection head, and rank-list
construction over a corpus.

Search-side images are resized so their shorter side matches a fixed
length; boxes travel in original pixel coordinates and are mapped into
frame coordinates (and back) at the edges.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, Mapping

import numpy as np

from .coattention import SegmentationParams, segment_superpixels
from .datasets import ImageStore, QueryRecord
from .evalkit import (
    RankList,
    box_mean_feature,
    cell_normalized,
    corpus_mean_feature,
    search_rank,
)
from .imageops import clip_box, crop_with_margin, resize_shorter_side, scale_box
from .localizer import AnchorConfig, HeadParams, detect_arrays
from .tensor_core import FeatureProviderConfig, depthwise_xcorr, extract_features, mean_kernel


def worker_count() -> int:
    """Worker parallelism cap from SPIL_THREADS (default 1)."""
    raw = os.environ.get("SPIL_THREADS", "1")
    try:
        return max(int(raw), 1)
    except ValueError:
        return 1


def box_filter_map(arr: np.ndarray, window_h: int, window_w: int) -> np.ndarray:
    """Per-channel mean over a window centered at every cell, windows
    clipped at the borders (means over the valid part)."""
    a = np.asarray(arr, dtype=np.float64)
    h, w = a.shape[:2]
    wh = min(max(window_h, 1), h)
    ww = min(max(window_w, 1), w)
    pad_shape = (h + 1, w + 1) + a.shape[2:]
    integral = np.zeros(pad_shape)
    integral[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    ys = np.arange(h)
    xs = np.arange(w)
    y0 = np.clip(ys - wh // 2, 0, h)
    y1 = np.clip(ys - wh // 2 + wh, 0, h)
    x0 = np.clip(xs - ww // 2, 0, w)
    x1 = np.clip(xs - ww // 2 + ww, 0, w)
    sums = (
        integral[np.ix_(y1, x1)]
        - integral[np.ix_(y0, x1)]
        - integral[np.ix_(y1, x0)]
        + integral[np.ix_(y0, x0)]
    )
    counts = ((y1 - y0)[:, None] * (x1 - x0)[None, :]).astype(np.float64)
    if a.ndim == 3:
        counts = counts[:, :, None]
    return sums / counts


def conditioned_correlation(
    kernel: np.ndarray,
    fm: np.ndarray,
    gain: float,
    center: np.ndarray | None = None,
    pool_scales: tuple[int, ...] | None = None,
) -> np.ndarray:
    """Correlation fed to the head: depth-wise correlation of the unit
    kernel with the cell-normalized map, scaled by a fixed gain so the
    linear head trains at the configured learning rates.

    Both sides are first centered on the corpus mean feature when one is
    supplied; without centering, the all-positive raw features make every
    channel product positive and magnitude-confounded. `pool_scales` then
    box-filters the product map at one window size per scale and stacks
    the results along the channel axis: the per-cell linear head has no
    other way to see spatial context, and the contrast between a tight and
    a wide window is its only evidence of instance extent."""
    k = np.asarray(kernel, dtype=np.float64).reshape(-1)
    arr = np.asarray(fm, dtype=np.float64)
    if center is not None:
        mu = np.asarray(center, dtype=np.float64).reshape(-1)
        k = k - mu
        arr = arr - mu[None, None, :]
    k = k / max(np.linalg.norm(k), 1e-12)
    corr = depthwise_xcorr(k, cell_normalized(arr))
    if pool_scales is not None:
        corr = np.concatenate(
            [box_filter_map(corr, cells, cells) for cells in pool_scales], axis=2
        )
    return corr * gain


def anchor_pool_scales(anchor_cfg: AnchorConfig) -> tuple[int, ...]:
    """Box-filter windows in cells, forced odd so the filter is centered:
    a tight window that stays inside small instances, a window matched to
    the anchor footprint (sharpest peak at instance centers), and a wide
    one that keeps losing coverage as instances shrink. The tight/wide
    contrast encodes instance extent."""
    mean_size = float(np.mean(anchor_cfg.sizes))
    cells = mean_size / anchor_cfg.stride
    fine = max(int(round(cells / 2.0)) | 1, 1)
    matched = max(int(round(cells)) | 1, fine + 2)
    coarse = max(int(round(cells * 1.6)) | 1, matched + 2)
    return (fine, matched, coarse)


def head_channels(feature_channels: int) -> int:
    """Channel count of the conditioned correlation the head consumes."""
    return 3 * feature_channels


class FeatureBank:
    """Caches the per-image frame (shorter-side resize), its feature map
    and its superpixel segmentation. Frames and features are pure
    functions of the stored image, so cache hits never affect results."""

    def __init__(
        self,
        store: ImageStore,
        feat_cfg: FeatureProviderConfig,
        y_shorter: int = 128,
        y_long_cap: int = 256,
        seg_params: SegmentationParams | None = None,
    ):
        feat_cfg.validate()
        self.store = store
        self.feat_cfg = feat_cfg
        self.y_shorter = y_shorter
        self.y_long_cap = y_long_cap
        self.seg_params = seg_params or SegmentationParams()
        self._frames: dict[tuple[str, int], tuple[np.ndarray, tuple[float, float]]] = {}
        self._features: dict[tuple[str, int], np.ndarray] = {}
        self._segs: dict[tuple[str, int], np.ndarray] = {}
        self._crop_images: dict[tuple, np.ndarray] = {}
        self._crop_features: dict[tuple, np.ndarray] = {}
        self.center: np.ndarray | None = None

    def frame(
        self, image_id: str, shorter: int | None = None
    ) -> tuple[np.ndarray, tuple[float, float]]:
        shorter = shorter or self.y_shorter
        key = (image_id, shorter)
        if key not in self._frames:
            cap = max(self.y_long_cap, 2 * shorter)
            self._frames[key] = resize_shorter_side(self.store[image_id], shorter, cap)
        return self._frames[key]

    def original_hw(self, image_id: str) -> tuple[int, int]:
        return self.store[image_id].shape[:2]

    def features(self, image_id: str, shorter: int | None = None) -> np.ndarray:
        shorter = shorter or self.y_shorter
        key = (image_id, shorter)
        if key not in self._features:
            frame, _ = self.frame(image_id, shorter)
            self._features[key] = extract_features(
                frame, self.feat_cfg, image_id=image_id
            )
        return self._features[key]

    def segmentation(self, image_id: str, shorter: int | None = None) -> np.ndarray:
        shorter = shorter or self.y_shorter
        key = (image_id, shorter)
        if key not in self._segs:
            frame, _ = self.frame(image_id, shorter)
            self._segs[key] = segment_superpixels(frame, self.seg_params)
        return self._segs[key]

    def crop_image(self, image_id: str, box, crop_size: int, margin: float) -> np.ndarray:
        key = (
            image_id,
            np.asarray(box, dtype=np.float64).tobytes(),
            crop_size,
            margin,
        )
        if key not in self._crop_images:
            self._crop_images[key] = crop_with_margin(
                self.store[image_id], box, margin, crop_size
            )
        return self._crop_images[key]

    def crop_features(self, image_id: str, box, crop_size: int, margin: float) -> np.ndarray:
        key = (
            image_id,
            np.asarray(box, dtype=np.float64).tobytes(),
            crop_size,
            margin,
        )
        if key not in self._crop_features:
            self._crop_features[key] = extract_features(
                self.crop_image(image_id, box, crop_size, margin),
                self.feat_cfg,
                image_id=image_id,
            )
        return self._crop_features[key]

    def ensure_center(self, image_ids: Iterable[str]) -> np.ndarray:
        """Fix the corpus mean feature used to center correlations, from
        the given image set (first call wins)."""
        if self.center is None:
            ids = list(image_ids)
            self.warm_features(ids)
            self.center = corpus_mean_feature({i: self.features(i) for i in ids})
        return self.center

    def warm_features(self, image_ids: Iterable[str]) -> None:
        ids = [i for i in image_ids if (i, self.y_shorter) not in self._features]
        workers = worker_count()
        if workers > 1 and len(ids) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for image_id, fm in zip(ids, pool.map(self._compute_features, ids)):
                    self._features[(image_id, self.y_shorter)] = fm
        else:
            for image_id in ids:
                self.features(image_id)

    def _compute_features(self, image_id: str) -> np.ndarray:
        frame, _ = self.frame(image_id)
        return extract_features(frame, self.feat_cfg, image_id=image_id)


def detect_in_frame(
    bank: FeatureBank,
    image_id: str,
    kernel: np.ndarray,
    params: HeadParams,
    anchor_cfg: AnchorConfig,
    gain: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Head detections for one image, with boxes mapped back to original
    pixel coordinates."""
    fm = bank.features(image_id)
    frame, (sy, sx) = bank.frame(image_id)
    corr = conditioned_correlation(
        kernel, fm, gain, center=bank.center, pool_scales=anchor_pool_scales(anchor_cfg)
    )
    probs, boxes = detect_arrays(corr, params, anchor_cfg, image_hw=frame.shape[:2])
    boxes = boxes / np.array([sx, sy, sx, sy])[None, :]
    h, w = bank.original_hw(image_id)
    out = np.stack([clip_box(b, h, w) for b in boxes]) if len(boxes) else boxes
    return probs, out


def build_ranklists(
    bank: FeatureBank,
    queries: list[QueryRecord],
    corpus_ids: list[str],
    m: int,
) -> list[RankList]:
    """Correlation-peak rank lists for each query over the corpus, with
    entry boxes returned in original image coordinates. The ranking kernel
    pools the query's own frame cells inside its box."""
    bank.warm_features(corpus_ids)
    corpus: Mapping[str, np.ndarray] = {i: bank.features(i) for i in corpus_ids}
    stride = bank.feat_cfg.stride
    mu = bank.ensure_center(corpus_ids)
    lists = []
    for q in queries:
        _, (sy, sx) = bank.frame(q.image_id)
        frame_box = scale_box(q.box, sy, sx)
        kernel = box_mean_feature(bank.features(q.image_id), frame_box, stride)
        rl = search_rank(q.query_id, kernel, frame_box, corpus, m, stride, corpus_mean=mu)
        for entry in rl.entries:
            _, (ey, ex) = bank.frame(entry.image_id)
            h, w = bank.original_hw(entry.image_id)
            entry.box = clip_box(scale_box(entry.box, 1.0 / ey, 1.0 / ex), h, w)
        lists.append(rl)
    return lists
