"""Pseudo ground-truth masks from co-attention: project feature maps onto
the first principal component of their joint covariance, normalize the
response, then merge graph-based superpixels whose mean response clears a
threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DegenerateCovarianceError, InvalidInputError
from .imageops import rasterize_box, resize_bilinear
from .tensor_core import validate_feature_map, validate_image

POWER_TOL = 1e-10
POWER_MAX_ITER = 1000
DEGENERATE_EIGENVALUE = 1e-12


@dataclass(frozen=True)
class SegmentationParams:
    scale: float = 300.0
    min_size: int = 20
    sigma: float = 0.8

    def validate(self) -> None:
        if self.scale <= 0:
            raise InvalidInputError("segmentation scale must be positive")
        if self.min_size < 1:
            raise InvalidInputError("min_size must be at least 1")
        if self.sigma < 0:
            raise InvalidInputError("sigma must be non-negative")


@dataclass(frozen=True)
class CoattentionParams:
    segmentation: SegmentationParams = field(default_factory=SegmentationParams)
    threshold: float = 0.1

    def validate(self) -> None:
        self.segmentation.validate()
        if not 0.0 <= self.threshold <= 1.0:
            raise InvalidInputError("merge threshold must lie in [0, 1]")


def _stacked_locations(maps: list[np.ndarray]) -> np.ndarray:
    if not maps:
        raise InvalidInputError("need at least one feature map")
    arrs = [validate_feature_map(m) for m in maps]
    channels = arrs[0].shape[2]
    for i, a in enumerate(arrs[1:], start=1):
        if a.shape[2] != channels:
            raise InvalidInputError(
                f"map {i} has {a.shape[2]} channels, expected {channels}"
            )
    return np.concatenate([a.reshape(-1, channels) for a in arrs], axis=0)


def global_mean(maps: list[np.ndarray]) -> np.ndarray:
    """Mean channel vector over every spatial location of every map."""
    return _stacked_locations(maps).mean(axis=0)


def covariance(maps: list[np.ndarray], mean: np.ndarray) -> np.ndarray:
    """Covariance of the location vectors around `mean`, averaged over the
    total location count."""
    x = _stacked_locations(maps)
    mu = np.asarray(mean, dtype=np.float64).reshape(-1)
    if mu.shape[0] != x.shape[1]:
        raise InvalidInputError(
            f"mean has {mu.shape[0]} channels, maps have {x.shape[1]}"
        )
    centered = x - mu[None, :]
    return centered.T @ centered / x.shape[0]


def principal_component(
    cov: np.ndarray,
    tol: float = POWER_TOL,
    max_iter: int = POWER_MAX_ITER,
) -> np.ndarray:
    """Unit eigenvector of the largest eigenvalue, by power iteration from
    a normalized all-ones start. The sign is fixed so the entry with the
    largest magnitude is positive."""
    a = np.asarray(cov, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"covariance must be square, got shape {a.shape}")
    n = a.shape[0]
    v = np.full(n, 1.0 / np.sqrt(n))
    eigenvalue = 0.0
    for _ in range(max_iter):
        w = a @ v
        norm = np.linalg.norm(w)
        if norm < DEGENERATE_EIGENVALUE:
            raise DegenerateCovarianceError("covariance has no dominant direction")
        nxt = w / norm
        eigenvalue = float(v @ w)
        if np.linalg.norm(nxt - v) < tol or np.linalg.norm(nxt + v) < tol:
            v = nxt
            break
        v = nxt
    if eigenvalue < DEGENERATE_EIGENVALUE:
        raise DegenerateCovarianceError(
            f"top eigenvalue {eigenvalue:g} below degeneracy floor"
        )
    pivot = int(np.argmax(np.abs(v)))
    if v[pivot] < 0:
        v = -v
    return v


def attention_map(fm: np.ndarray, phi: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """Per-location projection onto the principal direction, min-max
    normalized to [0, 1]. A constant raw response maps to all zeros."""
    arr = validate_feature_map(fm)
    direction = np.asarray(phi, dtype=np.float64).reshape(-1)
    mu = np.asarray(mean, dtype=np.float64).reshape(-1)
    if direction.shape[0] != arr.shape[2] or mu.shape[0] != arr.shape[2]:
        raise InvalidInputError("channel counts of map, direction and mean differ")
    raw = (arr - mu[None, None, :]) @ direction
    lo = raw.min()
    hi = raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


class _UnionFind:
    __slots__ = ("parent", "size", "internal")

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n

    def find(self, x: int) -> int:
        root = x
        parent = self.parent
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int, weight: float) -> None:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = weight


def segment_superpixels(image: np.ndarray, params: SegmentationParams) -> np.ndarray:
    """Graph-based superpixels over the 4-connected pixel grid.

    Edges are RGB distances after Gaussian smoothing; components merge
    while the edge weight stays under min(internal + scale / size) of the
    two sides, then a final pass removes components below min_size.
    Labels are contiguous ids from 0 in scan order.
    """
    arr = validate_image(image).astype(np.float64)
    params.validate()
    h, w = arr.shape[:2]
    if params.sigma > 0:
        arr = np.stack(
            [gaussian_filter(arr[:, :, ch], params.sigma) for ch in range(3)], axis=2
        )
    idx = np.arange(h * w).reshape(h, w)
    right_a = idx[:, :-1].ravel()
    right_b = idx[:, 1:].ravel()
    right_w = np.sqrt(((arr[:, :-1] - arr[:, 1:]) ** 2).sum(axis=2)).ravel()
    down_a = idx[:-1, :].ravel()
    down_b = idx[1:, :].ravel()
    down_w = np.sqrt(((arr[:-1, :] - arr[1:, :]) ** 2).sum(axis=2)).ravel()
    ea = np.concatenate([right_a, down_a])
    eb = np.concatenate([right_b, down_b])
    ew = np.concatenate([right_w, down_w])
    order = np.argsort(ew, kind="stable")
    ea = ea[order].tolist()
    eb = eb[order].tolist()
    ew = ew[order].tolist()

    uf = _UnionFind(h * w)
    k = params.scale
    for a, b, weight in zip(ea, eb, ew):
        ra = uf.find(a)
        rb = uf.find(b)
        if ra == rb:
            continue
        limit_a = uf.internal[ra] + k / uf.size[ra]
        limit_b = uf.internal[rb] + k / uf.size[rb]
        if weight <= limit_a and weight <= limit_b:
            uf.union(ra, rb, weight)
    if params.min_size > 1:
        for a, b, weight in zip(ea, eb, ew):
            ra = uf.find(a)
            rb = uf.find(b)
            if ra == rb:
                continue
            if uf.size[ra] < params.min_size or uf.size[rb] < params.min_size:
                uf.union(ra, rb, weight)

    roots = np.array([uf.find(i) for i in range(h * w)], dtype=np.int64)
    uniq, first_idx, inverse = np.unique(roots, return_index=True, return_inverse=True)
    scan_rank = np.empty(uniq.shape[0], dtype=np.int64)
    scan_rank[np.argsort(first_idx, kind="stable")] = np.arange(uniq.shape[0])
    return scan_rank[inverse].reshape(h, w)


def superpixel_scores(attention: np.ndarray, seg: np.ndarray) -> np.ndarray:
    """Mean attention per segment; index equals the segment id."""
    att = np.asarray(attention, dtype=np.float64)
    labels = np.asarray(seg)
    if att.shape != labels.shape:
        raise InvalidInputError(
            f"attention {att.shape} does not match segmentation {labels.shape}"
        )
    flat = labels.ravel()
    n = int(flat.max()) + 1
    sums = np.bincount(flat, weights=att.ravel(), minlength=n)
    counts = np.bincount(flat, minlength=n)
    return sums / counts


def pseudo_mask(scores: np.ndarray, seg: np.ndarray, threshold: float) -> np.ndarray:
    """Select the union of segments whose score strictly exceeds the
    threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidInputError("threshold must lie in [0, 1]")
    keep = np.asarray(scores, dtype=np.float64) > threshold
    return keep[np.asarray(seg)]


def coattention_pipeline(
    query_image: np.ndarray,
    query_fm: np.ndarray,
    candidate_fms: list[np.ndarray],
    params: CoattentionParams,
    fallback_box,
    segmentation: np.ndarray | None = None,
) -> np.ndarray:
    """Full mask generation for the query image: joint PCA over the query
    map and the candidate crop maps, attention on the query map, bilinear
    upsampling to pixel resolution, superpixel scoring and thresholding.

    A degenerate covariance falls back to the rasterized current box.
    Callers may pass a precomputed `segmentation` of the query image.
    """
    params.validate()
    if not candidate_fms:
        raise InvalidInputError("need at least one candidate feature map")
    image = validate_image(query_image)
    h, w = image.shape[:2]
    maps = [query_fm, *candidate_fms]
    try:
        mean = global_mean(maps)
        cov = covariance(maps, mean)
        phi = principal_component(cov)
    except DegenerateCovarianceError:
        return rasterize_box(fallback_box, h, w)
    att = attention_map(query_fm, phi, mean)
    att_full = np.clip(resize_bilinear(att, h, w), 0.0, 1.0)
    if segmentation is None:
        segmentation = segment_superpixels(image, params.segmentation)
    scores = superpixel_scores(att_full, segmentation)
    return pseudo_mask(scores, segmentation, params.threshold)
