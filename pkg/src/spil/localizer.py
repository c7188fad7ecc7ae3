"""Lightweight detection machinery over correlation maps: an anchor grid,
a per-cell linear head for score / box deltas / mask logits, the weighted
three-part loss with hand-derived gradients, SGD, and NMS.

The head is linear per grid cell, so every gradient below is exact and
checkable against finite differences.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointVersionError, InvalidInputError

CHECKPOINT_MAGIC = "spil-head-checkpoint"
CHECKPOINT_VERSION = 1
_DELTA_CLIP = 6.0  # bounds exp() in decode; |log size ratio| above this is noise
_INIT_PRIOR = 0.01


@dataclass(frozen=True)
class AnchorConfig:
    sizes: tuple[float, ...] = (16.0, 32.0, 64.0)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    stride: int = 4

    def validate(self) -> None:
        if not self.sizes or not self.ratios:
            raise InvalidInputError("anchor sizes and ratios must be non-empty")
        if min(self.sizes) <= 0 or min(self.ratios) <= 0 or self.stride <= 0:
            raise InvalidInputError("anchor sizes, ratios and stride must be positive")

    @property
    def per_cell(self) -> int:
        return len(self.sizes) * len(self.ratios)


@dataclass
class Detection:
    score: float
    box: np.ndarray
    mask: np.ndarray | None = None


@dataclass
class Target:
    """Supervision for one training pair. Negative-pair targets carry a
    null box and mask; positive targets carry at least a box."""

    positive: bool
    box: np.ndarray | None = None
    mask: np.ndarray | None = None
    weight: float = 1.0

    def validate(self) -> None:
        if self.positive and self.box is None:
            raise InvalidInputError("positive targets require a box")
        if not self.positive and (self.box is not None or self.mask is not None):
            raise InvalidInputError("negative targets must have null box and mask")
        if not 0.0 <= self.weight <= 1.0:
            raise InvalidInputError("target weight must lie in [0, 1]")


@dataclass
class HeadParams:
    w_score: np.ndarray
    b_score: float
    w_box: np.ndarray
    b_box: np.ndarray
    w_mask: np.ndarray
    b_mask: float

    @property
    def channels(self) -> int:
        return self.w_score.shape[0]

    @classmethod
    def initial(cls, channels: int) -> "HeadParams":
        prior = math.log(_INIT_PRIOR / (1.0 - _INIT_PRIOR))
        return cls(
            w_score=np.zeros(channels),
            b_score=prior,
            w_box=np.zeros((channels, 4)),
            b_box=np.zeros(4),
            w_mask=np.zeros(channels),
            b_mask=prior,
        )

    @classmethod
    def zeros(cls, channels: int) -> "HeadParams":
        return cls(
            w_score=np.zeros(channels),
            b_score=0.0,
            w_box=np.zeros((channels, 4)),
            b_box=np.zeros(4),
            w_mask=np.zeros(channels),
            b_mask=0.0,
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.w_score,
                [self.b_score],
                self.w_box.ravel(),
                self.b_box,
                self.w_mask,
                [self.b_mask],
            ]
        )

    @classmethod
    def from_vector(cls, channels: int, vec: np.ndarray) -> "HeadParams":
        v = np.asarray(vec, dtype=np.float64)
        c = channels
        if v.shape[0] != 6 * c + 6:
            raise InvalidInputError(
                f"parameter vector length {v.shape[0]} does not fit {c} channels"
            )
        i = 0
        w_score = v[i : i + c].copy()
        i += c
        b_score = float(v[i])
        i += 1
        w_box = v[i : i + 4 * c].reshape(c, 4).copy()
        i += 4 * c
        b_box = v[i : i + 4].copy()
        i += 4
        w_mask = v[i : i + c].copy()
        i += c
        b_mask = float(v[i])
        return cls(w_score, b_score, w_box, b_box, w_mask, b_mask)


@functools.lru_cache(maxsize=64)
def _anchor_grid(map_h: int, map_w: int, cfg: AnchorConfig) -> np.ndarray:
    shapes = []
    for size in cfg.sizes:
        for ratio in cfg.ratios:
            shapes.append((size * math.sqrt(ratio), size / math.sqrt(ratio)))
    shapes = np.asarray(shapes, dtype=np.float64)  # (A, 2) as (w, h)
    ys = (np.arange(map_h, dtype=np.float64) + 0.5) * cfg.stride
    xs = (np.arange(map_w, dtype=np.float64) + 0.5) * cfg.stride
    cx, cy = np.meshgrid(xs, ys)
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)  # (L, 2)
    half = shapes / 2.0
    boxes = np.empty((centers.shape[0], shapes.shape[0], 4), dtype=np.float64)
    boxes[:, :, 0] = centers[:, None, 0] - half[None, :, 0]
    boxes[:, :, 1] = centers[:, None, 1] - half[None, :, 1]
    boxes[:, :, 2] = centers[:, None, 0] + half[None, :, 0]
    boxes[:, :, 3] = centers[:, None, 1] + half[None, :, 1]
    return boxes.reshape(-1, 4)


def propose_anchors(map_h: int, map_w: int, cfg: AnchorConfig) -> np.ndarray:
    """Anchor boxes for every (cell, size, ratio), cell-major with sizes
    varying before ratios. Centers sit at ((j+0.5), (i+0.5)) * stride."""
    cfg.validate()
    if map_h < 1 or map_w < 1:
        raise InvalidInputError("feature map dimensions must be positive")
    return _anchor_grid(map_h, map_w, cfg).copy()


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    bw = b[:, 2] - b[:, 0]
    bh = b[:, 3] - b[:, 1]
    deltas = np.empty_like(b)
    deltas[:, 0] = ((b[:, 0] + b[:, 2]) - (a[:, 0] + a[:, 2])) / (2.0 * aw)
    deltas[:, 1] = ((b[:, 1] + b[:, 3]) - (a[:, 1] + a[:, 3])) / (2.0 * ah)
    deltas[:, 2] = np.log(bw / aw)
    deltas[:, 3] = np.log(bh / ah)
    return deltas


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    cx = (a[:, 0] + a[:, 2]) / 2.0 + d[:, 0] * aw
    cy = (a[:, 1] + a[:, 3]) / 2.0 + d[:, 1] * ah
    w = aw * np.exp(np.clip(d[:, 2], -_DELTA_CLIP, _DELTA_CLIP))
    h = ah * np.exp(np.clip(d[:, 3], -_DELTA_CLIP, _DELTA_CLIP))
    out = np.empty_like(a)
    out[:, 0] = cx - w / 2.0
    out[:, 1] = cy - h / 2.0
    out[:, 2] = cx + w / 2.0
    out[:, 3] = cy + h / 2.0
    return out


def clip_boxes(boxes: np.ndarray, height: float, width: float) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    b[:, 0] = np.clip(b[:, 0], 0.0, width - 1.0)
    b[:, 1] = np.clip(b[:, 1], 0.0, height - 1.0)
    b[:, 2] = np.clip(b[:, 2], b[:, 0] + 1e-3, width)
    b[:, 3] = np.clip(b[:, 3], b[:, 1] + 1e-3, height)
    return b


def iou_one_to_many(box: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64).reshape(4)
    bs = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    ix0 = np.maximum(b[0], bs[:, 0])
    iy0 = np.maximum(b[1], bs[:, 1])
    ix1 = np.minimum(b[2], bs[:, 2])
    iy1 = np.minimum(b[3], bs[:, 3])
    inter = np.maximum(ix1 - ix0, 0.0) * np.maximum(iy1 - iy0, 0.0)
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    areas = (bs[:, 2] - bs[:, 0]) * (bs[:, 3] - bs[:, 1])
    union = area_b + areas - inter
    return np.where(union > 0.0, inter / union, 0.0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_from_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    # softplus(z) - y*z, stable for large |z|
    return np.logaddexp(0.0, z) - y * z


def forward_head(
    corr: np.ndarray, params: HeadParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-cell raw outputs: score logits (h, w), box deltas (h, w, 4) and
    mask logits (h, w)."""
    arr = np.asarray(corr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != params.channels:
        raise InvalidInputError(
            f"correlation map shape {arr.shape} does not match "
            f"{params.channels}-channel head"
        )
    h, w, c = arr.shape
    flat = arr.reshape(-1, c)
    scores = (flat @ params.w_score + params.b_score).reshape(h, w)
    deltas = (flat @ params.w_box + params.b_box).reshape(h, w, 4)
    masks = (flat @ params.w_mask + params.b_mask).reshape(h, w)
    return scores, deltas, masks


def detect_arrays(
    corr: np.ndarray,
    params: HeadParams,
    cfg: AnchorConfig,
    image_hw: tuple[int, int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and decoded boxes for every anchor, ordered like
    propose_anchors. Anchors at a cell share that cell's head outputs."""
    cfg.validate()
    scores, deltas, _ = forward_head(corr, params)
    h, w = scores.shape
    anchors = _anchor_grid(h, w, cfg)
    a = cfg.per_cell
    probs = np.repeat(_sigmoid(scores.ravel()), a)
    cell_deltas = np.repeat(deltas.reshape(-1, 4), a, axis=0)
    boxes = decode_boxes(anchors, cell_deltas)
    if image_hw is None:
        image_hw = (h * cfg.stride, w * cfg.stride)
    boxes = clip_boxes(boxes, float(image_hw[0]), float(image_hw[1]))
    return probs, boxes


def detect(
    corr: np.ndarray,
    params: HeadParams,
    cfg: AnchorConfig,
    image_hw: tuple[int, int] | None = None,
) -> list[Detection]:
    probs, boxes = detect_arrays(corr, params, cfg, image_hw)
    return [Detection(float(p), b) for p, b in zip(probs, boxes)]


def match_targets(
    anchors: np.ndarray,
    target: Target,
    iou_pos: float = 0.5,
    iou_neg: float = 0.3,
) -> np.ndarray:
    """Per-anchor labels: 1 positive, 0 negative, -1 ignored.

    Positives are anchors at IoU >= iou_pos with the target box plus the
    single best-IoU anchor; negatives fall at or below iou_neg. Targets of
    negative pairs label every anchor negative."""
    if iou_neg > iou_pos:
        raise InvalidInputError("iou_neg must not exceed iou_pos")
    target.validate()
    n = np.asarray(anchors).reshape(-1, 4).shape[0]
    if not target.positive:
        return np.zeros(n, dtype=np.int8)
    ious = iou_one_to_many(target.box, anchors)
    labels = np.full(n, -1, dtype=np.int8)
    labels[ious <= iou_neg] = 0
    labels[ious >= iou_pos] = 1
    labels[int(np.argmax(ious))] = 1
    return labels


def _smooth_l1(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def _smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


def _sample_cls_anchors(
    labels: np.ndarray, sample_seed: int
) -> tuple[np.ndarray, np.ndarray]:
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    quota = max(3 * pos.size, 8)
    if neg.size > quota:
        rng = np.random.default_rng(sample_seed)
        neg = neg[np.sort(rng.permutation(neg.size)[:quota])]
    return pos, neg


def mine_hard_negatives(
    score_logits: np.ndarray, labels: np.ndarray, per_cell: int
) -> np.ndarray:
    """Indices of the highest-scoring negative anchors, up to the same
    quota the random subsample uses (3x positives, minimum 8). Keeping the
    selection outside the loss makes the loss differentiable at a fixed
    selection while the training loop refreshes it every iteration."""
    pos = int((labels == 1).sum())
    neg = np.flatnonzero(labels == 0)
    quota = max(3 * pos, 8)
    if neg.size <= quota:
        return neg
    anchor_scores = np.repeat(score_logits.ravel(), per_cell)[neg]
    order = np.argsort(-anchor_scores, kind="stable")
    return np.sort(neg[order[:quota]])


def _cells_inside_box(box: np.ndarray, h: int, w: int, stride: int) -> np.ndarray:
    ys = (np.arange(h, dtype=np.float64) + 0.5) * stride
    xs = (np.arange(w, dtype=np.float64) + 0.5) * stride
    in_y = (ys >= box[1]) & (ys < box[3])
    in_x = (xs >= box[0]) & (xs < box[2])
    return (in_y[:, None] & in_x[None, :]).ravel()


def total_loss(
    corr: np.ndarray,
    params: HeadParams,
    cfg: AnchorConfig,
    target: Target,
    omega: float,
    sample_seed: int = 0,
    iou_pos: float = 0.5,
    iou_neg: float = 0.3,
    image_hw: tuple[int, int] | None = None,
    neg_indices: np.ndarray | None = None,
) -> tuple[float, HeadParams, dict[str, float]]:
    """Weighted loss omega * (cls + box + mask) for one training pair and
    its exact gradients with respect to the head parameters.

    cls is mean binary cross-entropy over sampled anchors, box is mean
    smooth-L1 over positive-anchor deltas, mask is mean cross-entropy of
    the per-cell mask logits against the target mask's grid coverage over
    cells inside the target box. Pairs without positives (or without a
    mask) contribute zero box (mask) loss. The negative subsample is
    deterministic in `sample_seed`; callers may instead pin the sampled
    negative anchors via `neg_indices` (e.g. hard-mined ones).
    """
    target.validate()
    scores, deltas, mask_logits = forward_head(corr, params)
    h, w = scores.shape
    c = params.channels
    flat = np.asarray(corr, dtype=np.float64).reshape(-1, c)
    anchors = _anchor_grid(h, w, cfg)
    per_cell = cfg.per_cell
    labels = match_targets(anchors, target, iou_pos, iou_neg)

    grads = HeadParams.zeros(c)
    parts = {"cls": 0.0, "box": 0.0, "mask": 0.0}

    if neg_indices is not None:
        pos_idx = np.flatnonzero(labels == 1)
        neg_idx = np.asarray(neg_indices, dtype=np.int64)
        if neg_idx.size and np.any(labels[neg_idx] != 0):
            raise InvalidInputError("neg_indices must reference negative anchors")
    else:
        pos_idx, neg_idx = _sample_cls_anchors(labels, sample_seed)
    sampled = np.concatenate([pos_idx, neg_idx])
    g_score_cells = np.zeros(h * w)
    if sampled.size:
        y = np.concatenate(
            [np.ones(pos_idx.size), np.zeros(neg_idx.size)]
        )
        cells = sampled // per_cell
        z = scores.ravel()[cells]
        parts["cls"] = float(_bce_from_logits(z, y).mean())
        np.add.at(g_score_cells, cells, (_sigmoid(z) - y) / sampled.size)
        grads.w_score = flat.T @ g_score_cells
        grads.b_score = float(g_score_cells.sum())

    if pos_idx.size and target.box is not None:
        targets = encode_boxes(
            np.broadcast_to(target.box, (pos_idx.size, 4)), anchors[pos_idx]
        )
        cells = pos_idx // per_cell
        pred = deltas.reshape(-1, 4)[cells]
        err = pred - targets
        parts["box"] = float(_smooth_l1(err).sum(axis=1).mean())
        g_delta_cells = np.zeros((h * w, 4))
        np.add.at(g_delta_cells, cells, _smooth_l1_grad(err) / pos_idx.size)
        grads.w_box = flat.T @ g_delta_cells
        grads.b_box = g_delta_cells.sum(axis=0)

    if target.positive and target.mask is not None:
        if image_hw is None:
            image_hw = (h * cfg.stride, w * cfg.stride)
        mask = np.asarray(target.mask, dtype=np.float64)
        if mask.shape != tuple(image_hw):
            raise InvalidInputError(
                f"target mask shape {mask.shape} does not match image {image_hw}"
            )
        from .imageops import block_reduce_mean

        coverage = block_reduce_mean(mask, cfg.stride)
        if coverage.shape != (h, w):
            raise InvalidInputError(
                f"mask grid {coverage.shape} does not match feature grid {(h, w)}"
            )
        inside = _cells_inside_box(target.box, h, w, cfg.stride)
        if inside.any():
            z = mask_logits.ravel()[inside]
            gamma = coverage.ravel()[inside]
            parts["mask"] = float(_bce_from_logits(z, gamma).mean())
            g_mask_cells = np.zeros(h * w)
            g_mask_cells[inside] = (_sigmoid(z) - gamma) / z.size
            grads.w_mask = flat.T @ g_mask_cells
            grads.b_mask = float(g_mask_cells.sum())

    loss = omega * (parts["cls"] + parts["box"] + parts["mask"])
    grads.w_score *= omega
    grads.b_score *= omega
    grads.w_box *= omega
    grads.b_box = np.asarray(grads.b_box, dtype=np.float64) * omega
    grads.w_mask *= omega
    grads.b_mask *= omega
    return loss, grads, parts


def add_grads(a: HeadParams, b: HeadParams) -> HeadParams:
    return HeadParams(
        w_score=a.w_score + b.w_score,
        b_score=a.b_score + b.b_score,
        w_box=a.w_box + b.w_box,
        b_box=a.b_box + b.b_box,
        w_mask=a.w_mask + b.w_mask,
        b_mask=a.b_mask + b.b_mask,
    )


def sgd_step(params: HeadParams, grads: HeadParams, lr: float) -> HeadParams:
    """One gradient-descent step: params - lr * grads, element-wise."""
    return HeadParams(
        w_score=params.w_score - lr * grads.w_score,
        b_score=params.b_score - lr * grads.b_score,
        w_box=params.w_box - lr * grads.w_box,
        b_box=params.b_box - lr * grads.b_box,
        w_mask=params.w_mask - lr * grads.w_mask,
        b_mask=params.b_mask - lr * grads.b_mask,
    )


def central_difference(f, x: float, eps: float) -> float:
    return (f(x + eps) - f(x - eps)) / (2.0 * eps)


def gradient_check(
    corr: np.ndarray,
    params: HeadParams,
    cfg: AnchorConfig,
    target: Target,
    omega: float = 1.0,
    eps: float = 1e-5,
    sample_seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences over every head parameter."""
    if not 1e-7 <= eps <= 1e-3:
        raise InvalidInputError("eps must lie in [1e-7, 1e-3]")
    c = params.channels
    _, grads, _ = total_loss(corr, params, cfg, target, omega, sample_seed)
    analytic = grads.to_vector()
    vec = params.to_vector()
    worst = 0.0
    for i in range(vec.size):
        bumped = vec.copy()
        bumped[i] = vec[i] + eps
        up, _, _ = total_loss(
            corr, HeadParams.from_vector(c, bumped), cfg, target, omega, sample_seed
        )
        bumped[i] = vec[i] - eps
        dn, _, _ = total_loss(
            corr, HeadParams.from_vector(c, bumped), cfg, target, omega, sample_seed
        )
        numeric = (up - dn) / (2.0 * eps)
        rel = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
        worst = max(worst, rel)
    return worst


def nms_arrays(probs: np.ndarray, boxes: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Indices kept by greedy suppression, in descending-probability order."""
    if not 0.0 < iou_threshold <= 1.0:
        raise InvalidInputError("NMS threshold must lie in (0, 1]")
    order = np.argsort(-np.asarray(probs), kind="stable")
    bs = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    keep: list[int] = []
    for idx in order:
        box = bs[idx]
        if all(iou_one_to_many(box, bs[j][None, :])[0] < iou_threshold for j in keep):
            keep.append(int(idx))
    return np.asarray(keep, dtype=np.int64)


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression by descending probability."""
    if not dets:
        return []
    probs = np.array([d.score for d in dets])
    boxes = np.stack([d.box for d in dets])
    return [dets[i] for i in nms_arrays(probs, boxes, iou_threshold)]


def save_checkpoint(path, params: HeadParams) -> None:
    """Versioned text checkpoint, one named parameter block per line."""
    lines = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        f"channels {params.channels}",
        "w_score " + " ".join(repr(float(v)) for v in params.w_score),
        f"b_score {repr(float(params.b_score))}",
        "w_box " + " ".join(repr(float(v)) for v in params.w_box.ravel()),
        "b_box " + " ".join(repr(float(v)) for v in params.b_box),
        "w_mask " + " ".join(repr(float(v)) for v in params.w_mask),
        f"b_mask {repr(float(params.b_mask))}",
    ]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> HeadParams:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise InvalidInputError(f"{path}: empty checkpoint")
    head = lines[0].split()
    if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: not a head checkpoint")
    if int(head[1]) != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: version {head[1]} unsupported (expected {CHECKPOINT_VERSION})"
        )
    fields: dict[str, list[str]] = {}
    for line in lines[1:]:
        key, *values = line.split()
        fields[key] = values
    try:
        c = int(fields["channels"][0])
        params = HeadParams(
            w_score=np.array([float(v) for v in fields["w_score"]]),
            b_score=float(fields["b_score"][0]),
            w_box=np.array([float(v) for v in fields["w_box"]]).reshape(c, 4),
            b_box=np.array([float(v) for v in fields["b_box"]]),
            w_mask=np.array([float(v) for v in fields["w_mask"]]),
            b_mask=float(fields["b_mask"][0]),
        )
    except (KeyError, ValueError) as exc:
        raise InvalidInputError(f"{path}: malformed checkpoint ({exc})") from exc
    if params.w_score.shape[0] != c or params.w_mask.shape[0] != c:
        raise InvalidInputError(f"{path}: parameter blocks do not match channels")
    return params
