"""Evaluation and search machinery: IoU / mIoU, Recall-IoU curves,
retrieval and detection average precision, box-pooled features for
re-ranking, and the correlation-peak ranker used to build rank lists.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidInputError
from .localizer import Detection, iou_one_to_many
from .tensor_core import validate_feature_map


@dataclass
class RankEntry:
    image_id: str
    box: np.ndarray
    score: float


@dataclass
class RankList:
    query_id: str
    entries: list[RankEntry] = field(default_factory=list)

    def validate(self) -> None:
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise InvalidInputError(f"rank list {self.query_id}: duplicate image ids")
        scores = [e.score for e in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise InvalidInputError(f"rank list {self.query_id}: scores increase")

    def image_ids(self) -> list[str]:
        return [e.image_id for e in self.entries]


def iou(a, b) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ax = np.asarray(a, dtype=np.float64).reshape(4)
    return float(iou_one_to_many(ax, np.asarray(b, dtype=np.float64).reshape(1, 4))[0])


def miou(pred: Sequence, gt: Sequence) -> float:
    """Mean per-image IoU over aligned prediction / ground-truth lists;
    a missing prediction (None) scores zero."""
    if len(pred) != len(gt):
        raise InvalidInputError(
            f"prediction list length {len(pred)} != ground truth {len(gt)}"
        )
    if not gt:
        raise InvalidInputError("empty ground-truth list")
    total = 0.0
    for p, g in zip(pred, gt):
        if p is not None:
            total += iou(p, g)
    return total / len(gt)


def recall_iou_curve(
    pred: Sequence, gt: Sequence, thresholds: Sequence[float]
) -> list[tuple[float, float]]:
    """Recall(t) = fraction of ground-truth boxes whose prediction reaches
    IoU >= t, for each threshold."""
    ts = [float(t) for t in thresholds]
    if any(not 0.0 < t < 1.0 for t in ts):
        raise InvalidInputError("thresholds must lie strictly inside (0, 1)")
    if any(a >= b for a, b in zip(ts, ts[1:])):
        raise InvalidInputError("thresholds must be strictly increasing")
    ious = [iou(p, g) if p is not None else 0.0 for p, g in zip(pred, gt)]
    n = max(len(gt), 1)
    return [(t, sum(1 for v in ious if v >= t) / n) for t in ts]


def average_precision(ranklist: RankList, relevant: set[str] | frozenset[str]) -> float:
    """Retrieval AP: mean of precision at each relevant rank; zero when the
    list contains no relevant item."""
    hits = 0
    precisions = []
    for rank, entry in enumerate(ranklist.entries, start=1):
        if entry.image_id in relevant:
            hits += 1
            precisions.append(hits / rank)
    if not precisions:
        return 0.0
    return float(np.mean(precisions))


def mean_average_precision(
    ranklists: Sequence[RankList], relevance: Mapping[str, set[str]]
) -> float:
    if not ranklists:
        raise InvalidInputError("no rank lists to evaluate")
    return float(
        np.mean(
            [average_precision(rl, relevance.get(rl.query_id, set())) for rl in ranklists]
        )
    )


def detection_ap(
    detections: Mapping[str, list[Detection]],
    gt_boxes: Mapping[str, list[np.ndarray]],
    iou_thresh: float = 0.5,
) -> float:
    """Detection AP at one IoU threshold: detections ranked by score across
    all images, matched greedily to at most one ground-truth box each, and
    the precision-recall curve integrated with 101-point interpolation."""
    total_gt = sum(len(v) for v in gt_boxes.values())
    flat: list[tuple[float, str, np.ndarray]] = []
    for image_id, dets in detections.items():
        for d in dets:
            flat.append((d.score, image_id, np.asarray(d.box, dtype=np.float64)))
    if not flat:
        return 0.0
    if total_gt == 0:
        return 0.0
    flat.sort(key=lambda t: -t[0])
    matched: dict[str, np.ndarray] = {
        img: np.zeros(len(boxes), dtype=bool) for img, boxes in gt_boxes.items()
    }
    tp = np.zeros(len(flat))
    for i, (_, image_id, box) in enumerate(flat):
        boxes = gt_boxes.get(image_id, [])
        if not boxes:
            continue
        ious = iou_one_to_many(box, np.stack(boxes))
        taken = matched[image_id]
        ious = np.where(taken, -1.0, ious)
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh:
            taken[j] = True
            tp[i] = 1.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(flat) + 1)
    recall = cum_tp / total_gt
    return interpolated_ap(precision, recall)


def interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """101-point interpolation: mean over r in {0, 0.01, ..., 1} of the
    best precision at recall >= r."""
    grid = np.linspace(0.0, 1.0, 101)
    total = 0.0
    for r in grid:
        mask = recall >= r - 1e-12
        total += float(precision[mask].max()) if mask.any() else 0.0
    return total / grid.size


def box_mean_feature(fm: np.ndarray, box, stride: int) -> np.ndarray:
    """Channel means over the grid cells whose centers project inside the
    pixel box. A box covering no cell center expands to the single
    nearest cell."""
    arr = validate_feature_map(fm)
    b = np.asarray(box, dtype=np.float64).reshape(4)
    h, w, _ = arr.shape
    ys = (np.arange(h) + 0.5) * stride
    xs = (np.arange(w) + 0.5) * stride
    in_y = (ys >= b[1]) & (ys < b[3])
    in_x = (xs >= b[0]) & (xs < b[2])
    member = in_y[:, None] & in_x[None, :]
    if not member.any():
        cx = (b[0] + b[2]) / 2.0
        cy = (b[1] + b[3]) / 2.0
        j = int(np.argmin(np.abs(xs - cx)))
        i = int(np.argmin(np.abs(ys - cy)))
        member[i, j] = True
    return arr[member].mean(axis=0)


def pooled_feature(fm: np.ndarray, box, stride: int) -> np.ndarray:
    """L2-normalized box_mean_feature; the re-ranking descriptor."""
    vec = box_mean_feature(fm, box, stride)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def cell_normalized(fm: np.ndarray) -> np.ndarray:
    """Feature map with every cell vector scaled to unit L2 norm."""
    arr = validate_feature_map(fm)
    norms = np.linalg.norm(arr, axis=2, keepdims=True)
    return arr / np.maximum(norms, 1e-12)


def corpus_mean_feature(corpus: Mapping[str, np.ndarray]) -> np.ndarray:
    """Mean cell vector over every location of every corpus map."""
    if not corpus:
        raise InvalidInputError("empty corpus")
    total = None
    count = 0
    for fm in corpus.values():
        arr = validate_feature_map(fm)
        flat = arr.reshape(-1, arr.shape[2])
        total = flat.sum(axis=0) if total is None else total + flat.sum(axis=0)
        count += flat.shape[0]
    return total / count


def _window_mean(resp: np.ndarray, wh: int, ww: int) -> np.ndarray:
    h, w = resp.shape
    wh = min(max(wh, 1), h)
    ww = min(max(ww, 1), w)
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = resp.cumsum(axis=0).cumsum(axis=1)
    sums = (
        integral[wh:, ww:]
        - integral[:-wh, ww:]
        - integral[wh:, :-ww]
        + integral[:-wh, :-ww]
    )
    return sums / (wh * ww)


SEARCH_WINDOW_FACTOR = 0.85


def search_rank(
    query_id: str,
    kernel: np.ndarray,
    query_box,
    corpus: Mapping[str, np.ndarray],
    m: int,
    stride: int,
    corpus_mean: np.ndarray | None = None,
) -> RankList:
    """Correlation-peak ranking. Per image, the kernel correlates against
    every cell (both mean-centered and L2-normalized, i.e. a cosine
    response) and the score is the best mean response over a sliding
    window shaped like the query box; the entry box is the query-box-sized
    window at that peak. Returns the top m by score; ties keep corpus
    order. If m exceeds the corpus the whole corpus is returned."""
    if m < 1:
        raise InvalidInputError("m must be at least 1")
    mu = corpus_mean_feature(corpus) if corpus_mean is None else corpus_mean
    k = np.asarray(kernel, dtype=np.float64).reshape(-1) - mu
    k = k / max(np.linalg.norm(k), 1e-12)
    qb = np.asarray(query_box, dtype=np.float64).reshape(4)
    bw = qb[2] - qb[0]
    bh = qb[3] - qb[1]
    ww = max(int(round(bw * SEARCH_WINDOW_FACTOR / stride)), 1)
    wh = max(int(round(bh * SEARCH_WINDOW_FACTOR / stride)), 1)
    scored: list[tuple[float, str, np.ndarray]] = []
    for image_id in corpus:
        fm = cell_normalized(corpus[image_id] - mu[None, None, :])
        response = fm @ k
        means = _window_mean(response, wh, ww)
        score = float(means.max())
        # the box stays deliberately coarse: a query-sized window on the
        # single strongest cell; refining it is the trained model's job
        i, j = divmod(int(np.argmax(response)), response.shape[1])
        cy = (i + 0.5) * stride
        cx = (j + 0.5) * stride
        box = np.array([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2])
        h_px = fm.shape[0] * stride
        w_px = fm.shape[1] * stride
        box[0] = max(box[0], 0.0)
        box[1] = max(box[1], 0.0)
        box[2] = min(max(box[2], box[0] + 1.0), float(w_px))
        box[3] = min(max(box[3], box[1] + 1.0), float(h_px))
        scored.append((score, image_id, box))
    order = sorted(range(len(scored)), key=lambda i: -scored[i][0])
    top = order[: min(m, len(scored))]
    entries = [RankEntry(scored[i][1], scored[i][2], scored[i][0]) for i in top]
    return RankList(query_id=query_id, entries=entries)


def rerank(
    ranklist: RankList,
    query_feature: np.ndarray,
    features: Mapping[str, np.ndarray],
) -> RankList:
    """Reorder a rank list by descending dot product with the query
    feature; ties keep their original relative order."""
    q = np.asarray(query_feature, dtype=np.float64).reshape(-1)
    sims = np.array(
        [float(q @ np.asarray(features[e.image_id]).reshape(-1)) for e in ranklist.entries]
    )
    order = np.argsort(-sims, kind="stable")
    entries = [
        RankEntry(ranklist.entries[i].image_id, ranklist.entries[i].box, float(sims[i]))
        for i in order
    ]
    return RankList(query_id=ranklist.query_id, entries=entries)
