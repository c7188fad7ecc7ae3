"""Detection by search for few-shot object detection: each labeled shot
queries the unlabeled corpus, its category tag rides along the rank list,
the self-paced procedure refines each category's pool, and confident
first-stage boxes can be re-issued as new queries (query expansion).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coattention import CoattentionParams
from .datasets import ImageStore, QueryRecord
from .errors import InvalidInputError
from .evalkit import RankList
from .localizer import AnchorConfig, Detection, nms_arrays
from .pipeline import FeatureBank, build_ranklists, detect_in_frame
from .selfpaced import (
    PoolEntry,
    SamplePool,
    StageConfig,
    TrainResult,
    init_pool,
    run_training,
)
from .tensor_core import FeatureProviderConfig, mean_kernel

DEFAULT_QE_LIMIT = 10
_DETECTIONS_PER_IMAGE = 5


@dataclass
class Shot:
    category: str
    image_id: str
    box: np.ndarray


@dataclass
class TaggedRankList:
    category: str
    shot: Shot
    ranklist: RankList


@dataclass
class CategoryDetections:
    category: str
    per_image: dict[str, list[Detection]] = field(default_factory=dict)


def propagate_labels(
    shots: list[Shot],
    bank: FeatureBank,
    corpus_ids: list[str],
    m: int,
) -> list[TaggedRankList]:
    """One rank list per shot over the corpus, inheriting the shot's
    category tag."""
    if not shots:
        raise InvalidInputError("no shots to propagate")
    tagged = []
    for i, shot in enumerate(shots):
        query = QueryRecord(f"{shot.category}#{i}", shot.image_id, shot.box)
        (ranklist,) = build_ranklists(bank, [query], corpus_ids, m)
        tagged.append(TaggedRankList(shot.category, shot, ranklist))
    return tagged


def refine_category(
    category: str,
    tagged: list[TaggedRankList],
    other: list[TaggedRankList],
    store: ImageStore,
    bank: FeatureBank,
    corpus_ids: list[str],
    cfg: StageConfig,
    feat_cfg: FeatureProviderConfig,
    anchor_cfg: AnchorConfig,
    coatt: CoattentionParams,
    seed: int = 0,
) -> tuple[CategoryDetections, TrainResult]:
    """Run the self-paced procedure over all of one category's shots (one
    pool per shot, one shared head) and score every corpus image with the
    refined model. Rank lists of other categories supply the negatives."""
    ours = [t for t in tagged if t.category == category]
    if not ours:
        raise InvalidInputError(f"no rank lists tagged {category!r}")
    queries = [
        QueryRecord(t.ranklist.query_id, t.shot.image_id, t.shot.box) for t in ours
    ]
    ranklists = [t.ranklist for t in ours]
    neg_pools: SamplePool | None = None
    if other:
        neg_pools = init_pool([t.ranklist for t in other])
    result = run_training(
        store,
        queries,
        ranklists,
        cfg,
        feat_cfg,
        anchor_cfg,
        coatt,
        seed=seed,
        neg_pools=neg_pools,
        bank=bank,
    )
    detections = CategoryDetections(category)
    kernels = []
    for q in queries:
        crops = [bank.crop_features(q.image_id, q.box, cfg.crop_size, cfg.crop_margin)]
        for e in result.pool[q.query_id]:
            if e.has_model_box:
                crops.append(
                    bank.crop_features(e.image_id, e.box, cfg.crop_size, cfg.crop_margin)
                )
        kernels.append(mean_kernel(crops))
    for image_id in corpus_ids:
        probs_all = []
        boxes_all = []
        for kernel in kernels:
            probs, boxes = detect_in_frame(
                bank, image_id, kernel, result.params, anchor_cfg, cfg.corr_gain
            )
            probs_all.append(probs)
            boxes_all.append(boxes)
        probs = np.concatenate(probs_all)
        boxes = np.concatenate(boxes_all)
        keep = nms_arrays(probs, boxes, 0.5)[:_DETECTIONS_PER_IMAGE]
        detections.per_image[image_id] = [
            Detection(float(probs[i]), boxes[i]) for i in keep
        ]
    return detections, result


def query_expansion(
    stage1_pools: SamplePool,
    shots_by_query: dict[str, Shot],
    limit: int,
    rng: np.random.Generator,
) -> list[Shot]:
    """Sample up to `limit` model-boxed entries per original query from
    the first-stage pool snapshot and return them as new shots of the same
    category."""
    if limit < 1:
        raise InvalidInputError("query-expansion limit must be at least 1")
    expanded: list[Shot] = []
    for qid, entries in stage1_pools.items():
        shot = shots_by_query.get(qid)
        if shot is None:
            continue
        eligible = [e for e in entries if e.has_model_box]
        if not eligible:
            continue
        if len(eligible) > limit:
            picked = rng.choice(len(eligible), size=limit, replace=False)
            eligible = [eligible[int(i)] for i in picked]
        for e in eligible:
            expanded.append(Shot(shot.category, e.image_id, e.box.copy()))
    return expanded


def categories_of(shots: list[Shot]) -> list[str]:
    seen: dict[str, None] = {}
    for s in shots:
        seen.setdefault(s.category, None)
    return list(seen)
