"""The self-paced training procedure: stage scheduling, the per-query
sample pool, pseudo ground-truth selection, contrastive pair sampling,
query swapping, and the full training loop.

One head is trained across all queries. Each iteration pairs a query
frame (Y side) with crops of sampled pool entries (X side); the mean crop
kernel correlates against the Y feature map and the head descends the
weighted three-part loss. After every stage the model re-labels each pool
image and confident boxes replace the stored ones.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .coattention import CoattentionParams, coattention_pipeline
from .datasets import ImageStore, QueryRecord
from .errors import InvalidInputError
from .evalkit import RankList, iou
from .imageops import clip_box, crop_with_margin, scale_box
from .localizer import (
    AnchorConfig,
    Detection,
    HeadParams,
    Target,
    add_grads,
    forward_head,
    match_targets,
    mine_hard_negatives,
    propose_anchors,
    save_checkpoint,
    sgd_step,
    total_loss,
)
from .pipeline import (
    FeatureBank,
    anchor_pool_scales,
    conditioned_correlation,
    detect_in_frame,
    head_channels,
)
from .tensor_core import FeatureProviderConfig, mean_kernel

STATE_VERSION = 1


@dataclass(frozen=True)
class StageConfig:
    """Stage count, per-stage iteration/learning-rate schedule, pair
    counts, crop geometry and the confidence-threshold schedule."""

    stages: int = 4
    stage0_schedule: tuple[tuple[int, float], ...] = ((600, 1e-3), (150, 1e-4))
    later_schedule: tuple[tuple[int, float], ...] = ((350, 1e-3), (150, 1e-4))
    positives: int = 5
    negatives: int = 5
    crop_size: int = 64
    crop_margin: float = 1.5
    y_shorter: int = 128
    y_long_cap: int = 256
    # multi-scale training of the search side: without it the box sizes
    # seen in training collapse to the query sizes and the size regression
    # has nothing to learn from
    y_multiscale: tuple[int, ...] = (104, 116, 128, 140, 152)
    swap_prob: float = 0.5
    contrastive: bool = True
    tau0: float = 0.99
    tau_step: float = 0.1
    tau_floor: float = 0.5
    corr_gain: float = 40.0
    iou_pos: float = 0.5
    iou_neg: float = 0.3

    def validate(self) -> None:
        if self.stages < 1:
            raise InvalidInputError("stages must be at least 1")
        for name, sched in (("stage0", self.stage0_schedule), ("later", self.later_schedule)):
            if not sched or any(it < 1 or lr < 0 for it, lr in sched):
                raise InvalidInputError(f"{name} schedule must have positive segments")
        if self.positives < 1:
            raise InvalidInputError("positives must be at least 1")
        if self.negatives < 1:
            raise InvalidInputError("negatives must be at least 1")
        if not 0.0 <= self.swap_prob <= 1.0:
            raise InvalidInputError("swap_prob must lie in [0, 1]")
        if not 0.5 <= self.tau0 < 1.0:
            raise InvalidInputError("tau0 must lie in [0.5, 1)")
        if self.crop_size < 8:
            raise InvalidInputError("crop_size must be at least 8")
        if self.corr_gain <= 0:
            raise InvalidInputError("corr_gain must be positive")
        if not self.y_multiscale or min(self.y_multiscale) < 16:
            raise InvalidInputError("y_multiscale needs sides of at least 16")

    def schedule(self, stage: int) -> tuple[tuple[int, float], ...]:
        return self.stage0_schedule if stage == 0 else self.later_schedule

    def iterations(self, stage: int) -> int:
        return sum(it for it, _ in self.schedule(stage))


@dataclass
class PoolEntry:
    image_id: str
    box: np.ndarray
    omega: float = 1.0
    has_model_box: bool = False


@dataclass
class XSide:
    image_id: str
    box: np.ndarray
    omega: float
    has_model_box: bool
    crop: np.ndarray


@dataclass
class TrainingPair:
    y_image_id: str
    target: Target
    x_side: list[XSide]
    positive: bool


SamplePool = dict[str, list[PoolEntry]]


def tau_schedule(
    k: int, tau0: float = 0.99, step: float = 0.1, floor: float = 0.5
) -> float:
    """Confidence threshold for selecting pseudo ground truth at stage k:
    tau0 - step * (k - 1), floored. Stage 0 performs no selection."""
    if k < 1:
        raise InvalidInputError("tau schedule starts at k = 1")
    return max(tau0 - step * (k - 1), floor)


def init_pool(ranklists: list[RankList]) -> SamplePool:
    """One pool entry per rank-list candidate, carrying its search box
    with weight 1 and no model-assigned box yet."""
    pool: SamplePool = {}
    for rl in ranklists:
        if not rl.entries:
            raise InvalidInputError(f"rank list {rl.query_id} is empty")
        pool[rl.query_id] = [
            PoolEntry(e.image_id, np.asarray(e.box, dtype=np.float64).copy())
            for e in rl.entries
        ]
    return pool


def select_pseudo_gt(
    dets: list[Detection], tau: float
) -> tuple[np.ndarray, float] | None:
    """The highest-probability detection above tau, as (box, weight);
    ties break to the lowest detection index. None when nothing
    qualifies."""
    if not 0.0 < tau < 1.0:
        raise InvalidInputError("tau must lie in (0, 1)")
    if not dets:
        return None
    probs = np.array([d.score for d in dets])
    boxes = np.stack([np.asarray(d.box, dtype=np.float64) for d in dets])
    return _select_arrays(probs, boxes, tau)


def _select_arrays(
    probs: np.ndarray, boxes: np.ndarray, tau: float
) -> tuple[np.ndarray, float] | None:
    best = int(np.argmax(probs))
    if probs[best] <= tau:
        return None
    return boxes[best].copy(), float(probs[best])


def update_pool(pool: SamplePool, query_id: str, detections, tau: float) -> int:
    """Replace the boxes of pool images whose best detection clears tau;
    returns how many entries changed. `detections` maps image id to a
    Detection list or a (probs, boxes) array pair."""
    if query_id not in pool:
        raise InvalidInputError(f"unknown query id {query_id!r}")
    entries = {e.image_id: e for e in pool[query_id]}
    for image_id in detections:
        if image_id not in entries:
            raise InvalidInputError(
                f"image {image_id!r} is not in the pool of query {query_id!r}"
            )
    updated = 0
    for image_id, dets in detections.items():
        if isinstance(dets, tuple):
            probs, boxes = dets
            picked = _select_arrays(probs, boxes, tau) if len(probs) else None
        else:
            picked = select_pseudo_gt(dets, tau) if dets else None
        if picked is None:
            continue
        entry = entries[image_id]
        entry.box = picked[0]
        entry.omega = picked[1]
        entry.has_model_box = True
        updated += 1
    return updated


def sample_positive_pairs(
    pool: SamplePool,
    query: QueryRecord,
    n: int,
    rng: np.random.Generator,
    store: ImageStore,
    crop_size: int,
    margin: float,
) -> TrainingPair:
    """Pair the query (Y side, weight 1) with n pool entries sampled
    uniformly without replacement; X-side crops take a context margin
    around each entry's current box."""
    entries = pool.get(query.query_id, [])
    if n > len(entries):
        raise InvalidInputError(
            f"requested {n} positives but pool holds {len(entries)}"
        )
    picked = rng.choice(len(entries), size=n, replace=False)
    x_side = [
        _crop_entry(entries[int(i)], store, crop_size, margin) for i in picked
    ]
    target = Target(positive=True, box=query.box.copy(), mask=None, weight=1.0)
    return TrainingPair(query.image_id, target, x_side, positive=True)


def _crop_entry(
    entry: PoolEntry, store: ImageStore, crop_size: int, margin: float
) -> XSide:
    crop = crop_with_margin(store[entry.image_id], entry.box, margin, crop_size)
    return XSide(entry.image_id, entry.box.copy(), entry.omega, entry.has_model_box, crop)


def sample_negative_pairs(
    pools: SamplePool,
    query: QueryRecord,
    n: int,
    rng: np.random.Generator,
    store: ImageStore,
    crop_size: int,
    margin: float,
) -> TrainingPair:
    """Contrastive pair: n crops from a uniformly chosen different query's
    pool against the subject query's image, with a null target."""
    other = [qid for qid in pools if qid != query.query_id]
    if not other:
        raise InvalidInputError("negative sampling needs at least two queries")
    source = other[int(rng.integers(len(other)))]
    entries = pools[source]
    if n > len(entries):
        raise InvalidInputError(
            f"requested {n} negatives but pool {source!r} holds {len(entries)}"
        )
    picked = rng.choice(len(entries), size=n, replace=False)
    x_side = [
        _crop_entry(entries[int(i)], store, crop_size, margin) for i in picked
    ]
    return TrainingPair(
        query.image_id, Target(positive=False), x_side, positive=False
    )


def query_swap(
    pair: TrainingPair,
    k: int,
    rng: np.random.Generator,
    swap_prob: float,
    store: ImageStore,
    crop_size: int,
    margin: float,
) -> TrainingPair:
    """From stage 1 on, exchange the Y side with one model-boxed X entry
    with probability swap_prob. The displaced Y side joins the X side as a
    crop, keeping the pair size unchanged. Entries still carrying search
    boxes are not eligible to become the Y side."""
    if not pair.positive:
        raise InvalidInputError("query_swap applies to positive pairs only")
    if k == 0:
        return pair
    if rng.random() >= swap_prob:
        return pair
    eligible = [i for i, x in enumerate(pair.x_side) if x.has_model_box]
    if not eligible:
        return pair
    j = eligible[int(rng.integers(len(eligible)))]
    incoming = pair.x_side[j]
    displaced = XSide(
        image_id=pair.y_image_id,
        box=pair.target.box.copy(),
        omega=pair.target.weight,
        has_model_box=True,
        crop=crop_with_margin(store[pair.y_image_id], pair.target.box, margin, crop_size),
    )
    x_side = list(pair.x_side)
    x_side[j] = displaced
    target = Target(
        positive=True, box=incoming.box.copy(), mask=None, weight=incoming.omega
    )
    return TrainingPair(incoming.image_id, target, x_side, positive=True)


def pool_miou(
    pool: SamplePool,
    gt_boxes: dict[str, np.ndarray | None],
    relevance: dict[str, set[str]],
) -> float | None:
    """Mean IoU of pool boxes against planted boxes, over entries whose
    image is relevant to the query and carries ground truth."""
    scores = []
    for qid, entries in pool.items():
        relevant = relevance.get(qid, set())
        for e in entries:
            gt = gt_boxes.get(e.image_id)
            if e.image_id in relevant and gt is not None:
                scores.append(iou(e.box, gt))
    if not scores:
        return None
    return float(np.mean(scores))


@dataclass
class TrainResult:
    params: HeadParams
    pool: SamplePool
    iter_logs: list[dict] = field(default_factory=list)
    stage_logs: list[dict] = field(default_factory=list)
    pool_snapshots: list[SamplePool] = field(default_factory=list)


def _pool_to_json(pool: SamplePool) -> dict:
    return {
        qid: [
            {
                "image_id": e.image_id,
                "box": [float(v) for v in e.box],
                "omega": float(e.omega),
                "has_model_box": bool(e.has_model_box),
            }
            for e in entries
        ]
        for qid, entries in pool.items()
    }


def pool_from_json(data: dict) -> SamplePool:
    return {
        qid: [
            PoolEntry(
                e["image_id"],
                np.asarray(e["box"], dtype=np.float64),
                float(e["omega"]),
                bool(e["has_model_box"]),
            )
            for e in entries
        ]
        for qid, entries in data.items()
    }


def save_pool(path: str, pool: SamplePool) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_pool_to_json(pool), fh, indent=1)
        fh.write("\n")


def load_pool(path: str) -> SamplePool:
    with open(path, "r", encoding="utf-8") as fh:
        return pool_from_json(json.load(fh))


def crop_core_kernel(crop_fms: list[np.ndarray], margin: float) -> np.ndarray:
    """Kernel from the central box region of each context crop (the crop
    covers margin x the box, so the instance sits in the central 1/margin
    fraction per axis). Averaging the whole crop dilutes the template with
    background until related templates out-correlate the real one."""
    if not crops_nonempty(crop_fms):
        raise InvalidInputError("crop_core_kernel needs at least one crop map")
    pooled = []
    for fm in crop_fms:
        h, w, _ = fm.shape
        frac = 1.0 / max(margin, 1.0)
        y0 = int(np.floor(h * (1.0 - frac) / 2.0))
        x0 = int(np.floor(w * (1.0 - frac) / 2.0))
        y1 = min(max(h - y0, y0 + 1), h)
        x1 = min(max(w - x0, x0 + 1), w)
        pooled.append(fm[y0:y1, x0:x1].mean(axis=(0, 1)))
    return np.mean(pooled, axis=0)


def crops_nonempty(crop_fms: list[np.ndarray]) -> bool:
    return bool(crop_fms)


def _update_kernel(
    bank: FeatureBank, query: QueryRecord, entries: list[PoolEntry], cfg: StageConfig
) -> np.ndarray:
    """Inference kernel for pool updates: the query crop plus every crop
    that already carries a model box."""
    crops = [bank.crop_features(query.image_id, query.box, cfg.crop_size, cfg.crop_margin)]
    for e in entries:
        if e.has_model_box:
            crops.append(
                bank.crop_features(e.image_id, e.box, cfg.crop_size, cfg.crop_margin)
            )
    return crop_core_kernel(crops, cfg.crop_margin)


def run_training(
    store: ImageStore,
    queries: list[QueryRecord],
    ranklists: list[RankList],
    cfg: StageConfig,
    feat_cfg: FeatureProviderConfig,
    anchor_cfg: AnchorConfig,
    coatt: CoattentionParams,
    seed: int = 0,
    gt_boxes: dict[str, np.ndarray | None] | None = None,
    relevance: dict[str, set[str]] | None = None,
    neg_pools: SamplePool | None = None,
    out_dir: str | None = None,
    resume: dict | None = None,
    bank: FeatureBank | None = None,
) -> TrainResult:
    """Run the staged procedure end to end and return the trained head,
    the final pool, per-iteration and per-stage logs, and a pool snapshot
    taken after each stage's update pass.

    The run is a deterministic function of its inputs and `seed`. With an
    `out_dir`, logs are streamed to logs.jsonl / stages.jsonl and a
    checkpoint plus a resumable state file are written after every stage;
    `resume` accepts the dict produced by `load_state`.
    """
    cfg.validate()
    anchor_cfg.validate()
    coatt.validate()
    if not queries:
        raise InvalidInputError("no queries to train on")
    if bank is None:
        bank = FeatureBank(
            store,
            feat_cfg,
            y_shorter=cfg.y_shorter,
            y_long_cap=cfg.y_long_cap,
            seg_params=coatt.segmentation,
        )
    if bank.center is None:
        seen: dict[str, None] = {q.image_id: None for q in queries}
        for rl in ranklists:
            for e in rl.entries:
                seen.setdefault(e.image_id, None)
        bank.ensure_center(seen)
    channels = head_channels(feat_cfg.out_channels)

    if resume is not None:
        start_stage = resume["stage_completed"] + 1
        params = resume["params"]
        pool = resume["pool"]
        rng = np.random.default_rng()
        rng.bit_generator.state = resume["rng_state"]
    else:
        start_stage = 0
        params = HeadParams.initial(channels)
        pool = init_pool(ranklists)
        rng = np.random.default_rng(seed)

    # negatives come from sibling queries by default, or from an external
    # pool set (e.g. other categories) when one is supplied
    sample_pools = pool if neg_pools is None else neg_pools
    subject_ids = {q.query_id for q in queries}
    can_contrast = cfg.contrastive and any(
        qid not in subject_ids or neg_pools is None for qid in sample_pools
    )
    if neg_pools is None:
        can_contrast = cfg.contrastive and len(pool) >= 2

    result = TrainResult(params=params, pool=pool)
    iter_fh = stage_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        mode = "a" if resume is not None else "w"
        iter_fh = open(os.path.join(out_dir, "logs.jsonl"), mode, encoding="utf-8")
        stage_fh = open(os.path.join(out_dir, "stages.jsonl"), mode, encoding="utf-8")

    try:
        for stage in range(start_stage, cfg.stages):
            it_in_stage = 0
            for seg_iters, lr in cfg.schedule(stage):
                for _ in range(seg_iters):
                    it_in_stage += 1
                    params, record = _train_iteration(
                        bank,
                        store,
                        queries,
                        pool,
                        sample_pools,
                        params,
                        cfg,
                        anchor_cfg,
                        coatt,
                        stage,
                        it_in_stage,
                        lr,
                        rng,
                        can_contrast,
                    )
                    result.iter_logs.append(record)
                    if iter_fh is not None:
                        iter_fh.write(json.dumps(record) + "\n")
            tau = tau_schedule(stage + 1, cfg.tau0, cfg.tau_step, cfg.tau_floor)
            updated = 0
            for q in queries:
                entries = pool[q.query_id]
                kernel = _update_kernel(bank, q, entries, cfg)
                dets = {}
                for e in entries:
                    dets[e.image_id] = detect_in_frame(
                        bank, e.image_id, kernel, params, anchor_cfg, cfg.corr_gain
                    )
                updated += update_pool(pool, q.query_id, dets, tau)
            miou_now = (
                pool_miou(pool, gt_boxes, relevance or {})
                if gt_boxes is not None
                else None
            )
            stage_record = {
                "stage": stage,
                "tau": tau,
                "updated_entries": updated,
                "pool_miou": miou_now,
            }
            result.stage_logs.append(stage_record)
            result.pool_snapshots.append(copy.deepcopy(pool))
            if stage_fh is not None:
                stage_fh.write(json.dumps(stage_record) + "\n")
            if out_dir is not None:
                save_checkpoint(
                    os.path.join(out_dir, f"checkpoint_stage_{stage}.txt"), params
                )
                _save_state(
                    os.path.join(out_dir, f"state_{stage}.json"), stage, rng, pool
                )
    finally:
        if iter_fh is not None:
            iter_fh.close()
        if stage_fh is not None:
            stage_fh.close()

    result.params = params
    result.pool = pool
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "checkpoint.txt"), params)
        save_pool(os.path.join(out_dir, "pool.json"), pool)
    return result


def _train_iteration(
    bank: FeatureBank,
    store: ImageStore,
    queries: list[QueryRecord],
    pool: SamplePool,
    sample_pools: SamplePool,
    params: HeadParams,
    cfg: StageConfig,
    anchor_cfg: AnchorConfig,
    coatt: CoattentionParams,
    stage: int,
    it_in_stage: int,
    lr: float,
    rng: np.random.Generator,
    can_contrast: bool,
) -> tuple[HeadParams, dict]:
    query = queries[int(rng.integers(len(queries)))]
    pair = sample_positive_pairs(
        pool, query, cfg.positives, rng, store, cfg.crop_size, cfg.crop_margin
    )
    if stage >= 1:
        pair = query_swap(
            pair, stage, rng, cfg.swap_prob, store, cfg.crop_size, cfg.crop_margin
        )
    shorter = cfg.y_multiscale[int(rng.integers(len(cfg.y_multiscale)))]

    frame, (sy, sx) = bank.frame(pair.y_image_id, shorter)
    y_fm = bank.features(pair.y_image_id, shorter)
    y_box = clip_box(scale_box(pair.target.box, sy, sx), *frame.shape[:2])
    crop_fms = [_crop_fm(bank, x) for x in pair.x_side]
    kernel = crop_core_kernel(crop_fms, cfg.crop_margin)
    corr = conditioned_correlation(
        kernel, y_fm, cfg.corr_gain, center=bank.center,
        pool_scales=anchor_pool_scales(anchor_cfg),
    )
    mask = coattention_pipeline(
        frame,
        y_fm,
        crop_fms,
        coatt,
        fallback_box=y_box,
        segmentation=bank.segmentation(pair.y_image_id, shorter),
    )
    target = Target(positive=True, box=y_box, mask=mask, weight=pair.target.weight)
    loss_p, grads, parts_p = total_loss(
        corr,
        params,
        anchor_cfg,
        target,
        omega=pair.target.weight,
        iou_pos=cfg.iou_pos,
        iou_neg=cfg.iou_neg,
        image_hw=frame.shape[:2],
        neg_indices=_hard_negatives(corr, params, anchor_cfg, target, cfg),
    )
    record = {
        "stage": stage,
        "iter": it_in_stage,
        "loss": loss_p,
        "cls": pair.target.weight * parts_p["cls"],
        "box": pair.target.weight * parts_p["box"],
        "mask": pair.target.weight * parts_p["mask"],
    }
    if can_contrast:
        npair = sample_negative_pairs(
            sample_pools, query, cfg.negatives, rng, store, cfg.crop_size, cfg.crop_margin
        )
        nkernel = crop_core_kernel([_crop_fm(bank, x) for x in npair.x_side], cfg.crop_margin)
        ncorr = conditioned_correlation(
            nkernel, y_fm, cfg.corr_gain, center=bank.center,
            pool_scales=anchor_pool_scales(anchor_cfg),
        )
        ntarget = Target(positive=False)
        loss_n, grads_n, parts_n = total_loss(
            ncorr,
            params,
            anchor_cfg,
            ntarget,
            omega=1.0,
            iou_pos=cfg.iou_pos,
            iou_neg=cfg.iou_neg,
            image_hw=frame.shape[:2],
            neg_indices=_hard_negatives(ncorr, params, anchor_cfg, ntarget, cfg),
        )
        grads = add_grads(grads, grads_n)
        record["loss"] += loss_n
        record["cls"] += parts_n["cls"]
    params = sgd_step(params, grads, lr)
    return params, record


def _crop_fm(bank: FeatureBank, x: XSide) -> np.ndarray:
    from .tensor_core import extract_features

    return extract_features(x.crop, bank.feat_cfg, image_id=x.image_id)


def _hard_negatives(
    corr: np.ndarray,
    params: HeadParams,
    anchor_cfg: AnchorConfig,
    target: Target,
    cfg: StageConfig,
) -> np.ndarray:
    """Highest-scoring negative anchors under the current head; training
    always contests the cells it currently believes in. Cells whose pooled
    input window still overlaps the target instance are left out of the
    mining: their features are close to the positives' by construction, so
    contesting them would erase the separation the head needs."""
    scores, _, _ = forward_head(corr, params)
    h, w = scores.shape
    anchors = propose_anchors(h, w, anchor_cfg)
    labels = match_targets(anchors, target, cfg.iou_pos, cfg.iou_neg)
    if target.box is not None:
        pad = (anchor_pool_scales(anchor_cfg)[-1] / 2.0 + 1.0) * anchor_cfg.stride
        grown = np.array(
            [target.box[0] - pad, target.box[1] - pad, target.box[2] + pad, target.box[3] + pad]
        )
        ys = (np.arange(h) + 0.5) * anchor_cfg.stride
        xs = (np.arange(w) + 0.5) * anchor_cfg.stride
        inside = (
            (ys[:, None] >= grown[1])
            & (ys[:, None] < grown[3])
            & (xs[None, :] >= grown[0])
            & (xs[None, :] < grown[2])
        )
        shadowed = np.repeat(inside.ravel(), anchor_cfg.per_cell)
        masked = labels.copy()
        masked[shadowed & (labels == 0)] = -1
        if np.any(masked == 0):
            labels = masked
    return mine_hard_negatives(scores, labels, anchor_cfg.per_cell)


def _save_state(path: str, stage: int, rng: np.random.Generator, pool: SamplePool) -> None:
    state = {
        "version": STATE_VERSION,
        "stage_completed": stage,
        "rng_state": rng.bit_generator.state,
        "pool": _pool_to_json(pool),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(state, fh)
        fh.write("\n")


def load_state(path: str, checkpoint_path: str) -> dict:
    from .localizer import load_checkpoint

    with open(path, "r", encoding="utf-8") as fh:
        state = json.load(fh)
    if state.get("version") != STATE_VERSION:
        from .errors import CheckpointVersionError

        raise CheckpointVersionError(f"{path}: unsupported state version")
    return {
        "stage_completed": state["stage_completed"],
        "rng_state": state["rng_state"],
        "pool": pool_from_json(state["pool"]),
        "params": load_checkpoint(checkpoint_path),
    }
