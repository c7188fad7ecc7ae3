"""Command-line entry point: dataset synthesis, training, evaluation and
few-shot detection-by-search.

Exit codes: 0 success, 1 internal error, 2 input error, 3 checkpoint or
state version error.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
import traceback

import numpy as np

from .config import RunConfig, load_run_config, load_synth_spec
from .datasets import (
    QueryRecord,
    load_dataset,
    load_ranklists,
    load_shots,
    save_detections_json,
    save_ranklists,
)
from .errors import CheckpointVersionError, InvalidInputError, SpilError
from .evalkit import (
    RankList,
    detection_ap,
    mean_average_precision,
    miou,
    pooled_feature,
    recall_iou_curve,
    rerank,
)
from .fewshot import (
    Shot,
    categories_of,
    propagate_labels,
    query_expansion,
    refine_category,
)
from .fileio import save_curve_csv
from .imageops import scale_box
from .localizer import load_checkpoint
from .pipeline import FeatureBank, detect_in_frame
from .selfpaced import load_pool, load_state, run_training
from .synthgen import export, generate
from .tensor_core import mean_kernel

DEFAULT_CURVE_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spil",
        description="Self-paced instance localization over search rank lists.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic benchmark")
    p_synth.add_argument("spec", nargs="?", default=None, help="synth spec file")
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.add_argument("--out", required=True)

    p_train = sub.add_parser("train", help="run the self-paced procedure")
    p_train.add_argument("dataset", help="dataset directory")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--stages", type=int, default=None)
    p_train.add_argument("--tau0", type=float, default=None)
    p_train.add_argument("--topk", type=int, default=None)
    p_train.add_argument("--out", required=True)
    p_train.add_argument(
        "--resume", action="store_true", help="continue from the latest stage state"
    )

    p_eval = sub.add_parser("eval", help="evaluate a trained run")
    p_eval.add_argument("checkpoint", help="checkpoint file; its directory holds the run state")
    p_eval.add_argument("dataset", help="dataset directory")
    p_eval.add_argument("--out", required=True)

    p_few = sub.add_parser("fewshot", help="few-shot detection by search")
    p_few.add_argument("shots", help="shots manifest (JSON lines)")
    p_few.add_argument("corpus", help="corpus dataset directory")
    p_few.add_argument("--config", default=None)
    p_few.add_argument("--seed", type=int, default=None)
    p_few.add_argument("--topk", type=int, default=None)
    p_few.add_argument("--qe", action="store_true", help="run a query-expansion round")
    p_few.add_argument("--qe-limit", type=int, default=None)
    p_few.add_argument("--out", required=True)
    return parser


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec, seed=args.seed)
    dataset = generate(spec)
    os.makedirs(args.out, exist_ok=True)
    export(dataset, args.out)
    print(
        f"synth: wrote {len(dataset.queries)} queries x "
        f"{spec.candidates} candidates to {args.out}"
    )
    return 0


def _bank_for(cfg: RunConfig, store) -> FeatureBank:
    return FeatureBank(
        store,
        cfg.feature_config(),
        y_shorter=cfg.y_shorter,
        y_long_cap=cfg.y_long_cap,
        seg_params=cfg.coattention_params().segmentation,
    )


def cmd_train(args) -> int:
    overrides = {
        "seed": args.seed,
        "stages": args.stages,
        "tau0": args.tau0,
        "topk": args.topk,
    }
    cfg = load_run_config(args.config, overrides)
    dataset = load_dataset(args.dataset)
    if not dataset.queries:
        raise InvalidInputError(f"{args.dataset}: no queries.jsonl records")
    os.makedirs(args.out, exist_ok=True)
    bank = _bank_for(cfg, dataset.store)

    ranklist_path = os.path.join(args.out, "ranklists.jsonl")
    provided = os.path.join(args.dataset, "ranklists.jsonl")
    if args.resume and os.path.exists(ranklist_path):
        ranklists = load_ranklists(ranklist_path)
    elif os.path.exists(provided):
        ranklists = load_ranklists(provided)
        save_ranklists(ranklist_path, ranklists)
    else:
        from .pipeline import build_ranklists

        m = min(cfg.topk, len(dataset.image_ids))
        if cfg.topk > len(dataset.image_ids):
            print(
                f"train: topk {cfg.topk} exceeds corpus size "
                f"{len(dataset.image_ids)}; using the whole corpus"
            )
        ranklists = build_ranklists(bank, dataset.queries, dataset.image_ids, m)
        save_ranklists(ranklist_path, ranklists)

    resume_state = None
    if args.resume:
        states = sorted(glob.glob(os.path.join(args.out, "state_*.json")))
        if not states:
            raise InvalidInputError(f"{args.out}: no stage state to resume from")
        latest = max(states, key=lambda p: int(p.rsplit("_", 1)[1].split(".")[0]))
        stage = int(latest.rsplit("_", 1)[1].split(".")[0])
        resume_state = load_state(
            latest, os.path.join(args.out, f"checkpoint_stage_{stage}.txt")
        )

    with open(os.path.join(args.out, "config_used.cfg"), "w", encoding="ascii") as fh:
        fh.write(cfg.to_text())

    result = run_training(
        dataset.store,
        dataset.queries,
        ranklists,
        cfg.stage_config(),
        cfg.feature_config(),
        cfg.anchor_config(),
        cfg.coattention_params(),
        seed=cfg.seed,
        gt_boxes=dataset.gt_boxes,
        relevance=dataset.relevance,
        out_dir=args.out,
        resume=resume_state,
        bank=bank,
    )
    for record in result.stage_logs:
        miou_txt = "n/a" if record["pool_miou"] is None else f"{record['pool_miou']:.4f}"
        print(
            f"train: stage {record['stage']} tau {record['tau']:.2f} "
            f"updated {record['updated_entries']} pool-miou {miou_txt}"
        )
    print(f"train: checkpoint written to {os.path.join(args.out, 'checkpoint.txt')}")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    run_dir = os.path.dirname(os.path.abspath(args.checkpoint))
    cfg_path = os.path.join(run_dir, "config_used.cfg")
    pool_path = os.path.join(run_dir, "pool.json")
    ranklist_path = os.path.join(run_dir, "ranklists.jsonl")
    for needed in (cfg_path, pool_path, ranklist_path):
        if not os.path.exists(needed):
            raise FileNotFoundError(needed)
    cfg = load_run_config(cfg_path)
    dataset = load_dataset(args.dataset)
    pool = load_pool(pool_path)
    ranklists = load_ranklists(ranklist_path)
    bank = _bank_for(cfg, dataset.store)
    anchor_cfg = cfg.anchor_config()
    queries = {q.query_id: q for q in dataset.queries}
    stride = cfg.feature_stride

    os.makedirs(args.out, exist_ok=True)
    predictions: dict[str, dict[str, list[float]]] = {}
    pred_boxes = []
    gt_boxes = []
    reranked = []
    for rl in ranklists:
        if rl.query_id not in queries:
            raise InvalidInputError(f"rank list {rl.query_id}: unknown query")
        query = queries[rl.query_id]
        entries_by_id = {e.image_id: e for e in pool.get(rl.query_id, [])}
        crops = [bank.crop_features(query.image_id, query.box, cfg.crop_size, cfg.crop_margin)]
        for e in pool.get(rl.query_id, []):
            if e.has_model_box:
                crops.append(
                    bank.crop_features(e.image_id, e.box, cfg.crop_size, cfg.crop_margin)
                )
        kernel = mean_kernel(crops)
        relevant = dataset.relevance.get(rl.query_id, set())
        per_query: dict[str, list[float]] = {}
        features = {}
        for entry in rl.entries:
            pool_entry = entries_by_id.get(entry.image_id)
            if pool_entry is not None and pool_entry.has_model_box:
                box = pool_entry.box
            else:
                probs, boxes = detect_in_frame(
                    bank, entry.image_id, kernel, params, anchor_cfg, cfg.corr_gain
                )
                box = boxes[int(np.argmax(probs))]
            per_query[entry.image_id] = [float(v) for v in box]
            gt = dataset.gt_boxes.get(entry.image_id)
            if entry.image_id in relevant and gt is not None:
                pred_boxes.append(box)
                gt_boxes.append(gt)
            _, (sy, sx) = bank.frame(entry.image_id)
            features[entry.image_id] = pooled_feature(
                bank.features(entry.image_id), scale_box(box, sy, sx), stride
            )
        predictions[rl.query_id] = per_query
        _, (qy, qx) = bank.frame(query.image_id)
        query_feature = pooled_feature(
            bank.features(query.image_id), scale_box(query.box, qy, qx), stride
        )
        reranked.append(rerank(rl, query_feature, features))

    if not gt_boxes:
        raise InvalidInputError("no relevant ground-truth boxes to evaluate")
    miou_value = miou(pred_boxes, gt_boxes)
    curve = recall_iou_curve(pred_boxes, gt_boxes, DEFAULT_CURVE_THRESHOLDS)
    map_before = mean_average_precision(ranklists, dataset.relevance)
    map_after = mean_average_precision(reranked, dataset.relevance)

    save_curve_csv(os.path.join(args.out, "recall_iou.csv"), curve)
    save_ranklists(os.path.join(args.out, "reranked.jsonl"), reranked)
    with open(os.path.join(args.out, "predictions.json"), "w", encoding="utf-8") as fh:
        json.dump(predictions, fh, indent=1)
        fh.write("\n")
    metrics = {
        "miou": miou_value,
        "map_before_rerank": map_before,
        "map_after_rerank": map_after,
        "evaluated_boxes": len(gt_boxes),
        "recall_iou": [[t, r] for t, r in curve],
    }
    with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=1)
        fh.write("\n")
    print(
        f"eval: miou {miou_value:.4f} map {map_before:.4f} -> {map_after:.4f} "
        f"({len(gt_boxes)} boxes)"
    )
    return 0


def _category_gt(dataset, category: str) -> dict[str, list[np.ndarray]]:
    relevant = dataset.relevance.get(category, set())
    out: dict[str, list[np.ndarray]] = {}
    for image_id in relevant:
        gt = dataset.gt_boxes.get(image_id)
        if gt is not None:
            out[image_id] = [gt]
    return out


def _run_fewshot_round(
    tagged, store, bank, corpus_ids, cfg: RunConfig, dataset
) -> tuple[dict, dict[str, float], dict]:
    detections = {}
    ap_by_category = {}
    results = {}
    categories = sorted({t.category for t in tagged})
    for category in categories:
        other = [t for t in tagged if t.category != category]
        dets, result = refine_category(
            category,
            tagged,
            other,
            store,
            bank,
            corpus_ids,
            cfg.stage_config(),
            cfg.feature_config(),
            cfg.anchor_config(),
            cfg.coattention_params(),
            seed=cfg.seed,
        )
        detections[category] = dets.per_image
        results[category] = result
        if dataset.relevance:
            ap_by_category[category] = detection_ap(
                dets.per_image, _category_gt(dataset, category), iou_thresh=0.5
            )
    return detections, ap_by_category, results


def cmd_fewshot(args) -> int:
    overrides = {"seed": args.seed, "topk": args.topk, "qe_limit": args.qe_limit}
    cfg = load_run_config(args.config, overrides)
    shots = load_shots(args.shots)
    if not shots:
        raise InvalidInputError(f"{args.shots}: no shots")
    dataset = load_dataset(args.corpus)
    categories = categories_of(shots)
    if dataset.relevance:
        unknown = [c for c in categories if c not in dataset.relevance]
        if unknown:
            raise InvalidInputError(f"unknown categories in shots: {unknown}")
    for shot in shots:
        if shot.image_id not in dataset.store:
            raise InvalidInputError(f"shot image {shot.image_id!r} not in corpus")

    os.makedirs(args.out, exist_ok=True)
    bank = _bank_for(cfg, dataset.store)
    corpus_ids = list(dataset.image_ids)
    m = min(cfg.topk, len(corpus_ids))

    tagged = propagate_labels(shots, bank, corpus_ids, m)
    detections, ap_by_category, results = _run_fewshot_round(
        tagged, dataset.store, bank, corpus_ids, cfg, dataset
    )
    category_ids = {c: i + 1 for i, c in enumerate(sorted(categories))}
    save_detections_json(
        os.path.join(args.out, "detections.json"), detections, category_ids
    )
    report = {
        "categories": category_ids,
        "ap50": None,
        "ap50_per_category": ap_by_category or None,
        "qe": bool(args.qe),
    }
    if ap_by_category:
        report["ap50"] = float(np.mean(list(ap_by_category.values())))

    if args.qe:
        rng = np.random.default_rng(cfg.seed)
        shots_by_query = {}
        for t in tagged:
            shots_by_query[t.ranklist.query_id] = t.shot
        expanded: list[Shot] = []
        for category in sorted(results):
            snapshots = results[category].pool_snapshots
            stage1 = snapshots[0] if snapshots else {}
            expanded.extend(
                query_expansion(stage1, shots_by_query, cfg.qe_limit, rng)
            )
        if expanded:
            tagged_qe = tagged + propagate_labels(expanded, bank, corpus_ids, m)
        else:
            tagged_qe = tagged
        detections_qe, ap_qe, _ = _run_fewshot_round(
            tagged_qe, dataset.store, bank, corpus_ids, cfg, dataset
        )
        save_detections_json(
            os.path.join(args.out, "detections_qe.json"), detections_qe, category_ids
        )
        report["expanded_shots"] = len(expanded)
        report["ap50_qe_per_category"] = ap_qe or None
        report["ap50_qe"] = float(np.mean(list(ap_qe.values()))) if ap_qe else None

    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
        fh.write("\n")
    ap_txt = "n/a" if report["ap50"] is None else f"{report['ap50']:.4f}"
    line = f"fewshot: ap50 {ap_txt}"
    if args.qe and report.get("ap50_qe") is not None:
        line += f" ap50-qe {report['ap50_qe']:.4f}"
    print(line)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "eval": cmd_eval,
        "fewshot": cmd_fewshot,
    }
    try:
        return handlers[args.command](args)
    except CheckpointVersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SpilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
