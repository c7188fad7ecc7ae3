"""Dataset ingestion and manifest I/O.

On-disk layout produced by the synthetic generator and consumed by the
CLI commands:

    dataset.jsonl    one {"id", "path", "gt_box"} record per image
    queries.jsonl    one {"query_id", "image", "box"} record per query
    relevance.jsonl  one {"query_id", "relevant": [...]} record per query
    ranklists.jsonl  one {"query_id", "entries": [...]} record per query
    shots.jsonl      one {"category", "image", "box"} record per shot
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .evalkit import RankEntry, RankList
from .fileio import load_ppm


@dataclass
class QueryRecord:
    query_id: str
    image_id: str
    box: np.ndarray


class ImageStore:
    """Lazy id -> uint8 image mapping, backed by in-memory arrays and/or
    paths loaded on first access."""

    def __init__(self, images: dict[str, np.ndarray] | None = None):
        self._images: dict[str, np.ndarray] = dict(images or {})
        self._paths: dict[str, str] = {}

    def add_path(self, image_id: str, path: str) -> None:
        self._paths[image_id] = path

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._images or image_id in self._paths

    def ids(self) -> list[str]:
        seen = dict.fromkeys(list(self._images) + list(self._paths))
        return list(seen)

    def __getitem__(self, image_id: str) -> np.ndarray:
        if image_id not in self._images:
            if image_id not in self._paths:
                raise InvalidInputError(f"unknown image id {image_id!r}")
            self._images[image_id] = load_ppm(self._paths[image_id])
        return self._images[image_id]


@dataclass
class Dataset:
    root: str
    store: ImageStore
    image_ids: list[str]
    gt_boxes: dict[str, np.ndarray | None]
    queries: list[QueryRecord] = field(default_factory=list)
    relevance: dict[str, set[str]] = field(default_factory=dict)


def _parse_box(value, where: str) -> np.ndarray | None:
    if value is None:
        return None
    box = np.asarray(value, dtype=np.float64)
    if box.shape != (4,) or not np.all(np.isfinite(box)):
        raise InvalidInputError(f"{where}: malformed box {value!r}")
    if box[0] >= box[2] or box[1] >= box[3]:
        raise InvalidInputError(f"{where}: empty box {value!r}")
    return box


def _read_jsonl(path: str) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"{path}:{lineno}: bad JSON ({exc})") from exc
    return records


def _write_jsonl(path: str, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def load_dataset(root: str) -> Dataset:
    manifest = os.path.join(root, "dataset.jsonl")
    if not os.path.exists(manifest):
        raise FileNotFoundError(manifest)
    store = ImageStore()
    image_ids: list[str] = []
    gt_boxes: dict[str, np.ndarray | None] = {}
    for rec in _read_jsonl(manifest):
        image_id = rec["id"]
        if image_id in gt_boxes:
            raise InvalidInputError(f"{manifest}: duplicate image id {image_id!r}")
        store.add_path(image_id, os.path.join(root, rec["path"]))
        image_ids.append(image_id)
        gt_boxes[image_id] = _parse_box(rec.get("gt_box"), f"image {image_id}")
    dataset = Dataset(root=root, store=store, image_ids=image_ids, gt_boxes=gt_boxes)

    queries_path = os.path.join(root, "queries.jsonl")
    if os.path.exists(queries_path):
        for rec in _read_jsonl(queries_path):
            box = _parse_box(rec["box"], f"query {rec['query_id']}")
            if box is None:
                raise InvalidInputError(f"query {rec['query_id']}: missing box")
            if rec["image"] not in store:
                raise InvalidInputError(
                    f"query {rec['query_id']}: unknown image {rec['image']!r}"
                )
            dataset.queries.append(QueryRecord(rec["query_id"], rec["image"], box))

    relevance_path = os.path.join(root, "relevance.jsonl")
    if os.path.exists(relevance_path):
        for rec in _read_jsonl(relevance_path):
            dataset.relevance[rec["query_id"]] = set(rec["relevant"])
    return dataset


def save_ranklists(path: str, ranklists: list[RankList]) -> None:
    records = []
    for rl in ranklists:
        records.append(
            {
                "query_id": rl.query_id,
                "entries": [
                    {
                        "image_id": e.image_id,
                        "box": [float(v) for v in e.box],
                        "score": float(e.score),
                    }
                    for e in rl.entries
                ],
            }
        )
    _write_jsonl(path, records)


def load_ranklists(path: str) -> list[RankList]:
    lists = []
    for rec in _read_jsonl(path):
        entries = []
        for e in rec["entries"]:
            box = _parse_box(e["box"], f"rank list {rec['query_id']}")
            entries.append(RankEntry(e["image_id"], box, float(e["score"])))
        rl = RankList(query_id=rec["query_id"], entries=entries)
        rl.validate()
        lists.append(rl)
    return lists


def save_shots(path: str, shots) -> None:
    _write_jsonl(
        path,
        [
            {
                "category": s.category,
                "image": s.image_id,
                "box": [float(v) for v in s.box],
            }
            for s in shots
        ],
    )


def load_shots(path: str):
    from .fewshot import Shot

    shots = []
    for rec in _read_jsonl(path):
        box = _parse_box(rec["box"], f"shot for {rec.get('category')!r}")
        if box is None:
            raise InvalidInputError(f"shot for {rec.get('category')!r}: missing box")
        shots.append(Shot(str(rec["category"]), rec["image"], box))
    return shots


def save_detections_json(path: str, detections_by_category, category_ids) -> None:
    """COCO-style flat detection records: image_id, category_id,
    bbox [x, y, w, h] and score."""
    records = []
    for category, per_image in detections_by_category.items():
        cat_id = category_ids[category]
        for image_id in per_image:
            for det in per_image[image_id]:
                b = det.box
                records.append(
                    {
                        "image_id": image_id,
                        "category_id": cat_id,
                        "bbox": [
                            float(b[0]),
                            float(b[1]),
                            float(b[2] - b[0]),
                            float(b[3] - b[1]),
                        ],
                        "score": float(det.score),
                    }
                )
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=1)
        fh.write("\n")
