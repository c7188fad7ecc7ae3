"""Deterministic synthetic benchmark generator. Each query gets a unique
textured template planted (with jitter) into the query image and into a
fraction of its candidate images, so boxes, masks and relevance labels
are known exactly. Everything derives from per-image child seeds of the
spec seed, so generation is order-independent and reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .datasets import QueryRecord, _write_jsonl
from .errors import InvalidInputError
from .fileio import save_pgm, save_ppm
from .imageops import resize_bilinear

TEMPLATE_KINDS = ("rectangle", "blob", "glyph")


@dataclass(frozen=True)
class Jitter:
    translation: float = 20.0
    scale: tuple[float, float] = (0.8, 1.2)
    brightness: tuple[float, float] = (0.85, 1.15)
    noise_sigma: float = 5.0


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 7
    image_size: int = 64
    queries: int = 20
    candidates: int = 64
    positives_fraction: float = 0.75
    template: str = "rectangle"
    jitter: Jitter = field(default_factory=Jitter)
    distractors: int = 5

    def validate(self) -> None:
        if self.image_size < 16:
            raise InvalidInputError("image_size must be at least 16")
        if self.queries < 1:
            raise InvalidInputError("queries must be at least 1")
        if self.candidates < 2:
            raise InvalidInputError("candidates must be at least 2")
        if not 0.0 < self.positives_fraction <= 1.0:
            raise InvalidInputError("positives_fraction must lie in (0, 1]")
        if self.template not in TEMPLATE_KINDS:
            raise InvalidInputError(f"unknown template kind {self.template!r}")
        if self.jitter.scale[0] > self.jitter.scale[1] or self.jitter.scale[0] <= 0:
            raise InvalidInputError("jitter scale range is invalid")
        if self.jitter.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be non-negative")
        if self.distractors < 0:
            raise InvalidInputError("distractors must be non-negative")
        max_side = 28 * self.jitter.scale[1] + 2
        if max_side >= self.image_size:
            raise InvalidInputError(
                f"template (up to {max_side:.0f}px) does not fit image_size "
                f"{self.image_size}"
            )


@dataclass
class SynthDataset:
    spec: SynthSpec
    images: dict[str, np.ndarray]
    image_ids: list[str]
    queries: list[QueryRecord]
    gt_boxes: dict[str, np.ndarray | None]
    gt_masks: dict[str, np.ndarray | None]
    relevance: dict[str, set[str]]


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb) * 255.0


def _vivid_color(rng: np.random.Generator) -> np.ndarray:
    return _hsv_to_rgb(
        rng.uniform(0.0, 1.0), rng.uniform(0.65, 1.0), rng.uniform(0.55, 1.0)
    )


def _make_template(kind: str, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    th = int(rng.integers(24, 29))
    tw = int(rng.integers(24, 29))
    c1 = _vivid_color(rng)
    c2 = _vivid_color(rng)
    ys, xs = np.indices((th, tw)).astype(np.float64)
    if kind == "rectangle":
        theta = rng.uniform(0.0, np.pi)
        period = rng.uniform(5.0, 9.0)
        phase = np.sin(2.0 * np.pi * (xs * np.cos(theta) + ys * np.sin(theta)) / period)
        rgb = np.where(phase[:, :, None] > 0.0, c1[None, None, :], c2[None, None, :])
        alpha = np.ones((th, tw), dtype=bool)
    elif kind == "blob":
        cy, cx = (th - 1) / 2.0, (tw - 1) / 2.0
        r = np.sqrt(((ys - cy) / (th / 2.0)) ** 2 + ((xs - cx) / (tw / 2.0)) ** 2)
        alpha = r <= 1.0
        t = np.clip(r, 0.0, 1.0)[:, :, None]
        rgb = c1[None, None, :] * (1.0 - t) + c2[None, None, :] * t
    else:  # glyph: a thick plus sign with per-arm colors
        alpha = np.zeros((th, tw), dtype=bool)
        bar = max(th // 3, 4)
        v0 = int(rng.integers(0, tw - bar + 1))
        h0 = int(rng.integers(0, th - bar + 1))
        alpha[:, v0 : v0 + bar] = True
        alpha[h0 : h0 + bar, :] = True
        rgb = np.where(
            (xs >= v0)[:, :, None] & (xs < v0 + bar)[:, :, None],
            c1[None, None, :],
            c2[None, None, :],
        )
    return rgb.astype(np.float64), alpha


def _scaled_template(
    rgb: np.ndarray, alpha: np.ndarray, scale: float
) -> tuple[np.ndarray, np.ndarray]:
    th = max(int(round(rgb.shape[0] * scale)), 4)
    tw = max(int(round(rgb.shape[1] * scale)), 4)
    out_rgb = resize_bilinear(rgb, th, tw)
    out_alpha = resize_bilinear(alpha.astype(np.float64), th, tw) > 0.5
    return out_rgb, out_alpha


def _render_background(rng: np.random.Generator, size: int, distractors: int) -> np.ndarray:
    base = rng.uniform(70.0, 150.0, size=3)
    img = np.tile(base[None, None, :], (size, size, 1))
    for _ in range(distractors):
        shape = rng.integers(0, 2)
        sw = int(rng.integers(6, 21))
        sh = int(rng.integers(6, 21))
        x0 = int(rng.integers(0, max(size - sw, 1)))
        y0 = int(rng.integers(0, max(size - sh, 1)))
        color = rng.uniform(40.0, 210.0, size=3)
        if shape == 0:
            img[y0 : y0 + sh, x0 : x0 + sw] = color
        else:
            ys, xs = np.indices((sh, sw)).astype(np.float64)
            r = ((ys - sh / 2.0) / (sh / 2.0)) ** 2 + ((xs - sw / 2.0) / (sw / 2.0)) ** 2
            patch = img[y0 : y0 + sh, x0 : x0 + sw]
            patch[r <= 1.0] = color
    return img


def _render_image(
    spec: SynthSpec,
    rng: np.random.Generator,
    template: tuple[np.ndarray, np.ndarray] | None,
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    size = spec.image_size
    img = _render_background(rng, size, spec.distractors)
    box = None
    mask = None
    if template is not None:
        jit = spec.jitter
        scale = rng.uniform(*jit.scale)
        brightness = rng.uniform(*jit.brightness)
        rgb, alpha = _scaled_template(*template, scale)
        th, tw = alpha.shape
        max_dx = (size - tw) / 2.0 - 1.0
        max_dy = (size - th) / 2.0 - 1.0
        dx = float(np.clip(rng.uniform(-jit.translation, jit.translation), -max_dx, max_dx))
        dy = float(np.clip(rng.uniform(-jit.translation, jit.translation), -max_dy, max_dy))
        x0 = int(round((size - tw) / 2.0 + dx))
        y0 = int(round((size - th) / 2.0 + dy))
        x0 = min(max(x0, 0), size - tw)
        y0 = min(max(y0, 0), size - th)
        patch = np.clip(rgb * brightness, 0.0, 255.0)
        region = img[y0 : y0 + th, x0 : x0 + tw]
        region[alpha] = patch[alpha]
        box = np.array([x0, y0, x0 + tw, y0 + th], dtype=np.float64)
        mask = np.zeros((size, size), dtype=bool)
        mask[y0 : y0 + th, x0 : x0 + tw] = alpha
    if spec.jitter.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.jitter.noise_sigma, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), box, mask


def generate(spec: SynthSpec) -> SynthDataset:
    """Render the full benchmark: one query image per query plus its
    candidate set, with exact boxes, masks and relevance labels."""
    spec.validate()
    images: dict[str, np.ndarray] = {}
    image_ids: list[str] = []
    queries: list[QueryRecord] = []
    gt_boxes: dict[str, np.ndarray | None] = {}
    gt_masks: dict[str, np.ndarray | None] = {}
    relevance: dict[str, set[str]] = {}
    n_pos = int(round(spec.positives_fraction * spec.candidates))
    n_pos = min(max(n_pos, 1), spec.candidates)
    for qi in range(spec.queries):
        qrng = np.random.default_rng([spec.seed, qi, 0xA])
        template = _make_template(spec.template, qrng)
        qid = f"q{qi:02d}"
        img, box, mask = _render_image(
            spec, np.random.default_rng([spec.seed, qi, 0xB]), template
        )
        images[qid] = img
        image_ids.append(qid)
        gt_boxes[qid] = box
        gt_masks[qid] = mask
        queries.append(QueryRecord(qid, qid, box.copy()))
        relevant = {qid}
        pos_slots = set(
            np.random.default_rng([spec.seed, qi, 0xC])
            .permutation(spec.candidates)[:n_pos]
            .tolist()
        )
        for ci in range(spec.candidates):
            cid = f"{qid}_c{ci:03d}"
            planted = template if ci in pos_slots else None
            img, box, mask = _render_image(
                spec, np.random.default_rng([spec.seed, qi, 0xD, ci]), planted
            )
            images[cid] = img
            image_ids.append(cid)
            gt_boxes[cid] = box
            gt_masks[cid] = mask
            if planted is not None:
                relevant.add(cid)
        relevance[qid] = relevant
    return SynthDataset(spec, images, image_ids, queries, gt_boxes, gt_masks, relevance)


def fewshot_shots(dataset: SynthDataset, per_category: int = 3):
    """Shots for detection-by-search: each query id becomes a category;
    the query image plus its first relevant candidates supply the boxes."""
    from .fewshot import Shot

    shots = []
    for q in dataset.queries:
        picked = [q.image_id]
        for cid in sorted(dataset.relevance[q.query_id]):
            if cid != q.image_id and len(picked) < per_category:
                picked.append(cid)
        for image_id in picked:
            box = dataset.gt_boxes[image_id]
            shots.append(Shot(q.query_id, image_id, box.copy()))
    return shots


def export(dataset: SynthDataset, out_dir: str, shots_per_category: int = 3) -> None:
    """Write images as PPM plus the manifests described in `datasets`."""
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    records = []
    for image_id in dataset.image_ids:
        rel_path = os.path.join("images", f"{image_id}.ppm")
        save_ppm(os.path.join(out_dir, rel_path), dataset.images[image_id])
        box = dataset.gt_boxes[image_id]
        records.append(
            {
                "id": image_id,
                "path": rel_path,
                "gt_box": None if box is None else [float(v) for v in box],
            }
        )
        mask = dataset.gt_masks[image_id]
        if mask is not None:
            save_pgm(os.path.join(mask_dir, f"{image_id}.pgm"), mask)
    _write_jsonl(os.path.join(out_dir, "dataset.jsonl"), records)
    _write_jsonl(
        os.path.join(out_dir, "queries.jsonl"),
        [
            {
                "query_id": q.query_id,
                "image": q.image_id,
                "box": [float(v) for v in q.box],
            }
            for q in dataset.queries
        ],
    )
    _write_jsonl(
        os.path.join(out_dir, "relevance.jsonl"),
        [
            {"query_id": qid, "relevant": sorted(dataset.relevance[qid])}
            for qid in sorted(dataset.relevance)
        ],
    )
    from .datasets import save_shots

    save_shots(
        os.path.join(out_dir, "shots.jsonl"), fewshot_shots(dataset, shots_per_category)
    )
