"""Run configuration: a flat key = value text format aggregating every
tunable of the pipeline, validated against the owning module's rules at
load time. Unknown keys and malformed values fail with the key named.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .coattention import CoattentionParams, SegmentationParams
from .errors import InvalidInputError
from .localizer import AnchorConfig
from .selfpaced import StageConfig
from .synthgen import Jitter, SynthSpec
from .tensor_core import FeatureProviderConfig


def parse_kv_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidInputError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _parse_bool(value: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _parse_tuple(value: str, elem):
    parts = [p for p in value.replace(",", " ").split() if p]
    return tuple(elem(p) for p in parts)


@dataclass
class RunConfig:
    seed: int = 0
    topk: int = 128
    stages: int = 4
    stage0_iters: tuple[int, ...] = (600, 150)
    later_iters: tuple[int, ...] = (350, 150)
    lrs: tuple[float, ...] = (1e-3, 1e-4)
    positives: int = 5
    negatives: int = 5
    contrastive: bool = True
    crop_size: int = 64
    crop_margin: float = 1.5
    y_shorter: int = 128
    y_long_cap: int = 256
    swap_prob: float = 0.5
    tau0: float = 0.99
    tau_step: float = 0.1
    tau_floor: float = 0.5
    corr_gain: float = 64.0
    feature_mode: str = "patch-stats"
    feature_seed: int = 0
    feature_stride: int = 4
    feature_channels: int = 11
    feature_dir: str = ""
    anchor_sizes: tuple[float, ...] = (48.0,)
    anchor_ratios: tuple[float, ...] = (1.0,)
    iou_pos: float = 0.5
    iou_neg: float = 0.3
    nms_iou: float = 0.5
    seg_scale: float = 300.0
    seg_min_size: int = 20
    seg_sigma: float = 0.8
    mask_threshold: float = 0.1
    qe_limit: int = 10

    def stage_config(self) -> StageConfig:
        if len(self.stage0_iters) != len(self.lrs) or len(self.later_iters) != len(self.lrs):
            raise InvalidInputError(
                "stage0_iters, later_iters and lrs must have matching lengths"
            )
        cfg = StageConfig(
            stages=self.stages,
            stage0_schedule=tuple(zip(self.stage0_iters, self.lrs)),
            later_schedule=tuple(zip(self.later_iters, self.lrs)),
            positives=self.positives,
            negatives=self.negatives,
            crop_size=self.crop_size,
            crop_margin=self.crop_margin,
            y_shorter=self.y_shorter,
            y_long_cap=self.y_long_cap,
            swap_prob=self.swap_prob,
            contrastive=self.contrastive,
            tau0=self.tau0,
            tau_step=self.tau_step,
            tau_floor=self.tau_floor,
            corr_gain=self.corr_gain,
            iou_pos=self.iou_pos,
            iou_neg=self.iou_neg,
        )
        cfg.validate()
        return cfg

    def feature_config(self) -> FeatureProviderConfig:
        cfg = FeatureProviderConfig(
            mode=self.feature_mode,
            seed=self.feature_seed,
            stride=self.feature_stride,
            out_channels=self.feature_channels,
            feature_dir=self.feature_dir or None,
        )
        cfg.validate()
        return cfg

    def anchor_config(self) -> AnchorConfig:
        cfg = AnchorConfig(
            sizes=self.anchor_sizes, ratios=self.anchor_ratios, stride=self.feature_stride
        )
        cfg.validate()
        return cfg

    def coattention_params(self) -> CoattentionParams:
        params = CoattentionParams(
            segmentation=SegmentationParams(
                scale=self.seg_scale, min_size=self.seg_min_size, sigma=self.seg_sigma
            ),
            threshold=self.mask_threshold,
        )
        params.validate()
        return params

    def validate(self) -> None:
        if self.topk < 1:
            raise InvalidInputError("topk must be at least 1")
        if self.qe_limit < 1:
            raise InvalidInputError("qe_limit must be at least 1")
        if not 0.0 < self.nms_iou <= 1.0:
            raise InvalidInputError("nms_iou must lie in (0, 1]")
        self.stage_config()
        self.feature_config()
        self.anchor_config()
        self.coattention_params()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(cls, raw: dict[str, str]):
    values = {}
    parsers = {
        int: int,
        float: float,
        str: str,
        bool: _parse_bool,
        "tuple_int": lambda v: _parse_tuple(v, int),
        "tuple_float": lambda v: _parse_tuple(v, float),
    }
    by_name = {f.name: f for f in fields(cls)}
    for key, value in raw.items():
        if key not in by_name:
            raise InvalidInputError(f"unknown config key {key!r}")
        f = by_name[key]
        default = f.default if f.default is not None else None
        try:
            if f.type.startswith("tuple[int"):
                values[key] = parsers["tuple_int"](value)
            elif f.type.startswith("tuple[float"):
                values[key] = parsers["tuple_float"](value)
            elif f.type == "bool" or isinstance(default, bool):
                values[key] = _parse_bool(value)
            elif f.type == "int" or isinstance(default, int):
                values[key] = int(value)
            elif f.type == "float" or isinstance(default, float):
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError as exc:
            raise InvalidInputError(f"config key {key!r}: {exc}") from exc
    return values


def load_run_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """RunConfig from an optional file plus programmatic overrides; every
    field is validated and errors name the offending key."""
    values = _coerce(RunConfig, parse_kv_file(path)) if path else {}
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


_SYNTH_KEYS = {
    "seed": int,
    "image_size": int,
    "queries": int,
    "candidates": int,
    "positives_fraction": float,
    "template": str,
    "jitter_translation": float,
    "jitter_scale": "range",
    "jitter_brightness": "range",
    "noise_sigma": float,
    "distractors": int,
}


def load_synth_spec(path: str | None, seed: int | None = None) -> SynthSpec:
    raw = parse_kv_file(path) if path else {}
    jitter_kwargs = {}
    spec_kwargs = {}
    for key, value in raw.items():
        if key not in _SYNTH_KEYS:
            raise InvalidInputError(f"unknown synth spec key {key!r}")
        kind = _SYNTH_KEYS[key]
        try:
            if kind == "range":
                parsed = _parse_tuple(value, float)
                if len(parsed) != 2:
                    raise ValueError("expected two values")
            else:
                parsed = kind(value)
        except ValueError as exc:
            raise InvalidInputError(f"synth spec key {key!r}: {exc}") from exc
        if key == "jitter_translation":
            jitter_kwargs["translation"] = parsed
        elif key == "jitter_scale":
            jitter_kwargs["scale"] = parsed
        elif key == "jitter_brightness":
            jitter_kwargs["brightness"] = parsed
        elif key == "noise_sigma":
            jitter_kwargs["noise_sigma"] = parsed
        else:
            spec_kwargs[key] = parsed
    if seed is not None:
        spec_kwargs["seed"] = seed
    spec = SynthSpec(jitter=Jitter(**jitter_kwargs), **spec_kwargs)
    spec.validate()
    return spec
