"""Readers and writers for the on-disk formats: PPM/PGM images, the
plain-text feature-map container, debug label grids and curve CSVs."""

from __future__ import annotations

import os

import numpy as np

from .errors import InvalidInputError


def save_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an (h, w, 3) uint8 array as a binary P6 PPM."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError(f"expected (h, w, 3) image, got shape {arr.shape}")
    arr = arr.astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def save_pgm(path: str | os.PathLike, mask: np.ndarray) -> None:
    """Write a binary mask as a P5 PGM with values 0 / 255."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise InvalidInputError(f"expected 2-d mask, got shape {arr.shape}")
    data = np.where(arr.astype(bool), 255, 0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_pnm_header(fh) -> tuple[bytes, int, int, int]:
    magic = fh.read(2)
    fields: list[int] = []
    while len(fields) < 3:
        ch = fh.read(1)
        if not ch:
            raise InvalidInputError("truncated PNM header")
        if ch.isspace():
            continue
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        tok = ch
        while True:
            ch = fh.read(1)
            if not ch or ch.isspace():
                break
            tok += ch
        fields.append(int(tok))
    return magic, fields[0], fields[1], fields[2]


def load_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, w, h, maxval = _read_pnm_header(fh)
        if magic != b"P6" or maxval != 255:
            raise InvalidInputError(f"{path}: not an 8-bit P6 PPM")
        data = fh.read(w * h * 3)
    if len(data) != w * h * 3:
        raise InvalidInputError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def load_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, w, h, maxval = _read_pnm_header(fh)
        if magic != b"P5" or maxval != 255:
            raise InvalidInputError(f"{path}: not an 8-bit P5 PGM")
        data = fh.read(w * h)
    if len(data) != w * h:
        raise InvalidInputError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def save_feature_map(path: str | os.PathLike, fm: np.ndarray) -> None:
    """Write a feature map as a text container: "h w c" header then
    h*w*c whitespace-separated reals in (h, w, c) row-major order."""
    arr = np.asarray(fm, dtype=np.float64)
    if arr.ndim != 3:
        raise InvalidInputError(f"expected (h, w, c) feature map, got shape {arr.shape}")
    h, w, c = arr.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{h} {w} {c}\n")
        flat = arr.reshape(-1)
        for start in range(0, flat.size, c):
            fh.write(" ".join(repr(float(v)) for v in flat[start : start + c]))
            fh.write("\n")


def load_feature_map(path: str | os.PathLike) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise InvalidInputError(f"{path}: malformed feature-map header")
        h, w, c = (int(v) for v in header)
        values = fh.read().split()
    if h < 1 or w < 1 or c < 1:
        raise InvalidInputError(f"{path}: non-positive dimensions in header")
    if len(values) != h * w * c:
        raise InvalidInputError(
            f"{path}: expected {h * w * c} values, found {len(values)}"
        )
    arr = np.array([float(v) for v in values], dtype=np.float64).reshape(h, w, c)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{path}: non-finite feature values")
    return arr


def save_label_grid(path: str | os.PathLike, labels: np.ndarray) -> None:
    """Write segment labels as a text grid, one row of ids per line."""
    arr = np.asarray(labels)
    with open(path, "w", encoding="ascii") as fh:
        for row in arr:
            fh.write(" ".join(str(int(v)) for v in row))
            fh.write("\n")


def save_curve_csv(path: str | os.PathLike, points: list[tuple[float, float]]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("threshold,recall\n")
        for t, r in points:
            fh.write(f"{repr(float(t))},{repr(float(r))}\n")
