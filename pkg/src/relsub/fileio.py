"""Text formats shared by several modules: 17-digit float lists, PGM, map CSV."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def format_floats(values) -> str:
    """JSON array text with 17 significant digits per value (bit-exact round trip)."""
    vals = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(vals)):
        raise ValueError("refusing to serialize non-finite values")
    return "[" + ", ".join(format(float(v), ".17g") for v in vals) + "]"


def write_pgm(path, image: np.ndarray, maxval: int = 255, comment: str | None = None) -> None:
    """Plain (P2) PGM of a 2-D array, min-max scaled to ``0..maxval``.

    The scaling is written as a header comment ``# minmax lo hi`` so that
    :func:`read_pgm` can undo it (up to quantization).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    q = np.zeros(img.shape, dtype=np.int64) if span == 0 else np.rint((img - lo) / span * maxval).astype(np.int64)
    lines = ["P2", f"# minmax {lo!r} {hi!r}"]
    if comment:
        lines += [f"# {c}" for c in comment.splitlines()]
    lines.append(f"{img.shape[1]} {img.shape[0]}")
    lines.append(str(maxval))
    lines += [" ".join(str(v) for v in row) for row in q]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    lo = hi = None
    tokens = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 3 and parts[0] == "minmax":
                lo, hi = float(parts[1]), float(parts[2])
            continue
        tokens += line.split()
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4 : 4 + w * h]], dtype=np.float64)
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {data.size}")
    img = data.reshape(h, w)
    if lo is not None:
        img = lo + img / maxval * (hi - lo)
    return img


def write_map_csv(path, scores: np.ndarray) -> None:
    """One CSV row per leading index (trailing dims flattened) plus a ``.json`` shape sidecar."""
    scores = np.asarray(scores, dtype=np.float64)
    path = Path(path)
    rows = scores.reshape(scores.shape[0], -1) if scores.ndim > 1 else scores[None]
    with path.open("w") as fh:
        for row in rows:
            fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")
    path.with_suffix(".json").write_text(json.dumps({"shape": list(scores.shape)}) + "\n")


def read_map_csv(path) -> np.ndarray:
    path = Path(path)
    shape = json.loads(path.with_suffix(".json").read_text())["shape"]
    vals = [float(v) for line in path.read_text().splitlines() if line for v in line.split(",")]
    return np.asarray(vals, dtype=np.float64).reshape(shape)
