"""Explanation quality metrics.

Patch flipping removes image patches from most to least relevant and tracks
the (rectified) class output; the area under that curve (AUPC) is low when
the explanation points at what the model actually uses. The remaining
metrics summarise joint pixel-concept explanations and concept detection.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from relsub import attribution as attr
from relsub import netcore
from relsub import vlayer
from relsub.netcore import ShapeError
from relsub.subspace import ActivationContextDataset, drsa_objective
from relsub.vlayer import JointExplanation, SubspaceBasis

INPAINTERS = ("zero", "neighborhood_mean")
AUPC_RULES = ("trapezoid", "difference")


# --------------------------------------------------------------------------
# patch flipping


@dataclass
class FlipOptions:
    patch_size: int = 4
    # patches removed per step; "quadratic" removes tau^2 patches at step tau
    flips_per_step: int | str = 1
    inpainter: str = "neighborhood_mean"
    rectify_output: bool = True
    # "trapezoid": sum w * (f_prev + f_cur) / 2, the area under the flipping curve.
    # "difference": sum w * (f_prev - f_cur) / 2, the weighted-drop reading.
    aupc_rule: str = "trapezoid"

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.flips_per_step != "quadratic" and not (isinstance(self.flips_per_step, int)
                                                        and self.flips_per_step >= 1):
            raise ValueError("flips_per_step must be a positive integer or 'quadratic'")
        if self.inpainter not in INPAINTERS:
            raise ValueError(f"unknown inpainter {self.inpainter!r}; expected one of {INPAINTERS}")
        if self.aupc_rule not in AUPC_RULES:
            raise ValueError(f"unknown AUPC rule {self.aupc_rule!r}; expected one of {AUPC_RULES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rectification"] = "applied to each output before differencing" if self.rectify_output else "off"
        if self.inpainter == "neighborhood_mean":
            d["inpainter_note"] = "4-neighbour mean fill used in place of TELEA"
        return d


@dataclass
class FlipReport:
    outputs: np.ndarray  # f(x^(0)) .. f(x^(T))
    weights: np.ndarray  # w(1) .. w(T)
    aupc: float
    options: FlipOptions
    removed: list = field(default_factory=list, repr=False)  # patch indices removed at each step

    @property
    def fractions(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.weights)])

    def to_dict(self) -> dict:
        return {
            "steps": self.outputs.tolist(),
            "weights": self.weights.tolist(),
            "fraction_removed": self.fractions.tolist(),
            "aupc": float(self.aupc),
            "options": self.options.to_dict(),
        }

    def save(self, path) -> None:
        """Write ``<path>.json`` and the curve as ``<path>.csv``."""
        path = Path(path)
        path.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        write_curve_csv(path.with_suffix(".csv"), self.fractions, self.outputs)


def write_curve_csv(path, fractions, outputs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "fraction_removed", "output"])
        for i, (fr, out) in enumerate(zip(fractions, outputs)):
            w.writerow([i, format(float(fr), ".17g"), format(float(out), ".17g")])


def aupc_value(outputs, weights, rule: str = "trapezoid") -> float:
    f = np.asarray(outputs, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if rule == "trapezoid":
        return float(np.sum(w * (f[:-1] + f[1:]) / 2))
    if rule == "difference":
        return float(np.sum(w * (f[:-1] - f[1:]) / 2))
    raise ValueError(f"unknown AUPC rule {rule!r}")


def _grid(shape, patch_size: int):
    if len(shape) == 3:
        _, h, w = shape
    elif len(shape) == 2:
        h, w = shape
    else:
        raise ShapeError(f"patch flipping needs an image input, got shape {tuple(shape)}")
    if h % patch_size or w % patch_size:
        raise ShapeError(f"patch size {patch_size} does not tile a {h}x{w} image")
    return h // patch_size, w // patch_size


def patch_relevance(heatmap: np.ndarray, patch_size: int) -> np.ndarray:
    """Sum of the heatmap over each patch (and all channels), row-major patch order."""
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.ndim == 3:
        hm = hm.sum(axis=0)
    gh, gw = _grid(hm.shape, patch_size)
    return hm.reshape(gh, patch_size, gw, patch_size).sum(axis=(1, 3)).ravel()


def removal_order(heatmap: np.ndarray, patch_size: int) -> np.ndarray:
    """Patch indices from most to least relevant; ties go to the lowest index."""
    return np.argsort(-patch_relevance(heatmap, patch_size), kind="stable")


def _pixel_mask(patches, grid, patch_size: int) -> np.ndarray:
    m = np.zeros(grid[0] * grid[1], dtype=bool)
    m[list(patches)] = True
    return np.kron(m.reshape(grid), np.ones((patch_size, patch_size), dtype=bool)).astype(bool)


def inpaint_neighborhood_mean(image: np.ndarray, removed: np.ndarray) -> np.ndarray:
    """Fill removed pixels inward from their known 4-neighbours.

    Each pass sets every unknown pixel that touches a known one to the mean
    of its known neighbours, then marks it known; passes repeat until
    nothing changes. Pixels that never touch known ones become 0. Channels
    are filled independently.
    """
    img = np.array(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    for ch in img:
        known = ~removed
        ch[~known] = 0.0
        while True:
            vals = np.pad(np.where(known, ch, 0.0), 1)
            cnt = np.pad(known.astype(np.float64), 1)
            nb_sum = vals[:-2, 1:-1] + vals[2:, 1:-1] + vals[1:-1, :-2] + vals[1:-1, 2:]
            nb_cnt = cnt[:-2, 1:-1] + cnt[2:, 1:-1] + cnt[1:-1, :-2] + cnt[1:-1, 2:]
            front = ~known & (nb_cnt > 0)
            if not front.any():
                break
            ch[front] = nb_sum[front] / nb_cnt[front]
            known = known | front
    return img[0] if squeeze else img


def inpaint(image: np.ndarray, removed: np.ndarray, method: str) -> np.ndarray:
    if method == "zero":
        out = np.array(image, dtype=np.float64)
        out[..., removed] = 0.0
        return out
    if method == "neighborhood_mean":
        return inpaint_neighborhood_mean(image, removed)
    raise ValueError(f"unknown inpainter {method!r}")


def _schedule(n_patches: int, opts: FlipOptions) -> list:
    """Number of patches each component removes after step tau = 1, 2, ..."""
    counts, tau, total = [], 0, 0
    while total < n_patches:
        tau += 1
        total += tau * tau if opts.flips_per_step == "quadratic" else opts.flips_per_step
        counts.append(min(total, n_patches))
    return counts


def _run_flip(model, x, class_index, orders, opts: FlipOptions) -> FlipReport:
    x = np.asarray(x, dtype=np.float64)
    grid = _grid(x.shape, opts.patch_size)
    n = grid[0] * grid[1]
    removed, steps, seen = [], [], set()
    for count in _schedule(n, opts):
        union = set()
        for order in orders:
            union.update(int(p) for p in order[:count])
        new = sorted(union - seen)
        if not new:  # every component re-picked removed patches: no new state
            continue
        seen |= union
        steps.append(new)
        removed.append(sorted(seen))
    images = [x] + [inpaint(x, _pixel_mask(r, grid, opts.patch_size), opts.inpainter) for r in removed]
    f = netcore.forward_batch(model, np.stack(images))[:, class_index] if isinstance(model, netcore.Model) \
        else attr._logits(model, np.stack(images))[:, class_index]
    if opts.rectify_output:
        f = np.maximum(f, 0.0)
    w = np.array([len(s) for s in steps], dtype=np.float64) / n
    return FlipReport(outputs=f, weights=w, aupc=aupc_value(f, w, opts.aupc_rule), options=opts, removed=steps)


def patch_flip(model, x, class_index: int, heatmap: np.ndarray, opts: FlipOptions | None = None) -> FlipReport:
    opts = opts or FlipOptions()
    x = np.asarray(x, dtype=np.float64)
    if np.shape(heatmap) != x.shape:
        raise ShapeError(f"heatmap shape {np.shape(heatmap)} does not match input {x.shape}")
    return _run_flip(model, x, class_index, [removal_order(heatmap, opts.patch_size)], opts)


def patch_flip_multi(model, x, class_index: int, joint, opts: FlipOptions | None = None) -> FlipReport:
    """Parallel flipping, one removal order per component, removing their union."""
    opts = opts or FlipOptions()
    maps = joint.maps if isinstance(joint, JointExplanation) else np.asarray(joint)
    x = np.asarray(x, dtype=np.float64)
    if maps.ndim < 2 or maps.shape[1:] != x.shape:
        raise ShapeError(f"component maps {maps.shape} do not match input {x.shape}")
    return _run_flip(model, x, class_index, [removal_order(m, opts.patch_size) for m in maps], opts)


# --------------------------------------------------------------------------
# summary metrics


def class_balanced_mean(values, classes) -> float:
    """Mean within each class, then mean over classes."""
    values = np.asarray(values, dtype=np.float64)
    classes = np.asarray(classes)
    return float(np.mean([values[classes == c].mean() for c in np.unique(classes)]))


def total_relevance_metric(model, inputs, class_indices, layer_index: int, U_sub,
                           cfg: attr.AttributionConfig) -> float:
    """Mean over inputs of the summed input relevance flowing through span(U_sub).

    IG and Shapley use the closed-form shortcut instead of a step-2 attribution.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    cls = np.broadcast_to(np.asarray(class_indices), (len(inputs),))
    U = np.asarray(U_sub, dtype=np.float64).reshape(model.shapes[layer_index + 1][0], -1)
    if U.shape[1] == 0:
        return 0.0
    vals = []
    for x, c in zip(inputs, cls):
        if cfg.method in ("LRP", "GradInput"):
            vals.append(vlayer.subspace_explain(model, x, int(c), layer_index, U, cfg).sum())
        else:
            vals.append(vlayer.total_relevance_shortcut(model, x, int(c), layer_index, U, cfg))
    return float(np.mean(vals))


def _maps(joint) -> np.ndarray:
    maps = joint.maps if isinstance(joint, JointExplanation) else np.asarray(joint, dtype=np.float64)
    return maps.reshape(maps.shape[0], -1)


def _mean_over(joints, fn) -> float:
    if isinstance(joints, (list, tuple)):
        return float(np.mean([fn(_maps(j)) for j in joints]))
    return float(fn(_maps(joints)))


def separability(joints) -> float:
    """E[ sum_p max_k R_pk - max_k sum_p R_pk ] over one or several explanations."""
    return _mean_over(joints, lambda R: R.max(axis=0).sum() - R.sum(axis=1).max())


def peakness(joints) -> float:
    """E[ sum_k max_p R_pk ]."""
    return _mean_over(joints, lambda R: R.max(axis=1).sum())


def quantile(values, p: float) -> float:
    """Linear interpolation between order statistics at position (n-1)p."""
    return float(np.quantile(np.asarray(values, dtype=np.float64), p, method="linear"))


def class_subspace_match(per_class_scores: dict, alpha: float = 0.75, beta: float = 0.85):
    """Subspace k matches class w iff Q_alpha[R_k | w] > Q_beta[R_k over all classes].

    ``per_class_scores`` maps each class to an (n_w, K) array of subspace
    scores. Returns ``(classes, table)`` with a boolean (n_classes, K) table.
    """
    if not alpha < beta:
        raise ValueError(f"need alpha < beta, got alpha={alpha}, beta={beta}")
    classes = sorted(per_class_scores)
    blocks = []
    for c in classes:
        s = np.asarray(per_class_scores[c], dtype=np.float64)
        if s.ndim == 1:
            s = s[:, None]
        if len(s) == 0:
            raise ValueError(f"class {c!r} has no samples")
        blocks.append(s)
    overall = np.concatenate(blocks)
    thr = np.quantile(overall, beta, axis=0, method="linear")
    table = np.stack([np.quantile(s, alpha, axis=0, method="linear") > thr for s in blocks])
    return classes, table


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied scores get half credit."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative label")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def prototypes(pool, basis: SubspaceBasis, ds: ActivationContextDataset, n: int, N: int = 1000,
               seed: int = 0, q: float = 0.5, delta: float = 1e-12):
    """Best of ``N`` random size-``n`` subsets of ``pool`` under the DRSA objective.

    Members are matched to dataset samples by image id. Returns the winning
    ids (sorted) and its objective; exact ties go to the earliest draw.
    """
    pool = np.unique(np.asarray(pool))
    if n > len(pool):
        raise ValueError(f"subset size {n} exceeds the pool of {len(pool)} ids")
    if n < 1 or N < 1:
        raise ValueError("need n >= 1 and N >= 1")
    rng = np.random.default_rng(seed)
    best, best_j = None, -np.inf
    for _ in range(N):
        ids = np.sort(rng.choice(pool, size=n, replace=False))
        members = np.isin(ds.image_ids, ids)
        if not members.any():
            continue
        j = drsa_objective(basis.matrix, ds.subset(np.flatnonzero(members)), basis.block_dims, q, delta)
        if j > best_j:
            best, best_j = ids, j
    if best is None:
        raise ValueError("no candidate subset has samples in the dataset")
    return best, float(best_j)
