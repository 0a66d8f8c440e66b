"""Attribution catalog: Gradient x Input, Integrated Gradients, Shapley, LRP.

Everything here works on :class:`relsub.netcore.Model` objects. The
perturbation methods (IG, Shapley) also accept a :class:`FunctionModel`,
a thin wrapper around arbitrary batched numpy functions, which is handy
for closed-form test functions such as ``x1 * x2`` that no ReLU network
represents exactly.

Layer indices follow the model's layer list. "Boundary" ``b`` is the input
of layer ``b``; boundary ``len(model)`` is the logits. The activations
*at layer* ``L`` are that layer's outputs, i.e. boundary ``L + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from relsub import netcore
from relsub._parallel import ordered_map
from relsub.fileio import read_map_csv, write_map_csv, write_pgm
from relsub.netcore import Model, ShapeError, _safe_div

METHODS = ("GradInput", "IntegratedGradients", "ShapleyExact", "ShapleySampling", "LRP")
MAX_EXACT_GROUPS = 14


class RuleError(ValueError):
    """Invalid or missing LRP rule assignment."""


# --------------------------------------------------------------------------
# LRP rules


@dataclass(frozen=True)
class LRP0:
    name = "LRP0"


@dataclass(frozen=True)
class LRPEps:
    eps: float = 1e-6
    name = "LRPEps"

    def __post_init__(self):
        if not self.eps > 0:
            raise RuleError(f"LRP-eps needs eps > 0, got {self.eps}")


@dataclass(frozen=True)
class LRPGamma:
    gamma: float = 0.25
    name = "LRPGamma"

    def __post_init__(self):
        if not self.gamma >= 0:
            raise RuleError(f"LRP-gamma needs gamma >= 0, got {self.gamma}")


@dataclass(frozen=True)
class GenLRPGamma:
    """LRP-gamma for sign-changing inputs: favours contributions agreeing with the sign of z."""

    gamma: float = 0.25
    name = "GenLRPGamma"

    def __post_init__(self):
        if not self.gamma >= 0:
            raise RuleError(f"generalized LRP-gamma needs gamma >= 0, got {self.gamma}")


@dataclass(frozen=True)
class ZB:
    """z^B rule for the input layer with box constraints ``low <= x <= high``."""

    low: float = -1.0
    high: float = 1.0
    name = "ZB"

    def __post_init__(self):
        if not self.low <= 0 <= self.high:
            raise RuleError(f"z^B bounds must satisfy low <= 0 <= high, got ({self.low}, {self.high})")


_RULES = {cls.name: cls for cls in (LRP0, LRPEps, LRPGamma, GenLRPGamma, ZB)}


def rule_from_dict(d: dict | str):
    if isinstance(d, str):
        d = {"rule": d}
    d = dict(d)
    name = d.pop("rule", None)
    if name not in _RULES:
        raise RuleError(f"unknown LRP rule {name!r}; expected one of {sorted(_RULES)}")
    return _RULES[name](**d)


def rule_to_dict(rule) -> dict:
    out = {"rule": rule.name}
    for key in ("eps", "gamma", "low", "high"):
        if hasattr(rule, key):
            out[key] = getattr(rule, key)
    return out


# --------------------------------------------------------------------------
# configuration


@dataclass
class AttributionConfig:
    method: str = "LRP"
    ig_steps: int = 100
    shapley_permutations: int = 25
    patch_size: int = 4
    seed: int = 0
    # layer index -> rule; None means LRP-0 on every parameterized layer
    lrp_rules: dict | None = None
    eps: float = 1e-6
    threads: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attribution method {self.method!r}; expected one of {METHODS}")
        if self.ig_steps < 1:
            raise ValueError("ig_steps must be >= 1")
        if self.shapley_permutations < 1:
            raise ValueError("shapley_permutations must be >= 1")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.lrp_rules is not None:
            self.lrp_rules = {
                int(k): (v if hasattr(v, "name") else rule_from_dict(v))
                for k, v in self.lrp_rules.items()
            }

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "ig_steps": self.ig_steps,
            "shapley_permutations": self.shapley_permutations,
            "patch_size": self.patch_size,
            "seed": self.seed,
            "lrp_rules": None if self.lrp_rules is None
            else {str(k): rule_to_dict(r) for k, r in sorted(self.lrp_rules.items())},
            "eps": self.eps,
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributionConfig":
        return cls(**d)


def resolve_rules(model: Model, cfg: AttributionConfig | None) -> dict:
    """Rule per parameterized layer, validated against the model."""
    param_layers = [i for i, layer in enumerate(model.layers) if layer.has_params]
    if cfg is None or cfg.lrp_rules is None:
        return {i: LRP0() for i in param_layers}
    rules = dict(cfg.lrp_rules)
    missing = [i for i in param_layers if i not in rules]
    if missing:
        raise RuleError(f"no LRP rule assigned to parameterized layer(s) {missing}")
    for i, rule in rules.items():
        if not 0 <= i < len(model.layers):
            raise RuleError(f"LRP rule for layer {i}, but the model has {len(model.layers)} layers")
        if not model.layers[i].has_params and not isinstance(rule, LRP0):
            raise RuleError(f"layer {i} ({model.layers[i].kind}) has no parameters to apply {rule.name} to")
        if isinstance(rule, ZB) and i != 0:
            raise RuleError(f"z^B rule is only valid on the input layer, not layer {i}")
    return rules


# --------------------------------------------------------------------------
# black-box functions


@dataclass
class FunctionModel:
    """Batched function ``(B, *input_shape) -> (B, num_classes)`` with an optional gradient.

    ``grad_fn(X, class_index)`` must return ``(B, *input_shape)``.
    """

    fn: Callable
    input_shape: tuple
    num_classes: int = 1
    grad_fn: Callable | None = None

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)


def _logits(model, X: np.ndarray) -> np.ndarray:
    if isinstance(model, Model):
        return netcore.forward_batch(model, X)
    out = np.asarray(model.fn(X), dtype=np.float64)
    return out.reshape(len(X), -1)


def _input_grads(model, X: np.ndarray, class_index: int) -> np.ndarray:
    if isinstance(model, Model):
        _, inputs = netcore.forward_batch(model, X, record=True)
        g = np.zeros((len(X), model.num_classes))
        g[:, class_index] = 1.0
        return netcore.vjp_batch(model, inputs, g)
    if model.grad_fn is None:
        raise TypeError("this FunctionModel has no gradient; pass grad_fn")
    return np.asarray(model.grad_fn(X, class_index), dtype=np.float64)


def _prepare(model, x, class_index):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(model.input_shape):
        raise ShapeError(f"input shape {x.shape} does not match model input {tuple(model.input_shape)}")
    if not 0 <= class_index < model.num_classes:
        raise IndexError(f"class_index {class_index} out of range [0, {model.num_classes})")
    return x, int(class_index)


# --------------------------------------------------------------------------
# gradient methods


def grad_x_input(model, x, class_index: int) -> np.ndarray:
    x, class_index = _prepare(model, x, class_index)
    return _input_grads(model, x[None], class_index)[0] * x


def _midpoint_path(point: np.ndarray, steps: int, lo: int, hi: int) -> np.ndarray:
    t = (np.arange(lo, hi) + 0.5) / steps
    return t.reshape((-1,) + (1,) * point.ndim) * point[None]


def _path_mean_grad(grad_fn, point: np.ndarray, steps: int, chunk: int = 128) -> np.ndarray:
    """Midpoint-rule average of ``grad_fn`` along the straight line from 0 to ``point``."""
    total = np.zeros(point.shape)
    for lo in range(0, steps, chunk):
        hi = min(steps, lo + chunk)
        total += grad_fn(_midpoint_path(point, steps, lo, hi)).sum(axis=0)
    return total / steps


def integrated_gradients(model, x, class_index: int, cfg: AttributionConfig | None = None) -> np.ndarray:
    """IG with the all-zeros reference and the midpoint rule over ``cfg.ig_steps`` points."""
    cfg = cfg or AttributionConfig(method="IntegratedGradients")
    x, class_index = _prepare(model, x, class_index)
    return x * _path_mean_grad(lambda X: _input_grads(model, X, class_index), x, cfg.ig_steps)


# --------------------------------------------------------------------------
# Shapley values


def _coalition_weights(n: int) -> np.ndarray:
    """Weight |S|!(n-1-|S|)!/n! for coalition sizes 0..n-1."""
    return np.array([math.factorial(s) * math.factorial(n - 1 - s) / math.factorial(n) for s in range(n)])


def shapley_values_exact(value_fn, n_players: int, chunk: int = 2048) -> np.ndarray:
    """Exact Shapley values of a batched coalition function.

    ``value_fn(masks)`` maps a boolean ``(M, n_players)`` array to values of
    shape ``(M,)`` or ``(M, ...)``. Returns ``(n_players, ...)``.
    """
    if n_players > MAX_EXACT_GROUPS:
        raise ValueError(
            f"{n_players} groups exceed the exact-enumeration limit of {MAX_EXACT_GROUPS}; "
            "use shapley_sampling instead"
        )
    if n_players < 1:
        raise ValueError("need at least one player")
    codes = np.arange(2**n_players)
    bits = (codes[:, None] >> np.arange(n_players)) & 1
    masks = bits.astype(bool)
    values = np.concatenate([np.asarray(value_fn(masks[i : i + chunk]), dtype=np.float64)
                             for i in range(0, len(masks), chunk)])
    sizes = bits.sum(axis=1)
    w = _coalition_weights(n_players)
    phi = np.zeros((n_players,) + values.shape[1:])
    for i in range(n_players):
        without = codes[bits[:, i] == 0]
        diff = values[without | (1 << i)] - values[without]
        phi[i] = np.tensordot(w[sizes[without]], diff, axes=(0, 0))
    return phi


def shapley_values_sampling(value_fn, n_players: int, permutations: int, seed: int,
                            threads: int = 1, chunk: int = 16) -> np.ndarray:
    """Permutation-sampling estimate of Shapley values.

    Permutations are drawn up front from one seeded generator and processed
    in fixed-size chunks; chunk partial sums are added in chunk order, so the
    result does not depend on ``threads``.
    """
    if permutations < 1:
        raise ValueError("permutations must be >= 1")
    rng = np.random.default_rng(seed)
    perms = np.argsort(rng.random((permutations, n_players)), axis=1, kind="stable")
    steps = np.arange(n_players + 1)

    def partial(lo):
        block = perms[lo : lo + chunk]
        c = len(block)
        # rank[b, j] = position of player j in permutation b
        rank = np.argsort(block, axis=1, kind="stable")
        masks = rank[:, None, :] < steps[None, :, None]  # (c, n+1, n)
        v = np.asarray(value_fn(masks.reshape(c * (n_players + 1), n_players)), dtype=np.float64)
        v = v.reshape((c, n_players + 1) + v.shape[1:])
        diffs = v[:, 1:] - v[:, :-1]  # contribution of the player added at each step
        out = np.zeros((n_players,) + v.shape[2:])
        np.add.at(out, block, diffs)
        return out

    parts = ordered_map(partial, range(0, permutations, chunk), threads)
    total = parts[0].copy()
    for p in parts[1:]:
        total += p
    return total / permutations


def patch_groups(shape, patch_size: int) -> np.ndarray:
    """Group label per feature: square spatial patches for (C, H, W), runs for vectors.

    All channels of a pixel share its patch. Labels run row-major over patches.
    """
    shape = tuple(shape)
    if len(shape) == 3:
        _, h, w = shape
        if h % patch_size or w % patch_size:
            raise ShapeError(f"patch size {patch_size} does not tile a {h}x{w} image")
        rows = np.arange(h)[:, None] // patch_size
        cols = np.arange(w)[None, :] // patch_size
        grid = rows * (w // patch_size) + cols
        return np.broadcast_to(grid, shape).copy()
    n = int(np.prod(shape))
    return (np.arange(n) // patch_size).reshape(shape)


def _check_groups(groups, shape) -> np.ndarray:
    if groups is None:
        return np.arange(int(np.prod(shape))).reshape(shape)
    groups = np.asarray(groups)
    if groups.shape != tuple(shape):
        raise ShapeError(f"group labels of shape {groups.shape} do not match input {tuple(shape)}")
    labels = np.unique(groups)
    if labels[0] != 0 or labels[-1] != len(labels) - 1:
        raise ValueError("group labels must be the integers 0..G-1, each used at least once")
    return groups.astype(np.int64)


def spread_group_scores(scores: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """Input-shaped map giving each feature an equal share of its group's score."""
    counts = np.bincount(groups.ravel())
    return (scores / counts)[groups]


def group_sums(relevance: np.ndarray, groups: np.ndarray) -> np.ndarray:
    return np.bincount(np.asarray(groups).ravel(), weights=np.asarray(relevance).ravel())


def _input_value_fn(model, x, class_index, groups):
    def value(masks):
        X = x[None] * masks[:, groups]
        return _logits(model, X)[:, class_index]

    return value


def shapley_exact(model, x, class_index: int, groups=None) -> np.ndarray:
    """Exact Shapley attribution with removal = set to zero.

    ``groups`` labels every input feature with its player index (default:
    every feature is its own player). Returns an input-shaped map in which
    each group's score is spread uniformly over its features, so group sums
    recover the Shapley values.
    """
    x, class_index = _prepare(model, x, class_index)
    groups = _check_groups(groups, x.shape)
    n = int(groups.max()) + 1
    phi = shapley_values_exact(_input_value_fn(model, x, class_index, groups), n)
    return spread_group_scores(phi, groups)


def shapley_sampling(model, x, class_index: int, groups=None,
                     cfg: AttributionConfig | None = None) -> np.ndarray:
    cfg = cfg or AttributionConfig(method="ShapleySampling")
    x, class_index = _prepare(model, x, class_index)
    groups = _check_groups(groups, x.shape)
    n = int(groups.max()) + 1
    phi = shapley_values_sampling(_input_value_fn(model, x, class_index, groups), n,
                                  cfg.shapley_permutations, cfg.seed, cfg.threads)
    return spread_group_scores(phi, groups)


# --------------------------------------------------------------------------
# LRP


def _pos(t):
    return None if t is None else np.maximum(t, 0.0)


def _neg(t):
    return None if t is None else np.minimum(t, 0.0)


def _add(t, u, scale=1.0):
    if t is None:
        return None
    return t if u is None else t + scale * u


def _lrp_param_layer(layer, a, R, rule):
    """Relevance at the input of a Dense/Conv2D layer.

    ``a`` has batch size 1; ``R`` may carry any batch size (several relevance
    signals propagated against the same activations).
    """
    W, b = layer.weight, layer.bias
    lin, lin_t = layer.linear, layer.linear_t
    if isinstance(rule, LRP0):
        s = _safe_div(R, lin(a, W, b))
        return a * lin_t(s, W)
    if isinstance(rule, LRPEps):
        z = lin(a, W, b)
        s = R / (z + rule.eps * np.where(z >= 0, 1.0, -1.0))
        return a * lin_t(s, W)
    if isinstance(rule, LRPGamma):
        Wg = W + rule.gamma * _pos(W)
        s = _safe_div(R, lin(a, Wg, _add(b, _pos(b), rule.gamma)))
        return a * lin_t(s, Wg)
    if isinstance(rule, GenLRPGamma):
        g = rule.gamma
        Wp, Wn = W + g * _pos(W), W + g * _neg(W)
        ap, an = _pos(a), _neg(a)
        z = lin(a, W, b)
        up = z >= 0
        # positive outputs favour positive contributions, negative outputs negative ones
        zp = lin(ap, Wp) + lin(an, Wn)
        zn = lin(ap, Wn) + lin(an, Wp)
        if b is not None:
            zp = lin(np.zeros_like(a), W, b + g * _pos(b)) + zp
            zn = lin(np.zeros_like(a), W, b + g * _neg(b)) + zn
        sp = _safe_div(R * up, zp)
        sn = _safe_div(R * ~up, zn)
        return ap * (lin_t(sp, Wp) + lin_t(sn, Wn)) + an * (lin_t(sp, Wn) + lin_t(sn, Wp))
    if isinstance(rule, ZB):
        lo = np.full_like(a, rule.low)
        hi = np.full_like(a, rule.high)
        Wp, Wn = _pos(W), _neg(W)
        z = lin(a, W) - lin(lo, Wp) - lin(hi, Wn)
        s = _safe_div(R, z)
        return a * lin_t(s, W) - lo * lin_t(s, Wp) - hi * lin_t(s, Wn)
    raise RuleError(f"unsupported rule {rule!r}")


def _lrp_layer(layer, a, R, rule):
    if layer.has_params:
        return _lrp_param_layer(layer, a, R, rule)
    if layer.kind == "AvgPool2D":
        z = layer.forward(a)
        return a * layer.vjp(a, z, _safe_div(R, z))
    if layer.kind == "MaxPool2D":
        return layer.route(a, R)
    # ReLU and Flatten pass relevance through unchanged (up to reshaping)
    return layer.vjp(a, None, R) if layer.kind == "Flatten" else R


def lrp_propagate(model: Model, trace: netcore.ForwardTrace, relevance: np.ndarray,
                  boundary: int, rules: dict) -> list:
    """Propagate batched relevance from ``boundary`` down to the input.

    ``relevance`` has shape ``(B, *model.shapes[boundary])``. Returns the list
    of batched relevances at boundaries ``0..boundary``.
    """
    relevance = np.asarray(relevance, dtype=np.float64)
    if relevance.shape[1:] != model.shapes[boundary]:
        raise ShapeError(f"relevance of shape {relevance.shape[1:]} does not match "
                         f"boundary {boundary} shape {model.shapes[boundary]}")
    out = [None] * (boundary + 1)
    out[boundary] = relevance
    R = relevance
    for i in range(boundary - 1, -1, -1):
        layer = model.layers[i]
        R = _lrp_layer(layer, trace.inputs[i][None], R, rules.get(i))
        out[i] = R
    return out


def lrp(model: Model, trace: netcore.ForwardTrace, class_index: int,
        cfg: AttributionConfig | None = None) -> list:
    """Relevance at every layer boundary, input first, logits last.

    The output relevance is the class logit placed on its unit; each
    parameterized layer uses the rule assigned in ``cfg.lrp_rules``.
    """
    class_index = netcore._check_class(model, class_index)
    rules = resolve_rules(model, cfg)
    R = np.zeros((1, model.num_classes))
    R[0, class_index] = trace.logits[class_index]
    return [r[0] for r in lrp_propagate(model, trace, R, len(model.layers), rules)]


# --------------------------------------------------------------------------
# one-step input explanation


def explain(model, x, class_index: int, cfg: AttributionConfig) -> np.ndarray:
    """Input relevance map with the backend named in ``cfg.method``.

    Shapley backends group inputs into ``cfg.patch_size`` patches.
    """
    if cfg.method == "GradInput":
        return grad_x_input(model, x, class_index)
    if cfg.method == "IntegratedGradients":
        return integrated_gradients(model, x, class_index, cfg)
    if cfg.method == "LRP":
        if not isinstance(model, Model):
            raise TypeError("LRP needs a layered Model")
        return lrp(model, netcore.forward(model, x), class_index, cfg)[0]
    groups = patch_groups(model.input_shape, cfg.patch_size)
    if cfg.method == "ShapleyExact":
        return shapley_exact(model, x, class_index, groups)
    return shapley_sampling(model, x, class_index, groups, cfg)


# --------------------------------------------------------------------------
# context vectors


def lrp_context(a: np.ndarray, relevance: np.ndarray) -> np.ndarray:
    """c_j = R_j / a_j where a_j != 0, else 0."""
    return _safe_div(np.asarray(relevance, dtype=np.float64), np.asarray(a, dtype=np.float64))


def to_positions(t: np.ndarray) -> np.ndarray:
    """(D,) -> (1, D); (D, H, W) -> (H*W, D) in row-major position order."""
    t = np.asarray(t)
    if t.ndim == 1:
        return t[None]
    if t.ndim == 3:
        return t.reshape(t.shape[0], -1).T
    raise ShapeError(f"expected a D-vector or a (D, H, W) map, got shape {t.shape}")


def from_positions(v: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if len(shape) == 1:
        return np.asarray(v).reshape(shape)
    return np.asarray(v).T.reshape(shape)


def _check_layer(model: Model, layer_index: int):
    if not 0 <= layer_index < len(model.layers):
        raise IndexError(f"layer_index {layer_index} out of range [0, {len(model.layers)})")
    shape = model.shapes[layer_index + 1]
    if len(shape) not in (1, 3):
        raise ShapeError(f"layer {layer_index} output {shape} has no channel structure")
    return shape


def head_logits(model: Model, layer_index: int, A: np.ndarray) -> np.ndarray:
    """Logits of the submodel above ``layer_index`` for a batch of activations."""
    return netcore.forward_batch(model, A, start=layer_index + 1)


def head_grads(model: Model, layer_index: int, A: np.ndarray, class_index: int) -> np.ndarray:
    start = layer_index + 1
    _, inputs = netcore.forward_batch(model, A, start=start, record=True)
    g = np.zeros((len(A), model.num_classes))
    g[:, class_index] = 1.0
    return netcore.vjp_batch(model, inputs, g, start=start)


def _channel_value_fn(model, layer_index, a, class_index):
    def value(masks):
        m = masks.reshape(masks.shape + (1,) * (a.ndim - 1))
        return head_logits(model, layer_index, a[None] * m)[:, class_index]

    return value


def context_vector(model: Model, trace: netcore.ForwardTrace, layer_index: int, class_index: int,
                   cfg: AttributionConfig, relevance: list | None = None) -> np.ndarray:
    """Context vectors at the output of ``layer_index`` (same shape as the activations).

    ``relevance`` may pass precomputed LRP boundary relevances to avoid a
    second propagation.
    """
    _check_layer(model, layer_index)
    class_index = netcore._check_class(model, class_index)
    a = trace.outputs[layer_index]
    method = cfg.method
    if method == "LRP":
        if relevance is None:
            relevance = lrp(model, trace, class_index, cfg)
        return lrp_context(a, relevance[layer_index + 1])
    if method == "GradInput":
        return netcore.gradient_at_layer(model, trace, class_index, layer_index + 1)
    if method == "IntegratedGradients":
        return _path_mean_grad(lambda A: head_grads(model, layer_index, A, class_index), a, cfg.ig_steps)
    # Shapley over channel groups on the activation-to-logit submodel
    n = a.shape[0]
    value = _channel_value_fn(model, layer_index, a, class_index)
    if method == "ShapleyExact":
        phi = shapley_values_exact(value, n)
    else:
        phi = shapley_values_sampling(value, n, cfg.shapley_permutations, cfg.seed, cfg.threads)
    sums = a.reshape(n, -1).sum(axis=1)
    per_channel = _safe_div(phi, sums)
    return np.broadcast_to(per_channel.reshape((n,) + (1,) * (a.ndim - 1)), a.shape).copy()


# --------------------------------------------------------------------------
# relevance map files


def _as_image(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 3:
        return scores.sum(axis=0)
    if scores.ndim == 1:
        return scores[None]
    return scores


def save_relevance_map(path, scores: np.ndarray, pgm: bool = True) -> None:
    """Write ``<path>`` as CSV (+ ``.json`` shape sidecar) and a ``.pgm`` preview.

    The preview sums over channels; its header notes the min-max scaling.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("relevance map contains non-finite values")
    path = Path(path)
    write_map_csv(path, scores)
    if pgm:
        write_pgm(path.with_suffix(".pgm"), _as_image(scores),
                  comment="relevance summed over channels, min-max scaled")


def load_relevance_map(path) -> np.ndarray:
    return read_map_csv(path)
