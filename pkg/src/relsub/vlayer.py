"""The orthogonal virtual layer and two-step pixel-concept explanations.

A :class:`SubspaceBasis` ``U = [U_1 | ... | U_K]`` is inserted after a layer
as ``a -> h = U^T a -> a' = U h``; since ``U U^T = I`` the network is
unchanged, but relevance can now be attributed to the latent blocks
``h_k`` and from there, through a filtered backward pass, to the input.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from relsub import attribution as attr
from relsub import netcore
from relsub.fileio import format_floats
from relsub.netcore import Model, ShapeError

ORTHO_TOL = 1e-8


class BasisError(ValueError):
    """Malformed or non-orthogonal basis."""


@dataclass(eq=False)
class SubspaceBasis:
    matrix: np.ndarray
    block_dims: tuple

    def __post_init__(self):
        self.matrix = np.array(self.matrix, dtype=np.float64)
        self.block_dims = tuple(int(d) for d in self.block_dims)
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise BasisError(f"basis matrix must be square, got shape {m.shape}")
        if any(d < 1 for d in self.block_dims) or sum(self.block_dims) != m.shape[0]:
            raise BasisError(f"block dims {self.block_dims} must be positive and sum to {m.shape[0]}")
        if not np.all(np.isfinite(m)):
            raise BasisError("basis matrix has non-finite entries")
        err = np.abs(m.T @ m - np.eye(m.shape[0])).max()
        if err > ORTHO_TOL:
            raise BasisError(f"basis matrix is not orthogonal (max |U^T U - I| = {err:.3g})")
        self.matrix.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_blocks(self) -> int:
        return len(self.block_dims)

    def block_slices(self) -> list:
        edges = np.concatenate([[0], np.cumsum(self.block_dims)])
        return [slice(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:])]

    def blocks(self) -> list:
        return [self.matrix[:, s] for s in self.block_slices()]

    def block(self, k: int) -> np.ndarray:
        if not 0 <= k < self.num_blocks:
            raise IndexError(f"block index {k} out of range [0, {self.num_blocks})")
        return self.matrix[:, self.block_slices()[k]]

    def projectors(self) -> np.ndarray:
        """Stack of ``U_k U_k^T``, shape (K, D, D)."""
        return np.stack([u @ u.T for u in self.blocks()])

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.matrix.tobytes())
        h.update(np.asarray(self.block_dims, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]

    @classmethod
    def identity(cls, dim: int, block_dims=None) -> "SubspaceBasis":
        return cls(np.eye(dim), block_dims or (1,) * dim)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "block_dims": list(self.block_dims), "matrix": self.matrix.ravel().tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SubspaceBasis":
        try:
            dim = int(d["dim"])
            m = np.asarray(d["matrix"], dtype=np.float64)
            blocks = d["block_dims"]
        except (KeyError, TypeError, ValueError) as exc:
            raise BasisError(f"malformed basis document: {exc}") from None
        if m.size != dim * dim:
            raise BasisError(f"basis matrix has {m.size} entries, expected {dim * dim}")
        return cls(m.reshape(dim, dim), blocks)


def dumps_basis(basis: SubspaceBasis) -> str:
    return (
        "{\n"
        f'  "dim": {basis.dim},\n'
        f'  "block_dims": {json.dumps(list(basis.block_dims))},\n'
        f'  "matrix": {format_floats(basis.matrix)}\n'
        "}\n"
    )


def save_basis(path, basis: SubspaceBasis) -> None:
    Path(path).write_text(dumps_basis(basis))


def load_basis(path) -> SubspaceBasis:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise BasisError(f"{path}: invalid JSON ({exc})") from None
    return SubspaceBasis.from_dict(doc)


# --------------------------------------------------------------------------
# virtual layer and concept relevance


def _check_dim(t: np.ndarray, basis: SubspaceBasis):
    if t.ndim not in (1, 3) or t.shape[0] != basis.dim:
        raise ShapeError(f"tensor of shape {t.shape} has no channel axis of size {basis.dim}")


def apply_virtual_layer(a, basis: SubspaceBasis):
    """Return ``(a', [h_1..h_K])`` with ``h_k = U_k^T a`` at every position."""
    a = np.asarray(a, dtype=np.float64)
    _check_dim(a, basis)
    pos = attr.to_positions(a)  # (P, D)
    h = pos @ basis.matrix
    a_prime = attr.from_positions(h @ basis.matrix.T, a.shape)
    hs = [attr.from_positions(h[:, s], (s.stop - s.start,) + a.shape[1:]) for s in basis.block_slices()]
    return a_prime, hs


def concept_relevance(a, c, basis: SubspaceBasis, per_position: bool = False) -> np.ndarray:
    """``R_k = (U_k^T a)^T (U_k^T c)``, summed over positions unless ``per_position``.

    Returns shape (K,) or (K, P).
    """
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if a.shape != c.shape:
        raise ShapeError(f"activation {a.shape} and context {c.shape} differ in shape")
    _check_dim(a, basis)
    prod = (attr.to_positions(a) @ basis.matrix) * (attr.to_positions(c) @ basis.matrix)  # (P, D)
    per = np.stack([prod[:, s].sum(axis=1) for s in basis.block_slices()])
    return per if per_position else per.sum(axis=1)


def _projectors(basis_or_projectors) -> np.ndarray:
    if isinstance(basis_or_projectors, SubspaceBasis):
        return basis_or_projectors.projectors()
    return np.asarray(basis_or_projectors, dtype=np.float64)


def filtered_relevance(a, c, basis) -> np.ndarray:
    """Per-neuron relevance split by concept: ``R_j^(k) = (U_k U_k^T a)_j c_j``, shape (K, *a.shape).

    ``basis`` may also be a (K, D, D) stack of projectors.
    """
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    pos_a, pos_c = attr.to_positions(a), attr.to_positions(c)
    return np.stack([attr.from_positions((pos_a @ P) * pos_c, a.shape) for P in _projectors(basis)])


def filtered_context(c, basis) -> np.ndarray:
    """``U_k U_k^T c`` at every position, shape (K, *c.shape)."""
    c = np.asarray(c, dtype=np.float64)
    pos_c = attr.to_positions(c)
    return np.stack([attr.from_positions(pos_c @ P, c.shape) for P in _projectors(basis)])


# --------------------------------------------------------------------------
# two-step explanation


@dataclass
class JointExplanation:
    maps: np.ndarray  # (K, *input_shape): R_pk
    concept_relevance: np.ndarray  # (K,): R_k
    layer_relevance: float  # sum_j R_j = a^T c at the layer
    class_index: int
    layer_index: int
    backend: str
    basis_id: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def num_components(self) -> int:
        return self.maps.shape[0]

    def summary(self) -> dict:
        return {
            "class_index": self.class_index,
            "layer_index": self.layer_index,
            "backend": self.backend,
            "basis_id": self.basis_id,
            "R_k": self.concept_relevance.tolist(),
            "sum_R_k": float(self.concept_relevance.sum()),
            "layer_relevance": float(self.layer_relevance),
            "map_totals": self.maps.reshape(self.num_components, -1).sum(axis=1).tolist(),
            **self.meta,
        }


BACKENDS = ("LRP", "GradInput", "IntegratedGradients", "ShapleySampling", "ShapleyExact")


def _lower_grads(model: Model, X: np.ndarray, layer_index: int, signal: np.ndarray) -> np.ndarray:
    """Input gradient of ``sum_pos signal . phi(x)`` for a batch X, phi = layers 0..layer_index."""
    _, inputs = netcore.forward_batch(model, X, stop=layer_index + 1, record=True)
    g = np.broadcast_to(signal, (len(X),) + signal.shape)
    return netcore.vjp_batch(model, inputs, g, stop=layer_index + 1)


def relevance_model(model: Model, layer_index: int, signals: np.ndarray):
    """Batched relevance model ``x' -> [sum_pos phi(x')^T (U_k U_k^T c)]_k``.

    ``signals`` is the (K, *a.shape) stack of filtered context vectors.
    """
    flat = signals.reshape(len(signals), -1)

    def fn(X):
        A = netcore.forward_batch(model, X, stop=layer_index + 1)
        return A.reshape(len(A), -1) @ flat.T

    return fn


def _step_two(model: Model, x: np.ndarray, class_index: int, layer_index: int, projectors: np.ndarray,
              cfg: attr.AttributionConfig):
    """Input maps for each projector, plus the layer activations and context vectors."""
    if cfg.method not in BACKENDS:
        raise ValueError(f"unsupported two-step backend {cfg.method!r}")
    trace = netcore.forward(model, x)
    shape = attr._check_layer(model, layer_index)
    if projectors.shape[1] != shape[0]:
        raise ShapeError(f"layer {layer_index} has {shape[0]} channels but the basis has dim {projectors.shape[1]}")
    a = trace.outputs[layer_index]
    relevance = attr.lrp(model, trace, class_index, cfg) if cfg.method == "LRP" else None
    c = attr.context_vector(model, trace, layer_index, class_index, cfg, relevance=relevance)
    K = len(projectors)
    if cfg.method == "LRP":
        Rj = filtered_relevance(a, c, projectors)
        rules = attr.resolve_rules(model, cfg)
        maps = attr.lrp_propagate(model, trace, Rj, layer_index + 1, rules)[0]
    elif cfg.method == "GradInput":
        sig = filtered_context(c, projectors)
        maps = np.stack([_lower_grads(model, x[None], layer_index, s)[0] for s in sig]) * x
    elif cfg.method == "IntegratedGradients":
        sig = filtered_context(c, projectors)
        maps = np.stack([
            x * attr._path_mean_grad(lambda X, s=s: _lower_grads(model, X, layer_index, s), x, cfg.ig_steps)
            for s in sig
        ])
    else:
        fn = relevance_model(model, layer_index, filtered_context(c, projectors))
        groups = attr.patch_groups(x.shape, cfg.patch_size)
        n = int(groups.max()) + 1

        def value(masks):
            return fn(x[None] * masks[:, groups])

        if cfg.method == "ShapleyExact":
            phi = attr.shapley_values_exact(value, n)
        else:
            phi = attr.shapley_values_sampling(value, n, cfg.shapley_permutations, cfg.seed, cfg.threads)
        maps = np.stack([attr.spread_group_scores(phi[:, k], groups) for k in range(K)])
    return maps, a, c


def two_step_explain(model: Model, x, class_index: int, layer_index: int, basis: SubspaceBasis,
                     cfg: attr.AttributionConfig) -> JointExplanation:
    """Explain the class logit in terms of concepts and then pixels.

    LRP/GradInput restart the backward pass below the layer from per-concept
    filtered signals; IG/Shapley attribute the relevance model
    ``R_k(x') = (U_k^T phi(x'))^T (U_k^T c)`` with ``c`` held at the current input.
    """
    x = np.asarray(x, dtype=np.float64)
    maps, a, c = _step_two(model, x, class_index, layer_index, basis.projectors(), cfg)
    return JointExplanation(
        maps=maps,
        concept_relevance=concept_relevance(a, c, basis),
        layer_relevance=float((a * c).sum()),
        class_index=int(class_index),
        layer_index=int(layer_index),
        backend=cfg.method,
        basis_id=basis.fingerprint(),
    )


def subspace_explain(model: Model, x, class_index: int, layer_index: int, U_sub,
                     cfg: attr.AttributionConfig) -> np.ndarray:
    """Input relevance map of the part of the prediction flowing through span(U_sub)."""
    x = np.asarray(x, dtype=np.float64)
    shape = attr._check_layer(model, layer_index)
    U = _check_orthonormal_columns(U_sub, shape[0])
    if U.shape[1] == 0:
        return np.zeros(x.shape)
    return _step_two(model, x, class_index, layer_index, (U @ U.T)[None], cfg)[0][0]


def _check_orthonormal_columns(U: np.ndarray, dim: int) -> np.ndarray:
    U = np.asarray(U, dtype=np.float64)
    if U.ndim == 1:
        U = U[:, None]
    if U.shape[0] != dim:
        raise ShapeError(f"subspace matrix has {U.shape[0]} rows, expected {dim}")
    if U.shape[1] and np.abs(U.T @ U - np.eye(U.shape[1])).max() > ORTHO_TOL:
        raise BasisError("subspace matrix columns are not orthonormal")
    return U


def total_relevance_shortcut(model: Model, x, class_index: int, layer_index: int, U_sub,
                             cfg: attr.AttributionConfig) -> float:
    """``sum_pos (phi(x) - phi(0))^T U U^T c`` without any step-2 attribution."""
    x = np.asarray(x, dtype=np.float64)
    shape = attr._check_layer(model, layer_index)
    U = _check_orthonormal_columns(U_sub, shape[0])
    if U.shape[1] == 0:
        return 0.0
    trace = netcore.forward(model, x)
    c = attr.context_vector(model, trace, layer_index, class_index, cfg)
    phi0 = netcore.forward_batch(model, np.zeros((1,) + model.input_shape), stop=layer_index + 1)[0]
    diff = attr.to_positions(trace.outputs[layer_index] - phi0)
    proj_c = attr.to_positions(c) @ U @ U.T
    return float((diff * proj_c).sum())


# --------------------------------------------------------------------------
# refinement


def concept_scores(model: Model, x, class_index: int, layer_index: int, basis: SubspaceBasis,
                   cfg: attr.AttributionConfig | None = None) -> np.ndarray:
    """Step 1 only: ``R_k`` for one input (LRP context by default)."""
    cfg = cfg or attr.AttributionConfig(method="LRP")
    trace = netcore.forward(model, x)
    attr._check_layer(model, layer_index)
    c = attr.context_vector(model, trace, layer_index, class_index, cfg)
    return concept_relevance(trace.outputs[layer_index], c, basis)


def refine_prediction(model: Model, x, class_index: int, layer_index: int, basis: SubspaceBasis,
                      ch_blocks, class_means, cfg: attr.AttributionConfig | None = None) -> float:
    """Class logit minus the excess relevance of the Clever-Hans blocks."""
    ch = list(ch_blocks)
    if not ch:
        raise ValueError("ch_blocks must be nonempty")
    for k in ch:
        if not 0 <= k < basis.num_blocks:
            raise IndexError(f"block index {k} out of range [0, {basis.num_blocks})")
    means = np.asarray(class_means, dtype=np.float64)
    Rk = concept_scores(model, x, class_index, layer_index, basis, cfg)
    f = float(netcore.forward(model, x).logits[class_index])
    return f - float(sum(max(0.0, Rk[k] - means[k]) for k in ch))


def refined_logits(model: Model, x, class_index: int, layer_index: int, basis: SubspaceBasis,
                   ch_blocks, class_means, cfg: attr.AttributionConfig | None = None) -> np.ndarray:
    """All logits with only ``class_index`` refined (used for refined accuracy)."""
    logits = netcore.forward(model, x).logits.copy()
    logits[class_index] = refine_prediction(model, x, class_index, layer_index, basis,
                                            ch_blocks, class_means, cfg)
    return logits
