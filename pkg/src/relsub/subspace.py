"""Learning concept bases from (activation, context) samples.

PRCA solves a symmetric eigenproblem; DRSA runs full-batch gradient ascent
on the orthogonal group with symmetric re-orthogonalization. PCA, DSA,
random and max-relevance bases are provided as baselines.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from relsub._parallel import ordered_map
from relsub.netcore import ShapeError
from relsub.vlayer import SubspaceBasis

MAGIC = b"ACDS0001"


class RankDeficientError(ArithmeticError):
    """Matrix too close to singular to orthogonalize."""


class DatasetError(ValueError):
    """Malformed or degenerate activation/context dataset."""


# --------------------------------------------------------------------------
# dataset


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([
        ("a", "<f8", (dim,)),
        ("c", "<f8", (dim,)),
        ("image", "<u4"),
        ("cls", "<u4"),
        ("row", "<u2"),
        ("col", "<u2"),
    ])


@dataclass(eq=False)
class ActivationContextDataset:
    A: np.ndarray  # (N, D)
    C: np.ndarray  # (N, D)
    image_ids: np.ndarray | None = None
    classes: np.ndarray | None = None
    rows: np.ndarray | None = None
    cols: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        if self.A.ndim != 2 or self.A.shape != self.C.shape:
            raise DatasetError(f"activations {self.A.shape} and contexts {self.C.shape} must be equal (N, D)")
        if len(self.A) == 0:
            raise DatasetError("dataset is empty")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.C))):
            raise DatasetError("dataset contains non-finite values")
        n = len(self.A)
        defaults = {"image_ids": np.arange(n), "classes": np.zeros(n), "rows": np.zeros(n), "cols": np.zeros(n)}
        dtypes = {"image_ids": np.uint32, "classes": np.uint32, "rows": np.uint16, "cols": np.uint16}
        for name, default in defaults.items():
            v = getattr(self, name)
            v = default if v is None else np.asarray(v)
            if v.shape != (n,):
                raise DatasetError(f"metadata {name} must have length {n}")
            setattr(self, name, v.astype(dtypes[name]))

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def __len__(self):
        return len(self.A)

    def subset(self, idx) -> "ActivationContextDataset":
        idx = np.asarray(idx)
        return ActivationContextDataset(self.A[idx], self.C[idx], self.image_ids[idx], self.classes[idx],
                                        self.rows[idx], self.cols[idx])

    def with_context(self, C) -> "ActivationContextDataset":
        return ActivationContextDataset(self.A, C, self.image_ids, self.classes, self.rows, self.cols)

    @classmethod
    def concat(cls, parts) -> "ActivationContextDataset":
        parts = list(parts)
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("A", "C", "image_ids", "classes", "rows", "cols")))


def save_acds(path, ds: ActivationContextDataset) -> None:
    rec = np.zeros(len(ds), dtype=_record_dtype(ds.dim))
    rec["a"], rec["c"] = ds.A, ds.C
    rec["image"], rec["cls"], rec["row"], rec["col"] = ds.image_ids, ds.classes, ds.rows, ds.cols
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", ds.dim, len(ds)))
        fh.write(rec.tobytes())


def load_acds(path) -> ActivationContextDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DatasetError(f"{path}: bad magic, not an ACDS0001 file")
    if len(raw) < 20:
        raise DatasetError(f"{path}: truncated header")
    dim, n = struct.unpack("<IQ", raw[8:20])
    dt = _record_dtype(dim)
    if len(raw) != 20 + n * dt.itemsize:
        raise DatasetError(f"{path}: expected {n} records of {dt.itemsize} bytes")
    rec = np.frombuffer(raw, dtype=dt, offset=20, count=n)
    return ActivationContextDataset(rec["a"], rec["c"], rec["image"], rec["cls"], rec["row"], rec["col"])


def save_acds_csv(path, ds: ActivationContextDataset) -> None:
    d = ds.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "class", "row", "col"] + [f"a{j}" for j in range(d)] + [f"c{j}" for j in range(d)])
        for i in range(len(ds)):
            w.writerow([int(ds.image_ids[i]), int(ds.classes[i]), int(ds.rows[i]), int(ds.cols[i])]
                       + [format(float(v), ".17g") for v in ds.A[i]]
                       + [format(float(v), ".17g") for v in ds.C[i]])


def load_acds_csv(path) -> ActivationContextDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("a"))
    if header[:4] != ["image", "class", "row", "col"] or len(header) != 4 + 2 * d:
        raise DatasetError(f"{path}: unexpected CSV header")
    arr = np.array(body, dtype=np.float64).reshape(len(body), -1)
    return ActivationContextDataset(arr[:, 4 : 4 + d], arr[:, 4 + d :], arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])


def normalize_dataset(ds: ActivationContextDataset):
    """Rescale so that ``mean(a^2) = mean(c^2) = 1/sqrt(D)``.

    Returns ``(normalized, scale_a, scale_c)``; raw relevances equal
    normalized ones times ``scale_a * scale_c``.
    """
    root = ds.dim ** 0.25
    rms_a = np.sqrt(np.mean(ds.A**2))
    rms_c = np.sqrt(np.mean(ds.C**2))
    if rms_a == 0:
        raise DatasetError("cannot normalize: all activations are zero")
    if rms_c == 0:
        raise DatasetError("cannot normalize: all context vectors are zero")
    sa, sc = root * rms_a, root * rms_c
    out = ActivationContextDataset(ds.A / sa, ds.C / sc, ds.image_ids, ds.classes, ds.rows, ds.cols)
    return out, float(sa), float(sc)


# --------------------------------------------------------------------------
# linear algebra


def fix_signs(V: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip columns so that the first entry with magnitude > tol is nonnegative."""
    V = V.copy()
    for j in range(V.shape[1]):
        big = np.flatnonzero(np.abs(V[:, j]) > tol)
        if big.size and V[big[0], j] < 0:
            V[:, j] = -V[:, j]
    return V


def sym_eig(S: np.ndarray):
    """Eigenpairs of a symmetric matrix, eigenvalues descending (ties by index), signs fixed."""
    S = np.asarray(S, dtype=np.float64)
    if not np.all(np.isfinite(S)):
        raise ArithmeticError("matrix has non-finite entries")
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    order = np.argsort(-w, kind="stable")
    return w[order], fix_signs(V[:, order])


def orthogonalize(M: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Nearest orthogonal matrix ``M (M^T M)^{-1/2}`` (polar factor)."""
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise ArithmeticError("matrix has non-finite entries")
    # SVD form keeps U^T U = I to machine precision even for ill-conditioned M
    W, sv, Vt = np.linalg.svd(M, full_matrices=False)
    if sv.min() <= tol * max(sv.max(), 1.0):
        raise RankDeficientError(f"matrix is rank deficient (smallest singular value {sv.min():.3g})")
    return W @ Vt


def _split(d: int, D: int) -> tuple:
    if not 1 <= d <= D:
        raise ValueError(f"subspace dimension d={d} out of range [1, {D}]")
    return (d,) if d == D else (d, D - d)


def mean_relevance(U: np.ndarray, ds: ActivationContextDataset) -> float:
    """E[(U^T a)^T (U^T c)] for a column-orthonormal U."""
    U = np.asarray(U, dtype=np.float64).reshape(ds.dim, -1)
    return float(np.mean(np.sum((ds.A @ U) * (ds.C @ U), axis=1)))


def cross_covariance(ds: ActivationContextDataset) -> np.ndarray:
    X = ds.A.T @ ds.C / len(ds)
    return X + X.T


def prca(ds: ActivationContextDataset, d: int) -> SubspaceBasis:
    """Eigenvectors of ``E[a c^T + c a^T]``; the first ``d`` span the relevant subspace."""
    blocks = _split(d, ds.dim)
    _, V = sym_eig(cross_covariance(ds))
    return SubspaceBasis(V, blocks)


def pca(ds: ActivationContextDataset, d: int) -> SubspaceBasis:
    """Uncentered PCA of the activations."""
    blocks = _split(d, ds.dim)
    _, V = sym_eig(ds.A.T @ ds.A / len(ds))
    return SubspaceBasis(V, blocks)


def random_orthogonal(D: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return orthogonalize(rng.standard_normal((D, D)))


def random_basis(D: int, block_dims, seed) -> SubspaceBasis:
    return SubspaceBasis(random_orthogonal(D, seed), block_dims)


def maxrel(channel_relevances, d: int) -> SubspaceBasis:
    """Canonical axes of the ``d`` most relevant channels (ties by lowest index) first."""
    r = np.asarray(channel_relevances, dtype=np.float64).ravel()
    blocks = _split(d, r.size)
    order = np.argsort(-r, kind="stable")
    return SubspaceBasis(np.eye(r.size)[:, order], blocks)


# --------------------------------------------------------------------------
# DRSA


@dataclass
class DrsaOptions:
    block_dims: tuple = (1, 1)
    q: float = 0.5
    iterations: int = 1000
    learning_rate: float = 0.01
    restarts: int = 3
    seed: int = 0
    clamp_floor: float = 1e-12
    normalize: bool = True
    threads: int = 1

    def __post_init__(self):
        self.block_dims = tuple(int(d) for d in self.block_dims)
        if not self.q > 0:
            raise ValueError("q must be > 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.block_dims or any(d < 1 for d in self.block_dims):
            raise ValueError("block_dims must be positive")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _block_relevance(U: np.ndarray, ds: ActivationContextDataset, block_dims) -> np.ndarray:
    """R[k, n] = (U_k^T a_n)^T (U_k^T c_n)."""
    prod = (ds.A @ U) * (ds.C @ U)
    edges = np.concatenate([[0], np.cumsum(block_dims)])
    return np.stack([prod[:, lo:hi].sum(axis=1) for lo, hi in zip(edges[:-1], edges[1:])])


def _check_blocks(U: np.ndarray, ds: ActivationContextDataset, block_dims) -> tuple:
    block_dims = tuple(int(d) for d in block_dims)
    if U.shape[0] != ds.dim or U.shape[1] != sum(block_dims):
        raise ShapeError(f"basis of shape {U.shape} does not fit D={ds.dim} and blocks {block_dims}")
    return block_dims


def drsa_objective(U, ds: ActivationContextDataset, block_dims, q: float = 0.5,
                   delta: float = 1e-12) -> float:
    """``J = M^q_k [ M^2_n [ max(delta, R_kn) ] ]`` with power means ``M^p``."""
    U = np.asarray(U, dtype=np.float64)
    block_dims = _check_blocks(U, ds, block_dims)
    t = np.maximum(delta, _block_relevance(U, ds, block_dims))
    m = np.sqrt(np.mean(t**2, axis=1))
    return float(np.mean(m**q) ** (1.0 / q))


def drsa_gradient(U, ds: ActivationContextDataset, block_dims, q: float = 0.5,
                  delta: float = 1e-12) -> np.ndarray:
    """Analytic ``dJ/dU``; clamped samples (R <= delta) contribute nothing."""
    U = np.asarray(U, dtype=np.float64)
    block_dims = _check_blocks(U, ds, block_dims)
    R = _block_relevance(U, ds, block_dims)
    t = np.maximum(delta, R)
    K, N = t.shape
    m = np.sqrt(np.mean(t**2, axis=1))
    S = np.mean(m**q)
    # dJ/dm_k * dm_k/dt_kn * dt/dR
    w = (S ** (1.0 / q - 1.0) * m ** (q - 1.0) / K)[:, None] * t / (N * m[:, None]) * (R > delta)
    AU, CU = ds.A @ U, ds.C @ U
    G = np.empty_like(U)
    edges = np.concatenate([[0], np.cumsum(block_dims)])
    for k, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        wk = w[k][:, None]
        G[:, lo:hi] = ds.A.T @ (wk * CU[:, lo:hi]) + ds.C.T @ (wk * AU[:, lo:hi])
    return G


@dataclass
class DrsaResult:
    basis: SubspaceBasis
    objective: float  # best restart's final objective (on the optimized, possibly normalized data)
    best_restart: int
    objectives: list  # final objective per restart
    histories: list = field(repr=False)  # objective after each iteration, index 0 = initial
    ortho_errors: list = field(repr=False)  # max |U^T U - I| after each iteration
    scales: tuple = (1.0, 1.0)


def _run(ds, opts: DrsaOptions, restart: int):
    U = random_orthogonal(ds.dim, [opts.seed & 0xFFFFFFFFFFFFFFFF, restart])
    hist = np.empty(opts.iterations + 1)
    errs = np.empty(opts.iterations)
    eye = np.eye(ds.dim)
    hist[0] = drsa_objective(U, ds, opts.block_dims, opts.q, opts.clamp_floor)
    for it in range(opts.iterations):
        G = drsa_gradient(U, ds, opts.block_dims, opts.q, opts.clamp_floor)
        U = orthogonalize(U + opts.learning_rate * G)
        errs[it] = np.abs(U.T @ U - eye).max()
        hist[it + 1] = drsa_objective(U, ds, opts.block_dims, opts.q, opts.clamp_floor)
    return U, hist, errs


def drsa_fit(ds: ActivationContextDataset, opts: DrsaOptions | None = None) -> DrsaResult:
    """DRSA with restarts; blocks of the winner sorted by descending raw mean relevance."""
    opts = opts or DrsaOptions()
    if sum(opts.block_dims) != ds.dim:
        raise ShapeError(f"block dims {opts.block_dims} do not sum to D={ds.dim}")
    work, sa, sc = normalize_dataset(ds) if opts.normalize else (ds, 1.0, 1.0)
    runs = ordered_map(lambda r: _run(work, opts, r), range(opts.restarts), opts.threads)
    finals = [float(h[-1]) for _, h, _ in runs]
    # highest objective wins; exact ties go to the lowest restart index
    best = max(range(len(runs)), key=lambda r: (finals[r], -r))
    U = runs[best][0]
    raw = _block_relevance(U, ds, opts.block_dims).mean(axis=1)
    order = np.argsort(-raw, kind="stable")
    edges = np.concatenate([[0], np.cumsum(opts.block_dims)])
    cols = np.concatenate([np.arange(edges[k], edges[k + 1]) for k in order])
    dims = tuple(opts.block_dims[k] for k in order)
    return DrsaResult(
        basis=SubspaceBasis(U[:, cols], dims),
        objective=finals[best],
        best_restart=best,
        objectives=finals,
        histories=[h for _, h, _ in runs],
        ortho_errors=[e for _, _, e in runs],
        scales=(sa, sc),
    )


def drsa(ds: ActivationContextDataset, opts: DrsaOptions | None = None) -> SubspaceBasis:
    return drsa_fit(ds, opts).basis


def dsa(ds: ActivationContextDataset, opts: DrsaOptions | None = None) -> SubspaceBasis:
    """DRSA with every context vector replaced by its activation vector."""
    return drsa(ds.with_context(ds.A), opts)


def projector_distance(U: np.ndarray, V: np.ndarray) -> float:
    """Frobenius distance between the orthogonal projectors onto span(U) and span(V)."""
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    return float(np.linalg.norm(U @ U.T - V @ V.T))


def projector_overlap(U: np.ndarray, V: np.ndarray) -> float:
    """``tr(P_U P_V) / max(dim U, dim V)``: 1 for equal spans, 0 for orthogonal ones."""
    U = np.asarray(U, dtype=np.float64).reshape(len(U), -1)
    V = np.asarray(V, dtype=np.float64).reshape(len(V), -1)
    return float(np.linalg.norm(U.T @ V) ** 2 / max(U.shape[1], V.shape[1]))


# --------------------------------------------------------------------------
# extraction


def extract_dataset(model, images, classes, layer_index: int, cfg, positions_per_image: int = 20,
                    seed: int = 0, image_ids=None, threads: int = 1) -> ActivationContextDataset:
    """Collect (activation, context) pairs at ``layer_index`` w.r.t. each image's class.

    ``positions_per_image`` spatial positions are drawn per image without
    replacement (all of them when the map is smaller), from a generator
    seeded by ``(seed, image id)``, so results do not depend on ``threads``.
    """
    from relsub import attribution as attr
    from relsub import netcore

    images = np.asarray(images, dtype=np.float64)
    classes = np.broadcast_to(np.asarray(classes), (len(images),))
    ids = np.arange(len(images)) if image_ids is None else np.asarray(image_ids)
    attr._check_layer(model, layer_index)

    def one(i):
        trace = netcore.forward(model, images[i])
        c = attr.context_vector(model, trace, layer_index, int(classes[i]), cfg)
        a = trace.outputs[layer_index]
        pos_a, pos_c = attr.to_positions(a), attr.to_positions(c)
        n_pos = len(pos_a)
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, int(ids[i])])
        pick = np.arange(n_pos) if positions_per_image >= n_pos else \
            np.sort(rng.choice(n_pos, size=positions_per_image, replace=False))
        width = a.shape[2] if a.ndim == 3 else 1
        m = len(pick)
        return ActivationContextDataset(pos_a[pick], pos_c[pick], np.full(m, ids[i]), np.full(m, classes[i]),
                                        pick // width, pick % width)

    return ActivationContextDataset.concat(ordered_map(one, range(len(images)), threads))
