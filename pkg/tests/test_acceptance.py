"""One pass/fail test per acceptance criterion."""

from __future__ import annotations

import time

import numpy as np
import pytest

from relsub import attribution as attr
from relsub import evaluation as ev
from relsub import netcore as nc
from relsub import subspace as ss
from relsub import synth
from relsub import vlayer as vl
from relsub.subspace import ActivationContextDataset


def _random_blocks(rng, D):
    cuts = np.sort(rng.choice(np.arange(1, D), size=rng.integers(0, min(D - 1, 4) + 1), replace=False))
    return tuple(np.diff(np.concatenate([[0], cuts, [D]])).tolist())


def _dataset(A, C=None):
    A = np.asarray(A, dtype=np.float64)
    C = A.copy() if C is None else np.asarray(C, dtype=np.float64)
    n = len(A)
    z = np.zeros(n, dtype=np.int64)
    return ActivationContextDataset(A, C, np.arange(n), z, z, z)


# 1 ------------------------------------------------------------------------


def test_01_conservation_of_concept_relevance():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(1000):
        D = (2, 8, 64)[trial % 3]
        basis = vl.SubspaceBasis(ss.random_orthogonal(D, [1, trial]), _random_blocks(rng, D))
        a, c = rng.standard_normal(D), rng.standard_normal(D)
        Rk = vl.concept_relevance(a, c, basis)
        worst = max(worst, abs(Rk.sum() - a @ c))
    assert worst <= 1e-10
    assert time.perf_counter() - t0 < 1.0


# 2 ------------------------------------------------------------------------


def test_02_positivity_when_context_is_scaled_activation():
    rng = np.random.default_rng(2)
    lo = np.inf
    for trial in range(1000):
        D = int(rng.integers(2, 33))
        basis = vl.SubspaceBasis(ss.random_orthogonal(D, [2, trial]), _random_blocks(rng, D))
        a = rng.standard_normal(D)
        xi = (0.0, 0.5, 3.0)[trial % 3]
        lo = min(lo, vl.concept_relevance(a, xi * a, basis).min())
    assert lo >= -1e-12


# 3 ------------------------------------------------------------------------


def test_03_prca_reduces_to_uncentered_pca():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng([3, seed])
        A = rng.standard_normal((200, 6)) @ rng.standard_normal((6, 6))
        ds = _dataset(A)
        for d in (1, 2):
            P = ss.prca(ds, d).block(0)
            Q = ss.pca(ds, d).block(0)
            worst = max(worst, ss.projector_distance(P, Q))
    assert worst <= 1e-8


# 4 ------------------------------------------------------------------------


def test_04_drsa_reduces_to_fourth_moment_objective():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng([4, seed])
        D = 5
        A = rng.laplace(size=(400, D)) @ rng.standard_normal((D, D))
        # whiten
        A = A - A.mean(axis=0)
        evals, V = np.linalg.eigh(A.T @ A / len(A))
        A = A @ V @ np.diag(evals**-0.5) @ V.T
        ds = _dataset(A)
        U = ss.random_orthogonal(D, [4, seed, 1])
        J = ss.drsa_objective(U, ds, (1,) * D, q=2.0)
        fourth = np.mean((A @ U) ** 4)  # mean over samples and components
        worst = max(worst, abs(J**2 - fourth))
    assert worst <= 1e-10


# 5 ------------------------------------------------------------------------


def test_05_prca_optimality_and_ordering_on_planted_cloud():
    t0 = time.perf_counter()
    cloud = synth.gen_prca2d(5)
    ds = cloud.dataset
    u = ss.prca(ds, 1).block(0)
    best_eig = ss.mean_relevance(u, ds)
    sweep = max(ss.mean_relevance(synth._unit(ang)[:, None], ds) for ang in np.arange(0.0, 180.0, 0.5))
    assert sweep <= best_eig + 1e-6
    assert abs(u[:, 0] @ cloud.planted_axes[:, 0]) >= 0.95
    v = ss.pca(ds, 1).block(0)
    assert abs(v[:, 0] @ cloud.distractor_axis) >= 0.95
    assert time.perf_counter() - t0 < 5.0


# 6 ------------------------------------------------------------------------


def test_06_drsa_gradient_matches_finite_differences():
    blocks = (2, 2, 2)
    worst = 0.0
    for point in range(20):
        rng = np.random.default_rng([6, point])
        A = rng.standard_normal((150, 6))
        C = A @ rng.standard_normal((6, 6)) * 0.5 + rng.standard_normal((150, 6))
        ds = _dataset(A, C)
        U = ss.random_orthogonal(6, [6, point])
        G = ss.drsa_gradient(U, ds, blocks)
        F = np.zeros_like(U)
        h = 1e-6
        for i in range(6):
            for j in range(6):
                E = np.zeros_like(U)
                E[i, j] = h
                F[i, j] = (ss.drsa_objective(U + E, ds, blocks) - ss.drsa_objective(U - E, ds, blocks)) / (2 * h)
        worst = max(worst, np.linalg.norm(G - F) / np.linalg.norm(G))
    assert worst <= 1e-5


# 7 ------------------------------------------------------------------------


def test_07_optimizer_hygiene():
    cloud = synth.gen_drsa2d(7)
    rng = np.random.default_rng(7)
    A = np.hstack([cloud.dataset.A, rng.standard_normal((len(cloud.dataset), 2))])
    C = np.hstack([cloud.dataset.C, 0.1 * rng.standard_normal((len(cloud.dataset), 2))])
    ds = _dataset(A, C)
    opts = ss.DrsaOptions(block_dims=(2, 1, 1), iterations=300, restarts=3, seed=11)
    fit = ss.drsa_fit(ds, opts)
    assert max(e.max() for e in fit.ortho_errors) <= 1e-8
    again = ss.drsa_fit(ds, opts)
    assert np.array_equal(fit.basis.matrix, again.basis.matrix)
    single = ss.drsa_fit(ds, ss.DrsaOptions(block_dims=(2, 1, 1), iterations=300, restarts=1, seed=11))
    assert fit.objective >= single.objective


# 8 ------------------------------------------------------------------------


def _bias_free_nets(n):
    for seed in range(n):
        if seed % 2:
            yield synth.random_dense_net(seed, sizes=(6, 8, 5, 3)), np.random.default_rng(seed).standard_normal(6)
        else:
            model = synth.random_conv_net(seed, in_shape=(1, 6, 6), channels=(3, 2), pool="avg" if seed % 4 else "max")
            yield model, np.random.default_rng(seed).standard_normal((1, 6, 6))


def test_08_attribution_conservation_on_bias_free_nets():
    for model, x in _bias_free_nets(50):
        f_all = nc.forward(model, x).logits
        c = int(np.argmax(f_all))
        f = f_all[c]
        tol = 1e-6 * (1 + abs(f))
        assert abs(attr.grad_x_input(model, x, c).sum() - f) <= tol
        assert abs(attr.explain(model, x, c, attr.AttributionConfig(method="LRP")).sum() - f) <= tol
        groups = attr.patch_groups(x.shape, 3 if x.ndim == 3 else 1)
        assert abs(attr.shapley_exact(model, x, c, groups).sum() - f) <= tol
        ig = attr.integrated_gradients(model, x, c, attr.AttributionConfig(method="IntegratedGradients", ig_steps=1000))
        assert abs(ig.sum() - f) <= 1e-3


# 9 ------------------------------------------------------------------------


def _product_model():
    return attr.FunctionModel(fn=lambda X: X.prod(axis=1, keepdims=True), input_shape=(3,), num_classes=1)


def test_09_shapley_sampling_oracle():
    model = _product_model()
    x = np.array([0.5, 1.0, 1.5])
    exact = attr.shapley_exact(model, x, 0)

    def err(perms, seed):
        cfg = attr.AttributionConfig(method="ShapleySampling", shapley_permutations=perms, seed=seed)
        return np.abs(attr.shapley_sampling(model, x, 0, cfg=cfg) - exact).max()

    assert err(2000, 0) <= 0.1
    e500 = np.mean([err(500, s) for s in range(20)])
    e8000 = np.mean([err(8000, s) for s in range(20)])
    assert e8000 <= e500


# 10 -----------------------------------------------------------------------


def test_10_two_step_lrp_strong_conservation():
    cfg = attr.AttributionConfig(method="LRP")
    worst = 0.0
    for seed in range(20):
        if seed % 2:
            model = synth.random_dense_net(seed, sizes=(6, 8, 5, 3))
            x = np.random.default_rng(seed).standard_normal(6)
            layer, D = 1, 8
        else:
            model = synth.random_conv_net(seed, in_shape=(1, 8, 8), channels=(4, 3))
            x = np.random.default_rng(seed).standard_normal((1, 8, 8))
            layer, D = 1, 4
        c = int(np.argmax(nc.forward(model, x).logits))
        rng = np.random.default_rng([10, seed])
        basis = vl.SubspaceBasis(ss.random_orthogonal(D, [10, seed]), _random_blocks(rng, D))
        joint = vl.two_step_explain(model, x, c, layer, basis, cfg)
        one = attr.explain(model, x, c, cfg)
        worst = max(worst, np.abs(joint.maps.sum(axis=0) - one).max())
    assert worst <= 1e-8


# 11 -----------------------------------------------------------------------


def test_11_drsa_disentanglement_recovery():
    t0 = time.perf_counter()
    cfg = attr.AttributionConfig(method="LRP")
    task = synth.gen_concepts_image(0, K=3, mode="multi")
    m = task.model
    ds = ss.extract_dataset(m, task.train_images, task.train_labels, task.layer_index, cfg)
    basis = ss.drsa(ds, ss.DrsaOptions(block_dims=(1, 1, 1)))
    overlaps = [max(ss.projector_overlap(basis.block(k), task.concept_axes[:, j]) for j in range(3))
                for k in range(3)]
    randoms = [ss.random_basis(3, (1, 1, 1), s) for s in (1, 2, 3)]
    X, Y = task.val_images[:20], task.val_labels[:20]

    def scores(bases):
        joints = [vl.two_step_explain(m, x, int(y), task.layer_index, b, cfg) for b in bases for x, y in zip(X, Y)]
        aupc = np.mean([ev.patch_flip_multi(m, x, int(y), j).aupc
                        for j, (x, y) in zip(joints, [(x, y) for _ in bases for x, y in zip(X, Y)])])
        return ev.separability(joints), aupc

    sep_d, aupc_d = scores([basis])
    sep_r, aupc_r = scores(randoms)
    print(f"overlaps={np.round(overlaps, 4)} separability DRSA={sep_d:.3f} random={sep_r:.3f} "
          f"AUPC_multi DRSA={aupc_d:.3f} random={aupc_r:.3f}")
    assert min(overlaps) >= 0.9
    assert sep_d > sep_r
    assert time.perf_counter() - t0 < 120
    assert aupc_d < aupc_r, f"AUPC_multi DRSA {aupc_d:.3f} is not below random {aupc_r:.3f}"


# 12 -----------------------------------------------------------------------


def test_12_prca_beats_pca_and_random_in_patch_flipping():
    cfg = attr.AttributionConfig(method="LRP")
    task = synth.gen_concepts_image(0, K=3, mode="single", distractor=True)
    m, L = task.model, task.layer_index
    ds = ss.extract_dataset(m, task.train_images, task.train_labels, L, cfg)
    U_prca, U_pca = {}, {}
    for w in range(3):
        sub = ds.subset(ds.classes == w)
        U_prca[w] = ss.prca(sub, 1).block(0)
        U_pca[w] = ss.pca(sub, 1).block(0)
    U_rand = [ss.random_orthogonal(ds.dim, s)[:, :1] for s in (1, 2, 3)]
    res = {"prca": [], "pca": [], "random": []}
    for x, w in zip(task.val_images[:20], task.val_labels[:20]):
        w = int(w)

        def aupc(U):
            return ev.patch_flip(m, x, w, vl.subspace_explain(m, x, w, L, U, cfg)).aupc

        res["prca"].append(aupc(U_prca[w]))
        res["pca"].append(aupc(U_pca[w]))
        res["random"].append(np.mean([aupc(U) for U in U_rand]))
    mean = {k: float(np.mean(v)) for k, v in res.items()}
    print(f"AUPC PRCA={mean['prca']:.3f} PCA={mean['pca']:.3f} random={mean['random']:.3f} "
          f"margins PCA-PRCA={mean['pca'] - mean['prca']:.3f} random-PRCA={mean['random'] - mean['prca']:.3f}")
    assert mean["prca"] < mean["pca"]
    assert mean["prca"] < mean["random"]


# 13 -----------------------------------------------------------------------


def clever_hans_blocks(task, basis, cfg, class_index=0, n=10):
    """Blocks whose positive explanation mass lies mostly inside the watermark region."""
    images = task.train_images[task.train_labels == class_index][:n]
    mask = task.glyph_mask.ravel()
    share = np.zeros(basis.num_blocks)
    for x in images:
        maps = np.clip(vl.two_step_explain(task.model, x, class_index, task.layer_index, basis, cfg).maps,
                       0, None).reshape(basis.num_blocks, -1)
        share += maps[:, mask].sum(axis=1) / np.maximum(maps.sum(axis=1), 1e-12)
    return [k for k in range(basis.num_blocks) if share[k] / len(images) > 0.5]


def test_13_clever_hans_detection_and_refinement():
    t0 = time.perf_counter()
    cfg = attr.AttributionConfig(method="LRP")
    task = synth.gen_cleverhans(0, poison_rate=0.25)
    m, L, A = task.model, task.layer_index, 0
    own = task.train_images[task.train_labels == A]
    ds = ss.extract_dataset(m, own, np.full(len(own), A), L, cfg)
    basis = ss.drsa(ds, ss.DrsaOptions(block_dims=(1, 1, 1)))
    ch = clever_hans_blocks(task, basis, cfg, A)
    assert ch, "no block concentrates on the watermark"

    def scores(X):
        return np.array([vl.concept_scores(m, x, A, L, basis, cfg) for x in X])

    auc = ev.auroc(scores(task.val_poisoned)[:, ch].sum(axis=1), task.glyph_labels)
    means = scores(own).mean(axis=0)

    def accuracy(X, refined):
        if refined:
            pred = [np.argmax(vl.refined_logits(m, x, A, L, basis, ch, means, cfg)) for x in X]
        else:
            pred = nc.predict(m, X).argmax(axis=1)
        return 100.0 * np.mean(np.asarray(pred) == task.val_labels)

    acc = {(s, r): accuracy(X, r) for s, X in (("clean", task.val_clean), ("poisoned", task.val_poisoned))
           for r in (False, True)}
    print(f"CH blocks={ch} AUROC={auc:.4f} accuracy={acc}")
    assert auc >= 0.95
    assert acc["poisoned", True] - acc["poisoned", False] >= 5.0
    assert abs(acc["clean", True] - acc["clean", False]) <= 1.0
    assert time.perf_counter() - t0 < 120


# 14 -----------------------------------------------------------------------


def test_14_class_subspace_matching():
    cfg = attr.AttributionConfig(method="LRP")
    task = synth.gen_concepts_image(0, K=3, mode="single")
    m, L = task.model, task.layer_index
    ds = ss.extract_dataset(m, task.train_images, task.train_labels, L, cfg)
    basis = ss.drsa(ds, ss.DrsaOptions(block_dims=(1, 1, 1)))
    planted = [int(np.argmax([ss.projector_overlap(basis.block(k), task.concept_axes[:, w]) for k in range(3)]))
               for w in range(3)]
    per_class = {w: np.array([vl.concept_scores(m, x, w, L, basis, cfg) for x in task.val_images[task.val_labels == w]])
                 for w in range(3)}
    classes, table = ev.class_subspace_match(per_class, alpha=0.75, beta=0.85)
    print(f"planted block per class={planted} table=\n{table.astype(int)}")
    for w in classes:
        assert table[w, planted[w]], f"class {w} not matched to its planted subspace"
        assert table[w].sum() - 1 <= 1, f"class {w} matched to more than one spurious subspace"
