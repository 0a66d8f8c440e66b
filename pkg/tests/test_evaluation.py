from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import bias_free_net
from relsub import attribution as attr
from relsub import evaluation as ev
from relsub import netcore as nc
from relsub import subspace as ss
from relsub import synth
from relsub import vlayer as vl

H = 8


def pixel_model(fn):
    return attr.FunctionModel(fn=lambda X: np.asarray(fn(X)).reshape(len(X), 1), input_shape=(1, H, H))


def linear_pixel_model(w):
    return pixel_model(lambda X: (X * w).sum(axis=(1, 2, 3)))


# AUPC ----------------------------------------------------------------------------


def test_aupc_constant_output_is_zero():
    m = pixel_model(lambda X: np.full(len(X), 3.0))
    x = np.random.default_rng(0).standard_normal((1, H, H))
    rep = ev.patch_flip(m, x, 0, x, ev.FlipOptions(patch_size=2, aupc_rule="difference"))
    assert rep.aupc == 0.0


def test_aupc_hand_example():
    assert ev.aupc_value([4.0, 2.0, 0.0], [0.5, 0.5], rule="difference") == 1.0
    assert ev.aupc_value([4.0, 2.0, 0.0], [0.5, 0.5], rule="trapezoid") == 2.0


def test_oracle_versus_reversed_heatmap():
    r = np.random.default_rng(1)
    w = r.uniform(0, 1, (1, H, H))
    m = linear_pixel_model(w)
    x = r.uniform(0, 1, (1, H, H))
    oracle = w * x
    zero = dict(patch_size=2, inpainter="zero")
    d = {h: ev.patch_flip(m, x, 0, s * oracle, ev.FlipOptions(aupc_rule="difference", **zero)).aupc
         for h, s in (("oracle", 1), ("reversed", -1))}
    # with one patch per step the weighted-drop sum is order invariant
    assert d["oracle"] >= d["reversed"] - 1e-12
    t = {h: ev.patch_flip(m, x, 0, s * oracle, ev.FlipOptions(**zero)).aupc for h, s in (("o", 1), ("r", -1))}
    assert t["o"] < t["r"]


def test_flip_report_schedule_and_weights():
    m = linear_pixel_model(np.ones((1, H, H)))
    x = np.ones((1, H, H))
    rep = ev.patch_flip(m, x, 0, x, ev.FlipOptions(patch_size=2, flips_per_step="quadratic"))
    assert [len(s) for s in rep.removed] == [1, 4, 9, 2]
    assert rep.weights.sum() == pytest.approx(1.0) and np.all((rep.weights > 0) & (rep.weights <= 1))
    assert rep.outputs[0] == 64.0


def test_telescoping_without_rectification():
    m, _ = bias_free_net(0)
    x = np.random.default_rng(0).standard_normal((1, H, H))
    rep = ev.patch_flip(m, x, 1, x, ev.FlipOptions(rectify_output=False))
    assert np.diff(rep.outputs).sum() == pytest.approx(rep.outputs[-1] - rep.outputs[0], abs=1e-12)


def test_indivisible_grid_rejected():
    m = linear_pixel_model(np.ones((1, H, H)))
    with pytest.raises(nc.ShapeError):
        ev.patch_flip(m, np.ones((1, H, H)), 0, np.ones((1, H, H)), ev.FlipOptions(patch_size=3))


def test_flip_options_validation():
    with pytest.raises(ValueError):
        ev.FlipOptions(inpainter="telea")
    with pytest.raises(ValueError):
        ev.FlipOptions(flips_per_step=0)


def test_neighborhood_mean_inpainting():
    img = np.arange(16, dtype=float).reshape(4, 4)
    removed = np.zeros((4, 4), bool)
    removed[1:3, 1:3] = True
    out = ev.inpaint(img, removed, "neighborhood_mean")
    assert np.array_equal(out[~removed], img[~removed])
    assert out[1, 1] == pytest.approx((1 + 4) / 2)
    assert np.all(ev.inpaint(img, np.ones((4, 4), bool), "neighborhood_mean") == 0)


def test_report_files(tmp_path):
    m = linear_pixel_model(np.ones((1, H, H)))
    rep = ev.patch_flip(m, np.ones((1, H, H)), 0, np.ones((1, H, H)))
    rep.save(tmp_path / "r")
    assert "TELEA" in (tmp_path / "r.json").read_text()
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "step,fraction_removed,output"


# multi-component flipping ------------------------------------------------------


def test_multi_with_one_component_equals_single():
    m, _ = bias_free_net(2)
    x = np.random.default_rng(2).standard_normal((1, H, H))
    hm = attr.explain(m, x, 0, attr.AttributionConfig())
    assert ev.patch_flip_multi(m, x, 0, hm[None]).aupc == ev.patch_flip(m, x, 0, hm).aupc
    assert ev.patch_flip_multi(m, x, 0, np.stack([hm, hm])).aupc == ev.patch_flip(m, x, 0, hm).aupc


def test_union_grows_monotonically():
    r = np.random.default_rng(3)
    m = linear_pixel_model(np.ones((1, H, H)))
    x = r.standard_normal((1, H, H))
    maps = r.standard_normal((3, 1, H, H))
    sizes = [np.cumsum([len(s) for s in ev.patch_flip_multi(m, x, 0, maps[:k], ev.FlipOptions(patch_size=2)).removed])
             for k in (1, 2, 3)]
    for s in sizes:
        assert np.all(np.diff(s) > 0)
    for small, big in zip(sizes, sizes[1:]):
        assert np.all(small[: len(big)] <= big[: len(small)])


def test_aligned_components_beat_random_split():
    # either region alone sustains the output, so removing both in parallel pays off
    left = np.zeros((1, H, H), bool)
    left[..., : H // 2] = True
    m = pixel_model(lambda X: np.maximum((X * left).sum(axis=(1, 2, 3)), (X * ~left).sum(axis=(1, 2, 3))))
    opts = ev.FlipOptions(patch_size=2, inpainter="zero")
    aligned, mixed = [], []
    for s in range(20):
        r = np.random.default_rng(s)
        x = r.exponential(size=(1, H, H))
        R = np.stack([x * left, x * ~left])
        th = r.uniform(0, 2 * np.pi)
        Q = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        aligned.append(ev.patch_flip_multi(m, x, 0, R, opts).aupc)
        mixed.append(ev.patch_flip_multi(m, x, 0, np.tensordot(Q, R, 1), opts).aupc)
    assert np.mean(aligned) < np.mean(mixed)


# total relevance ---------------------------------------------------------------


def test_total_relevance_full_space_is_mean_output():
    nets = [bias_free_net(s) for s in (1, 3, 5)]
    m = nets[0][0]
    X = np.stack([np.random.default_rng(s).standard_normal(6) for s in range(5)])
    f = nc.predict(m, X)[:, 0].mean()
    assert abs(ev.total_relevance_metric(m, X, 0, 1, np.eye(8), attr.AttributionConfig()) - f) <= 1e-8
    assert ev.total_relevance_metric(m, X, 0, 1, np.zeros((8, 0)), attr.AttributionConfig()) == 0.0


def test_total_relevance_prca_beats_pca_on_planted_cloud():
    # a linear head on the 2-D cloud, with contexts given by its weights
    cloud = synth.gen_prca2d(0)
    ds = cloud.dataset
    U_r, U_p = ss.prca(ds, 1).block(0), ss.pca(ds, 1).block(0)
    assert ss.mean_relevance(U_r, ds) > ss.mean_relevance(U_p, ds)
    w = cloud.planted_axes[:, 0]
    m = nc.Model([nc.Dense(np.eye(2)), nc.Dense(w[:, None])], (2,), 1)
    X = ds.A[:50]
    cfg = attr.AttributionConfig(method="GradInput")
    tr = {k: ev.total_relevance_metric(m, X, 0, 0, U, cfg) for k, U in (("prca", U_r), ("pca", U_p))}
    assert tr["prca"] >= tr["pca"]


@pytest.mark.parametrize("method", ["IntegratedGradients", "ShapleyExact"])
def test_total_relevance_uses_shortcut(method):
    m = nc.Model([nc.Dense(np.array([[1.0, 0.0, 0.5], [0.2, 1.0, 0.0]])), nc.ReLU(),
                  nc.Dense(np.array([[1.0], [-0.5], [2.0]]))], (2,), 1)
    X = np.array([[1.2, 0.8], [0.5, 0.1]])
    U = ss.random_orthogonal(3, 4)[:, :2]
    cfg = attr.AttributionConfig(method=method, patch_size=1)
    expect = np.mean([vl.total_relevance_shortcut(m, x, 0, 1, U, cfg) for x in X])
    assert ev.total_relevance_metric(m, X, 0, 1, U, cfg) == pytest.approx(expect)


# separability / peakness -----------------------------------------------------------


def test_separability_single_component_is_zero():
    assert ev.separability(np.random.default_rng(0).uniform(size=(1, 5))) == 0


def test_identical_maps():
    R = np.array([0.5, 2.0, 1.0])
    maps = np.stack([R, R, R])
    assert ev.separability(maps) == 0 and ev.peakness(maps) == 3 * 2.0


def test_two_region_separability():
    maps = np.array([[3.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.5]])  # 2x2 image, flattened
    assert ev.separability(maps) == pytest.approx(1.5)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_separability_nonnegative_on_nonnegative_maps(seed):
    maps = np.random.default_rng(seed).uniform(size=(3, 10))
    assert ev.separability(maps) >= 0


# class-subspace matching -----------------------------------------------------------


def test_match_examples():
    per = {0: np.ones(5), 1: np.full(100, 0.5)}
    assert ev.quantile(np.concatenate(list(per.values())), 0.85) == 0.5
    _, table = ev.class_subspace_match(per)
    assert table[0, 0] and not table[1, 0]


def test_match_identical_distributions():
    s = np.random.default_rng(0).standard_normal(200)
    _, table = ev.class_subspace_match({0: s, 1: s.copy()})
    assert not table.any()


def test_match_dominant_class_close_quantiles():
    r = np.random.default_rng(1)
    per = {0: r.uniform(10, 11, 30), 1: r.uniform(0, 1, 30), 2: r.uniform(0, 1, 30)}
    _, table = ev.class_subspace_match(per, alpha=0.85 - 1e-6, beta=0.85)
    assert table[0, 0] and not table[1:, 0].any()


def test_match_rejects_bad_arguments():
    with pytest.raises(ValueError):
        ev.class_subspace_match({0: np.ones(3)}, alpha=0.9, beta=0.8)
    with pytest.raises(ValueError):
        ev.class_subspace_match({0: np.ones(3), 1: np.zeros(0)})


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 10), shift=st.floats(-5, 5))
def test_match_affine_invariance(seed, scale, shift):
    r = np.random.default_rng(seed)
    per = {c: r.standard_normal((20, 3)) + c for c in range(3)}
    _, t1 = ev.class_subspace_match(per)
    _, t2 = ev.class_subspace_match({c: scale * s + shift for c, s in per.items()})
    assert np.array_equal(t1, t2)


def test_quantile_convention():
    assert ev.quantile([1.0, 2.0, 3.0, 4.0], 0.5) == 2.5


# AUROC ---------------------------------------------------------------------------------


def test_auroc_examples():
    assert ev.auroc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert ev.auroc([7, 7, 7], [0, 1, 1]) == 0.5
    r = np.random.default_rng(0)
    assert abs(ev.auroc(r.standard_normal(10_000), r.integers(0, 2, 10_000)) - 0.5) <= 0.02
    with pytest.raises(ValueError):
        ev.auroc([1, 2], [1, 1])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_auroc_negation(seed):
    r = np.random.default_rng(seed)
    s = r.integers(0, 5, 30).astype(float)
    y = np.r_[0, 1, r.integers(0, 2, 28)]
    # exact up to the final division's rounding
    assert abs(ev.auroc(-s, y) - (1 - ev.auroc(s, y))) <= 1e-15


# prototypes -------------------------------------------------------------------------------


def _proto_ds():
    r = np.random.default_rng(0)
    A = r.uniform(0.1, 0.2, (20, 2))
    A[[3, 7]] *= 50  # images 3 and 7 carry all the relevance
    return ss.ActivationContextDataset(A, A, image_ids=np.arange(20))


def test_prototypes_examples():
    ds = _proto_ds()
    b = vl.SubspaceBasis.identity(2, (1, 1))
    ids, _ = ev.prototypes([4, 5], b, ds, n=2, N=1)
    assert ids.tolist() == [4, 5]
    ids, _ = ev.prototypes(np.arange(20), b, ds, n=2, N=1000, seed=1)
    assert ids.tolist() == [3, 7]
    assert np.array_equal(ev.prototypes(np.arange(20), b, ds, 3, 50, seed=2)[0],
                          ev.prototypes(np.arange(20), b, ds, 3, 50, seed=2)[0])
    with pytest.raises(ValueError):
        ev.prototypes([1, 2], b, ds, n=3)


def test_class_balanced_mean():
    assert ev.class_balanced_mean([1.0, 1.0, 1.0, 4.0], [0, 0, 0, 1]) == 2.5
