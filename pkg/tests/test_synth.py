from __future__ import annotations

import numpy as np
import pytest

from relsub import attribution as attr
from relsub import netcore as nc
from relsub import subspace as ss
from relsub import synth


def cos(u, v):
    return abs(np.ravel(u) @ np.ravel(v)) / (np.linalg.norm(u) * np.linalg.norm(v))


def same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def test_prca2d_planted_structure():
    cloud = synth.gen_prca2d(0)
    assert cos(ss.pca(cloud.dataset, 1).block(0), cloud.distractor_axis) >= 0.95
    assert cos(ss.prca(cloud.dataset, 1).block(0), cloud.planted_axes) >= 0.95
    assert np.linalg.norm(cloud.planted_axes) == pytest.approx(1.0, abs=1e-15)
    again = synth.gen_prca2d(0)
    assert same((cloud.dataset.A, cloud.dataset.C), (again.dataset.A, again.dataset.C))
    with pytest.raises(ValueError):
        synth.gen_prca2d(0, n=5)


def test_drsa2d_planted_structure():
    cloud = synth.gen_drsa2d(1)
    ds = cloud.dataset
    opts = ss.DrsaOptions(block_dims=(1, 1))
    b_r, b_s = ss.drsa(ds, opts), ss.dsa(ds, opts)
    def gap(b):
        return max(min(np.degrees(np.arccos(min(1.0, cos(b.block(k), cloud.planted_axes[:, j])))) for j in range(2))
                   for k in range(2))
    assert gap(b_r) < 8.1 and gap(b_s) > gap(b_r) + 10
    relevant = ds.classes < 2
    assert np.all(np.isfinite(ds.C)) and np.all(np.linalg.norm(ds.C[relevant], axis=1) > 0)
    assert np.array_equal(synth.gen_drsa2d(1).dataset.A, ds.A)


@pytest.mark.parametrize("mode", ["single", "multi"])
def test_concepts_image_determinism_and_shapes(mode):
    a = synth.gen_concepts_image(3, K=3, mode=mode, n_train=12, n_val=6)
    b = synth.gen_concepts_image(3, K=3, mode=mode, n_train=12, n_val=6)
    assert same((a.train_images, a.val_images, a.train_labels), (b.train_images, b.val_images, b.train_labels))
    assert a.train_images.shape == (12, 1, 16, 16) and a.model.shapes[2][0] == 3
    assert nc.dumps_model(a.model) == nc.dumps_model(b.model)


def test_concepts_image_classifies_its_labels():
    for mode in ("single", "multi"):
        t = synth.gen_concepts_image(0, K=3, mode=mode)
        acc = np.mean(nc.predict(t.model, t.val_images).argmax(1) == t.val_labels)
        assert acc >= 0.95


def test_concepts_image_output_is_weighted_detector_sum():
    t = synth.gen_concepts_image(1, K=3, mode="multi", noise=0.0, threshold=0.0, n_train=6, n_val=6)
    sums = synth.channel_sums(t.model, t.val_images)
    np.testing.assert_allclose(nc.predict(t.model, t.val_images), sums @ t.meta["class_weights"], rtol=1e-12)


def test_concepts_image_drsa_recovers_channels_single_mode():
    t = synth.gen_concepts_image(0, K=3, mode="single")
    cfg = attr.AttributionConfig()
    ds = ss.extract_dataset(t.model, t.train_images, t.train_labels, t.layer_index, cfg)
    b = ss.drsa(ds, ss.DrsaOptions(block_dims=(1, 1, 1)))
    for k in range(3):
        assert max(ss.projector_overlap(b.block(k), t.concept_axes[:, j]) for j in range(3)) >= 0.9


def test_concepts_image_argument_checks():
    with pytest.raises(ValueError):
        synth.gen_concepts_image(0, K=5)
    with pytest.raises(ValueError):
        synth.gen_concepts_image(0, image_dim=12)
    with pytest.raises(ValueError):
        synth.gen_concepts_image(0, K=4, distractor=True)


def test_distractor_channel_never_changes_decision():
    t = synth.gen_concepts_image(0, K=3, distractor=True)
    W = t.meta["class_weights"]
    assert np.ptp(W[3]) == 0 and W.shape == (4, 3)


def test_cleverhans_planted_structure():
    t = synth.gen_cleverhans(0, poison_rate=0.25)
    pred = lambda X: nc.predict(t.model, X).argmax(1)
    clean = np.mean(pred(t.val_clean) == t.val_labels) * 100
    poisoned = np.mean(pred(t.val_poisoned) == t.val_labels) * 100
    assert clean - poisoned >= 5
    assert t.glyph_mask.mean() == 1 / 16 and t.glyph_mask[0, 0]
    assert np.array_equal(t.glyph_labels, ((t.val_labels == 0) | t.poisoned).astype(int))
    assert np.all(t.val_labels[t.poisoned] == 1)


def test_cleverhans_zero_poison_rate():
    t = synth.gen_cleverhans(2, poison_rate=0.0)
    assert np.array_equal(t.val_clean, t.val_poisoned) and not t.poisoned.any()
    with pytest.raises(ValueError):
        synth.gen_cleverhans(0, poison_rate=1.5)


def test_cleverhans_determinism():
    a, b = synth.gen_cleverhans(4), synth.gen_cleverhans(4)
    assert same((a.train_images, a.val_poisoned, a.glyph_labels), (b.train_images, b.val_poisoned, b.glyph_labels))


def test_random_nets():
    m = synth.random_conv_net(0)
    assert m.shapes[2] == (4, 6, 6) and all(getattr(l, "bias", None) is None for l in m.layers)
    assert synth.random_dense_net(0, bias=True).layers[0].bias is not None
    assert nc.dumps_model(synth.random_dense_net(9)) == nc.dumps_model(synth.random_dense_net(9))
