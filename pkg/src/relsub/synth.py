"""Seeded synthetic data and hand-built models with planted ground truth.

* ``gen_prca2d`` / ``gen_drsa2d``: two-dimensional activation/context clouds.
* ``gen_concepts_image``: small textured images whose classes are built from
  concept patterns, classified by a conv net with one detector channel per
  pattern.
* ``gen_cleverhans``: a two-class task where one class is partly recognised
  through a corner watermark.
* ``random_dense_net`` / ``random_conv_net``: seeded random ReLU networks.

Detector channels use 2x2 Walsh kernels, which are mutually orthogonal, so
a channel responds to its own texture and (up to edge effects) to nothing
else.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from relsub import netcore as nc
from relsub.subspace import ActivationContextDataset

# 2x2 detector kernels, all mutually orthogonal
KERNELS = {
    "hstripes": np.array([[1.0, 1.0], [-1.0, -1.0]]),
    "vstripes": np.array([[1.0, -1.0], [1.0, -1.0]]),
    "checker": np.array([[1.0, -1.0], [-1.0, 1.0]]),
    "blob": np.array([[1.0, 1.0], [1.0, 1.0]]),
}
CONCEPT_ORDER = ("hstripes", "vstripes", "checker", "blob")


def _unit(deg: float) -> np.ndarray:
    r = np.deg2rad(deg)
    return np.array([np.cos(r), np.sin(r)])


# --------------------------------------------------------------------------
# 2-D clouds


@dataclass
class Cloud2D:
    dataset: ActivationContextDataset
    planted_axes: np.ndarray  # (2, k) unit columns
    distractor_axis: np.ndarray  # (2,)


def gen_prca2d(seed: int, n: int = 500, angle: float = 30.0) -> Cloud2D:
    """High activation variance along a distractor axis, model response along the other.

    Activations have standard deviations 3 and 1 along ``e1`` and ``e2``
    (rotated by ``angle``); contexts respond positively to the ``e2``
    coordinate and mildly negatively to the ``e1`` one.
    """
    if n < 10:
        raise ValueError("gen_prca2d needs n >= 10")
    rng = np.random.default_rng(seed)
    distractor, planted = _unit(angle), _unit(angle + 90.0)
    z = rng.standard_normal((n, 2)) * np.array([3.0, 1.0])
    A = z[:, :1] * distractor + z[:, 1:] * planted
    C = z[:, 1:] * planted - 0.3 * z[:, :1] * distractor + 0.1 * rng.standard_normal((n, 2))
    return Cloud2D(ActivationContextDataset(A, C), planted[:, None], distractor)


def gen_drsa2d(seed: int, n: int = 600, angles=(30.0, 120.0), distractor_angle: float = 55.0) -> Cloud2D:
    """Two relevant 1-D concepts plus a heavy-tailed, irrelevant direction.

    A third of the samples express each concept (activation and context both
    along the concept axis); the rest are large Student-t activations along
    the distractor axis with near-zero context. DSA, which ignores contexts,
    is pulled toward the distractor; DRSA is not.
    """
    if n < 10:
        raise ValueError("gen_drsa2d needs n >= 10")
    rng = np.random.default_rng(seed)
    axes = np.stack([_unit(a) for a in angles], axis=1)
    d = _unit(distractor_angle)
    kind = rng.integers(0, 3, n)
    g = rng.uniform(0.5, 1.5, n)
    h = rng.uniform(0.5, 1.5, n)
    A = np.zeros((n, 2))
    C = np.zeros((n, 2))
    for k in range(2):
        m = kind == k
        A[m] = g[m, None] * axes[:, k] + 0.05 * rng.standard_normal((m.sum(), 2))
        C[m] = h[m, None] * axes[:, k]
    m = kind == 2
    A[m] = 3.0 * rng.standard_t(3, m.sum())[:, None] * d + 0.05 * rng.standard_normal((m.sum(), 2))
    C[m] = 0.01 * rng.standard_normal((m.sum(), 2))
    return Cloud2D(ActivationContextDataset(A, C, classes=kind), axes, d)


# --------------------------------------------------------------------------
# texture images


def texture(name: str, size: int) -> np.ndarray:
    """Unit-amplitude pattern on an odd-sized ``(size-1)^2`` support inside a ``size^2`` tile.

    Stripe and checker edges start and end on -1, so partial detector
    windows at the edges of a tile do not excite the blob detector.
    """
    n = size - 1
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    core = {
        "hstripes": -((-1.0) ** i) * np.ones((1, n)),
        "vstripes": -((-1.0) ** j) * np.ones((n, 1)),
        "checker": -((-1.0) ** (i + j)),
        "blob": np.ones((n, n)),
    }[name]
    tile = np.zeros((size, size))
    tile[:n, :n] = core
    return tile


def detector_conv(names, bias) -> nc.Conv2D:
    w = np.stack([KERNELS[nm] for nm in names])[:, None]
    return nc.Conv2D(w, np.asarray(bias, dtype=np.float64))


def quadrant_slices(image_dim: int) -> list:
    h = image_dim // 2
    return [(slice(r, r + h), slice(c, c + h)) for r in (0, h) for c in (0, h)]


@dataclass
class ImageTask:
    """Images, labels and the model that classifies them, with planted metadata."""

    train_images: np.ndarray  # (N, 1, H, W)
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    model: nc.Model
    layer_index: int
    concept_axes: np.ndarray  # (D, K): planted 1-D concept directions at the layer
    channel_names: tuple
    patch_size: int = 4
    meta: dict = field(default_factory=dict)


def _head(D: int, class_weights: np.ndarray, thresholds: np.ndarray, positions: int) -> list:
    """Pool, sum, threshold each channel, then weight per class."""
    return [
        nc.AvgPool2D(int(np.sqrt(positions))),
        nc.Flatten(),
        nc.Dense(positions * np.eye(D), -np.asarray(thresholds, dtype=np.float64)),
        nc.ReLU(),
        nc.Dense(np.asarray(class_weights, dtype=np.float64)),
    ]


def channel_sums(model: nc.Model, images: np.ndarray, layer_index: int = 1) -> np.ndarray:
    """Per-channel activation sums at ``layer_index`` for a batch of images."""
    A = nc.forward_batch(model, images, stop=layer_index + 1)
    return A.reshape(A.shape[0], A.shape[1], -1).sum(axis=2)


def gen_concepts_image(seed: int, K: int = 3, image_dim: int = 16, n_train: int = 60, n_val: int = 60,
                       mode: str = "single", distractor: bool = False, noise: float = 0.02,
                       conv_bias: float = 0.5, threshold: float = 0.5, patch_size: int = 4,
                       dark: float = 0.5, bright_weight: float = 0.02) -> ImageTask:
    """Concept-texture images with one class per concept.

    Concept ``k`` is a texture detected by channel ``k`` of a 2x2 conv layer;
    the ReLU after it (layer 1) is the analysis layer, so the planted
    concept subspaces are the canonical channel axes.

    ``mode="single"``: a class-``w`` image shows concept ``w`` strongly and
    each other concept with probability 0.5 at a weak amplitude that stays
    below the detection threshold. ``mode="multi"``: every image shows all
    concepts strongly, the class concept slightly stronger than the rest.
    With ``distractor`` an extra channel detects overall brightness, which
    varies strongly between images and adds the same small weight
    ``bright_weight`` to every class logit, so it carries relevance but
    never changes the decision; textures are
    then printed ``dark`` below the background, so brightness dips where
    the concepts are.
    """
    if K not in (2, 3, 4):
        raise ValueError("K must be 2, 3 or 4")
    if distractor and K == 4:
        raise ValueError("the brightness distractor needs a free detector; use K <= 3")
    if image_dim % 2 or (image_dim // 2) % patch_size:
        raise ValueError(f"image_dim must split into quadrants tiled by {patch_size}x{patch_size} patches")
    if mode not in ("single", "multi"):
        raise ValueError("mode must be 'single' or 'multi'")
    names = CONCEPT_ORDER[:K] + (("blob",) if distractor else ())
    D = len(names)
    q = image_dim // 2
    conv = detector_conv(names, [-conv_bias] * K + ([-0.1] if distractor else []))
    positions = (image_dim - 1) ** 2

    # detector sum of one clean unit-amplitude tile, per concept
    probe = nc.Model([conv, nc.ReLU(), nc.AvgPool2D(image_dim - 1), nc.Flatten()], (1, image_dim, image_dim), D)
    ref = np.zeros(K)
    for k in range(K):
        img = np.zeros((1, 1, image_dim, image_dim))
        img[0, 0, :q, :q] = texture(names[k], q)
        ref[k] = probe_sum = nc.forward_batch(probe, img)[0, k] * positions
        if probe_sum <= 0:
            raise ValueError("conv bias too large: the detectors do not respond")
    amp_lo = 0.8
    thresholds = np.zeros(D)
    thresholds[:K] = threshold * amp_lo * ref
    W = np.zeros((D, K))
    W[:K] = 0.5 + 0.5 * np.eye(K)
    W[K:] = bright_weight  # same for every class: never changes the decision
    model = nc.Model([conv, nc.ReLU()] + _head(D, W, thresholds, positions), (1, image_dim, image_dim), K)

    rng = np.random.default_rng(seed)
    quads = quadrant_slices(image_dim)

    def make(n):
        labels = np.arange(n) % K
        rng.shuffle(labels)
        imgs = np.zeros((n, 1, image_dim, image_dim))
        where = np.zeros((n, K), dtype=np.int64)
        amps = np.zeros((n, K))
        for i, w in enumerate(labels):
            place = rng.permutation(4)[:K]
            where[i] = place
            for k in range(K):
                if mode == "multi":
                    amp = rng.uniform(1.0, 1.2) if k == w else rng.uniform(0.8, 0.95)
                elif k == w:
                    amp = rng.uniform(amp_lo, 1.2)
                else:
                    amp = rng.uniform(0.1, 0.25) if rng.random() < 0.5 else 0.0
                amps[i, k] = amp
                rs, cs = quads[place[k]]
                imgs[i, 0, rs, cs] += amp * texture(names[k], q)
                if distractor:
                    imgs[i, 0, rs, cs] -= amp * dark * (texture("blob", q) > 0)
            if distractor:
                imgs[i, 0] += rng.uniform(0.2, 1.5)
            imgs[i, 0] += noise * rng.standard_normal((image_dim, image_dim))
        return imgs, labels, where, amps

    tr, ytr, wtr, atr = make(n_train)
    va, yva, wva, ava = make(n_val)
    return ImageTask(
        train_images=tr, train_labels=ytr, val_images=va, val_labels=yva, model=model, layer_index=1,
        concept_axes=np.eye(D)[:, :K], channel_names=names, patch_size=patch_size,
        meta={"scenario": "concepts_image", "seed": seed, "K": K, "mode": mode, "distractor": distractor,
              "train_quadrants": wtr, "val_quadrants": wva, "train_amplitudes": atr,
              "val_amplitudes": ava, "thresholds": thresholds, "class_weights": W},
    )


@dataclass
class CleverHansTask:
    train_images: np.ndarray
    train_labels: np.ndarray  # 0 = class A (watermarked in training), 1 = class B
    val_clean: np.ndarray
    val_poisoned: np.ndarray
    val_labels: np.ndarray
    glyph_labels: np.ndarray  # 1 where the poisoned-set image carries the glyph
    poisoned: np.ndarray  # bool, stamped class-B images
    model: nc.Model
    layer_index: int
    glyph_mask: np.ndarray  # (H, W) bool
    glyph_axis: np.ndarray  # planted glyph direction at the layer
    channel_names: tuple
    patch_size: int = 4
    meta: dict = field(default_factory=dict)


def gen_cleverhans(seed: int, poison_rate: float = 0.25, n_train: int = 60, n_val: int = 200,
                   image_dim: int = 16, noise: float = 0.02, glyph_weight: float = 8.0,
                   glyph_amp=(0.1, 0.3)) -> CleverHansTask:
    """Class A = horizontal stripes, class B = vertical stripes, watermark = bright corner square.

    Every class-A image carries a faint watermark in the top-left corner
    (1/16 of the image). The model adds ``glyph_weight`` times the glyph
    detector to the class-A logit, so stamping a full-strength watermark on
    a class-B image flips its prediction. In the poisoned validation set a
    ``poison_rate`` fraction of the class-B images is stamped.
    """
    if not 0 <= poison_rate <= 1:
        raise ValueError("poison_rate must lie in [0, 1]")
    names = ("hstripes", "vstripes", "blob")
    D = 3
    q = image_dim // 2
    g = image_dim // 4
    positions = (image_dim - 1) ** 2
    conv = detector_conv(names, [-0.5, -0.5, -0.1])
    W = positions * np.array([[1.0, 0.0], [0.0, 1.0], [glyph_weight, 0.0]])
    model = nc.Model([conv, nc.ReLU(), nc.AvgPool2D(image_dim - 1), nc.Flatten(), nc.Dense(W)],
                     (1, image_dim, image_dim), 2)
    mask = np.zeros((image_dim, image_dim), dtype=bool)
    mask[:g, :g] = True
    glyph = texture("blob", g + 1)[:g, :g]
    quads = quadrant_slices(image_dim)[1:]  # true features avoid the watermark quadrant
    rng = np.random.default_rng(seed)

    def make(n):
        labels = np.arange(n) % 2
        rng.shuffle(labels)
        imgs = np.zeros((n, 1, image_dim, image_dim))
        for i, y in enumerate(labels):
            rs, cs = quads[rng.integers(len(quads))]
            imgs[i, 0, rs, cs] += rng.uniform(0.8, 1.2) * texture(names[y], q)
            if y == 0:
                imgs[i, 0, :g, :g] += rng.uniform(*glyph_amp) * glyph
            imgs[i, 0] += noise * rng.standard_normal((image_dim, image_dim))
        return imgs, labels

    tr, ytr = make(n_train)
    va, yva = make(n_val)
    b_idx = np.flatnonzero(yva == 1)
    n_poison = int(round(poison_rate * len(b_idx)))
    stamped = np.zeros(len(yva), dtype=bool)
    stamped[rng.permutation(b_idx)[:n_poison]] = True
    vp = va.copy()
    vp[stamped, 0, :g, :g] += glyph
    glyph_labels = ((yva == 0) | stamped).astype(np.int64)
    return CleverHansTask(
        train_images=tr, train_labels=ytr, val_clean=va, val_poisoned=vp, val_labels=yva,
        glyph_labels=glyph_labels, poisoned=stamped, model=model, layer_index=1, glyph_mask=mask,
        glyph_axis=np.eye(D)[:, 2], channel_names=names,
        meta={"scenario": "cleverhans", "seed": seed, "poison_rate": poison_rate,
              "glyph_weight": glyph_weight},
    )


# --------------------------------------------------------------------------
# random networks


def random_dense_net(seed: int, sizes=(6, 8, 5, 3), bias: bool = False) -> nc.Model:
    """Dense/ReLU stack with He-scaled Gaussian weights."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.standard_normal((a, b)) * np.sqrt(2.0 / a)
        layers.append(nc.Dense(w, 0.1 * rng.standard_normal(b) if bias else None))
        if i < len(sizes) - 2:
            layers.append(nc.ReLU())
    return nc.Model(layers, (sizes[0],), sizes[-1])


def random_conv_net(seed: int, in_shape=(1, 8, 8), channels=(4, 3), num_classes: int = 3,
                    pool: str = "max", bias: bool = False) -> nc.Model:
    """Conv -> ReLU -> pool -> Conv -> ReLU -> Flatten -> Dense.

    Layer 1 (the first ReLU) has ``channels[0]`` channels.
    """
    rng = np.random.default_rng(seed)
    c_in, h, w = in_shape
    c1, c2 = channels
    w1 = rng.standard_normal((c1, c_in, 3, 3)) * np.sqrt(2.0 / (9 * c_in))
    w2 = rng.standard_normal((c2, c1, 2, 2)) * np.sqrt(2.0 / (4 * c1))
    b1 = 0.1 * rng.standard_normal(c1) if bias else None
    b2 = 0.1 * rng.standard_normal(c2) if bias else None
    pool_layer = nc.MaxPool2D(2) if pool == "max" else nc.AvgPool2D(2)
    h1, w1_ = (h - 2) // 2, (w - 2) // 2
    flat = c2 * (h1 - 1) * (w1_ - 1)
    w3 = rng.standard_normal((flat, num_classes)) * np.sqrt(2.0 / flat)
    b3 = 0.1 * rng.standard_normal(num_classes) if bias else None
    layers = [nc.Conv2D(w1, b1), nc.ReLU(), pool_layer, nc.Conv2D(w2, b2), nc.ReLU(), nc.Flatten(),
              nc.Dense(w3, b3)]
    return nc.Model(layers, in_shape, num_classes)
