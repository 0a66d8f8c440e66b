"""Command-line pipeline: ``gen``, ``extract``, ``learn``, ``explain``, ``eval``.

Stages talk through files. Every command writes its artifacts plus a
``manifest.json`` (resolved configuration, versions, output checksums) into
``--out``. Exit codes: 0 success, 2 usage error, 3 data or shape error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import scipy

from relsub import __version__
from relsub import attribution as attr
from relsub import evaluation as ev
from relsub import netcore as nc
from relsub import subspace as ss
from relsub import synth
from relsub import vlayer as vl
from relsub.fileio import read_pgm, write_pgm

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SCENARIOS = ("prca2d", "drsa2d", "concepts_image", "cleverhans")
LEARN_METHODS = ("prca", "pca", "drsa", "dsa", "random", "maxrel")
EVAL_KINDS = ("flip", "flip-multi", "metrics", "match", "auroc", "refine", "prototypes")


class UsageError(Exception):
    """Invalid combination of arguments (exit code 2)."""


# --------------------------------------------------------------------------
# small file helpers


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        raise FloatingPointError("non-finite value in a report")
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_image_set(directory: Path, images: np.ndarray, labels=None, extra: dict | None = None,
                    pgm: bool = True) -> None:
    """``images.npy`` (exact), ``labels.json`` and one PGM preview per image."""
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "images.npy", np.ascontiguousarray(images, dtype=np.float64))
    meta = {} if labels is None else {"labels": np.asarray(labels).tolist()}
    meta.update(extra or {})
    _write_json(directory / "labels.json", meta)
    if pgm:
        for i, img in enumerate(images):
            write_pgm(directory / f"img_{i:04d}.pgm", img.sum(axis=0))


def load_image_set(path) -> tuple[np.ndarray, dict]:
    """Images and the ``labels.json`` sidecar from a directory or an ``.npy`` file."""
    path = Path(path)
    if path.is_dir():
        images = np.load(path / "images.npy")
        side = path / "labels.json"
        meta = json.loads(side.read_text()) if side.exists() else {}
    elif path.suffix == ".npy":
        images = np.load(path)
        side = path.with_name("labels.json")
        meta = json.loads(side.read_text()) if side.exists() else {}
    else:
        raise FileNotFoundError(f"{path}: expected an image-set directory or an .npy file")
    if images.ndim != 4:
        raise nc.ShapeError(f"{path}: images must have shape (N, C, H, W), got {images.shape}")
    return images.astype(np.float64), meta


def load_single_image(path, index: int | None) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".pgm":
        return read_pgm(path)[None]
    if path.is_dir() or path.suffix == ".npy":
        arr = np.load(path / "images.npy" if path.is_dir() else path)
        if arr.ndim == 4:
            if index is None:
                raise UsageError("--index is required when the image file holds several images")
            if not 0 <= index < len(arr):
                raise UsageError(f"--index {index} out of range [0, {len(arr)})")
            return arr[index].astype(np.float64)
        if arr.ndim == 3:
            return arr.astype(np.float64)
        if arr.ndim == 2:
            return arr[None].astype(np.float64)
        raise nc.ShapeError(f"{path}: cannot read an image from shape {arr.shape}")
    raise FileNotFoundError(f"{path}: expected .npy, .pgm or an image-set directory")


def _labels(meta: dict, n: int, override=None, key: str = "labels") -> np.ndarray:
    if override is not None:
        return np.full(n, int(override))
    if key not in meta:
        raise UsageError(f"no {key!r} in labels.json; pass --class")
    lab = np.asarray(meta[key], dtype=np.int64)
    if lab.shape != (n,):
        raise nc.ShapeError(f"{key!r} has {lab.size} entries for {n} images")
    return lab


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, args: argparse.Namespace) -> None:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    manifest = {
        "command": args.command,
        "config": config,
        "versions": {"relsub": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    _write_json(out / "manifest.json", manifest)


def _int_list(text: str) -> tuple:
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return vals


def _flips(text: str):
    if text in ("quadratic", "tau2"):
        return "quadratic"
    try:
        k = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--flips-per-step must be an integer or 'quadratic', got {text!r}") from exc
    if k < 1:
        raise argparse.ArgumentTypeError("--flips-per-step must be >= 1")
    return k


def _attr_cfg(args) -> attr.AttributionConfig:
    rules = None
    if args.lrp_rules:
        text = Path(args.lrp_rules).read_text() if Path(args.lrp_rules).exists() else args.lrp_rules
        rules = json.loads(text)
    return attr.AttributionConfig(method=args.backend, ig_steps=args.ig_steps,
                                  shapley_permutations=args.shapley_permutations,
                                  patch_size=args.patch_size, seed=args.seed, lrp_rules=rules,
                                  threads=args.threads)


def _flip_opts(args) -> ev.FlipOptions:
    return ev.FlipOptions(patch_size=args.patch_size, flips_per_step=args.flips_per_step,
                          inpainter=args.inpainter, rectify_output=not args.no_rectify,
                          aupc_rule=args.aupc_rule)


# --------------------------------------------------------------------------
# gen


def cmd_gen(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scenario in ("prca2d", "drsa2d"):
        if args.scenario == "prca2d":
            cloud = synth.gen_prca2d(args.seed, n=args.n or 500)
        else:
            cloud = synth.gen_drsa2d(args.seed, n=args.n or 600)
        ss.save_acds(out / "dataset.acds", cloud.dataset)
        _write_json(out / "planted.json", {"planted_axes": cloud.planted_axes,
                                           "distractor_axis": cloud.distractor_axis})
        return
    if args.scenario == "concepts_image":
        task = synth.gen_concepts_image(args.seed, K=args.K, image_dim=args.image_dim,
                                        n_train=args.n_train, n_val=args.n_val, mode=args.mode,
                                        distractor=args.distractor)
        nc.save_model(task.model, out / "model.json")
        write_image_set(out / "train", task.train_images, task.train_labels)
        write_image_set(out / "val", task.val_images, task.val_labels)
        _write_json(out / "meta.json", {**task.meta, "layer_index": task.layer_index,
                                        "concept_axes": task.concept_axes,
                                        "channel_names": task.channel_names,
                                        "patch_size": task.patch_size})
        return
    task = synth.gen_cleverhans(args.seed, poison_rate=args.poison_rate, n_train=args.n_train,
                                n_val=args.n_val, image_dim=args.image_dim)
    nc.save_model(task.model, out / "model.json")
    write_image_set(out / "train", task.train_images, task.train_labels)
    write_image_set(out / "val_clean", task.val_clean, task.val_labels)
    write_image_set(out / "val_poisoned", task.val_poisoned, task.val_labels,
                    {"glyph_labels": task.glyph_labels, "poisoned": task.poisoned.astype(int)})
    _write_json(out / "meta.json", {**task.meta, "layer_index": task.layer_index,
                                    "glyph_mask": task.glyph_mask.astype(int),
                                    "glyph_axis": task.glyph_axis,
                                    "channel_names": task.channel_names,
                                    "patch_size": task.patch_size})


# --------------------------------------------------------------------------
# extract / learn


def cmd_extract(args) -> None:
    model = nc.load_model(args.model)
    images, meta = load_image_set(args.images)
    classes = _labels(meta, len(images), args.class_index)
    ds = ss.extract_dataset(model, images, classes, args.layer, _attr_cfg(args),
                            positions_per_image=args.positions, seed=args.seed, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ss.save_acds(out / "dataset.acds", ds)


def _write_trajectory(path: Path, fit: ss.DrsaResult) -> None:
    with path.open("w") as fh:
        fh.write("restart,iteration,objective,ortho_error\n")
        for r, (hist, errs) in enumerate(zip(fit.histories, fit.ortho_errors)):
            for it, j in enumerate(hist):
                err = 0.0 if it == 0 else errs[it - 1]
                fh.write(f"{r},{it},{format(float(j), '.17g')},{format(float(err), '.17g')}\n")


def cmd_learn(args) -> None:
    ds = ss.load_acds(args.dataset)
    out = Path(args.out)
    m = args.method
    if m in ("prca", "pca", "maxrel"):
        if args.dim is None or not 1 <= args.dim <= ds.dim:
            raise UsageError(f"learn {m} needs -d/--dim in [1, {ds.dim}]")
    if m in ("drsa", "dsa") and args.blocks is None:
        raise UsageError(f"learn {m} needs --blocks, e.g. --blocks 1,1")
    if m == "random" and args.blocks is None and args.dim is None:
        raise UsageError("learn random needs --blocks or -d/--dim")
    out.mkdir(parents=True, exist_ok=True)
    info = {"method": m}
    if m == "prca":
        basis = ss.prca(ds, args.dim)
        info["mean_relevance"] = ss.mean_relevance(basis.block(0), ds)
    elif m == "pca":
        basis = ss.pca(ds, args.dim)
        info["mean_relevance"] = ss.mean_relevance(basis.block(0), ds)
    elif m == "maxrel":
        basis = ss.maxrel((ds.A * ds.C).mean(axis=0), args.dim)
        info["mean_relevance"] = ss.mean_relevance(basis.block(0), ds)
    elif m == "random":
        dims = args.blocks if args.blocks is not None else ss._split(args.dim, ds.dim)
        if sum(dims) != ds.dim:
            raise UsageError(f"--blocks {dims} must sum to D={ds.dim}")
        basis = ss.random_basis(ds.dim, dims, args.seed)
    else:
        opts = ss.DrsaOptions(block_dims=args.blocks, q=args.q, iterations=args.iterations,
                              learning_rate=args.lr, restarts=args.restarts, seed=args.seed,
                              normalize=not args.no_normalize, threads=args.threads)
        if sum(opts.block_dims) != ds.dim:
            raise UsageError(f"--blocks {opts.block_dims} must sum to D={ds.dim}")
        fit = ss.drsa_fit(ds.with_context(ds.A) if m == "dsa" else ds, opts)
        basis = fit.basis
        if not all(np.isfinite(h).all() for h in fit.histories):
            raise FloatingPointError("DRSA objective became non-finite")
        _write_trajectory(out / "trajectory.csv", fit)
        info.update(objective=fit.objective, best_restart=fit.best_restart,
                    restart_objectives=fit.objectives, scales=fit.scales)
    vl.save_basis(out / "basis.json", basis)
    info.update(block_dims=basis.block_dims, fingerprint=basis.fingerprint())
    _write_json(out / "learn.json", info)


# --------------------------------------------------------------------------
# explain


def cmd_explain(args) -> None:
    model = nc.load_model(args.model)
    x = load_single_image(args.image, args.index)
    basis = vl.load_basis(args.basis)
    cfg = _attr_cfg(args)
    joint = vl.two_step_explain(model, x, args.class_index, args.layer, basis, cfg)
    one = attr.explain(model, x, args.class_index, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(joint.maps):
        attr.save_relevance_map(out / f"component_{k}.csv", m)
    attr.save_relevance_map(out / "onestep.csv", one)
    Rk = joint.concept_relevance
    summary = {
        "class_index": args.class_index,
        "layer_index": args.layer,
        "backend": args.backend,
        "basis_fingerprint": basis.fingerprint(),
        "concept_relevance": Rk,
        "sum_concept_relevance": float(Rk.sum()),
        "layer_relevance": joint.layer_relevance,
        "conservation_gap": abs(float(Rk.sum()) - joint.layer_relevance),
        "component_totals": joint.maps.reshape(len(Rk), -1).sum(axis=1),
        "onestep_total": float(one.sum()),
        "logit": float(nc.forward(model, x).logits[args.class_index]),
    }
    _write_json(out / "summary.json", summary)


# --------------------------------------------------------------------------
# eval


def _block_list(args, basis) -> list:
    if args.blocks is None:
        raise UsageError(f"eval {args.kind} needs --blocks")
    for k in args.blocks:
        if not 0 <= k < basis.num_blocks:
            raise UsageError(f"block {k} out of range [0, {basis.num_blocks})")
    return list(args.blocks)


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"eval {args.kind} needs {flags}")


def _eval_flip(args, out: Path, multi: bool) -> dict:
    _require(args, "model", "images")
    model = nc.load_model(args.model)
    images, meta = load_image_set(args.images)
    classes = _labels(meta, len(images), args.class_index)
    cfg, opts = _attr_cfg(args), _flip_opts(args)
    basis = None if args.basis is None else vl.load_basis(args.basis)
    if multi and basis is None:
        raise UsageError("eval flip-multi needs --basis")
    if basis is not None and args.layer is None:
        raise UsageError("a --basis needs --layer")
    if not multi and basis is not None:
        if args.blocks is None or len(args.blocks) != 1:
            raise UsageError("eval flip with --basis needs exactly one --blocks index")
        U = basis.block(_block_list(args, basis)[0])
    aupcs = []
    with (out / "curves.csv").open("w") as fh:
        fh.write("image,step,fraction,output\n")
        for i, (x, c) in enumerate(zip(images, classes)):
            c = int(c)
            if multi:
                rep = ev.patch_flip_multi(model, x, c, vl.two_step_explain(model, x, c, args.layer, basis, cfg), opts)
            else:
                heat = attr.explain(model, x, c, cfg) if basis is None else \
                    vl.subspace_explain(model, x, c, args.layer, U, cfg)
                rep = ev.patch_flip(model, x, c, heat, opts)
            aupcs.append(rep.aupc)
            for t, (fr, f) in enumerate(zip(rep.fractions, rep.outputs)):
                fh.write(f"{i},{t},{format(float(fr), '.17g')},{format(float(f), '.17g')}\n")
    aupcs = np.asarray(aupcs)
    return {"aupc_per_image": aupcs, "classes": classes,
            "aupc_per_class": {int(c): float(aupcs[classes == c].mean()) for c in np.unique(classes)},
            "aupc": ev.class_balanced_mean(aupcs, classes), "flip_options": opts.to_dict()}


def _eval_metrics(args) -> dict:
    _require(args, "model", "images", "basis", "layer")
    model = nc.load_model(args.model)
    images, meta = load_image_set(args.images)
    classes = _labels(meta, len(images), args.class_index)
    basis, cfg = vl.load_basis(args.basis), _attr_cfg(args)
    joints = [vl.two_step_explain(model, x, int(c), args.layer, basis, cfg) for x, c in zip(images, classes)]
    sep = np.array([ev.separability(j) for j in joints])
    peak = np.array([ev.peakness(j) for j in joints])
    totals = [ev.total_relevance_metric(model, images, classes, args.layer, basis.block(k), cfg)
              for k in range(basis.num_blocks)]
    return {"separability": ev.class_balanced_mean(sep, classes),
            "peakness": ev.class_balanced_mean(peak, classes),
            "separability_per_image": sep, "peakness_per_image": peak,
            "total_relevance_per_block": totals}


def _concept_scores(model, images, classes, layer, basis, cfg):
    return np.array([vl.concept_scores(model, x, int(c), layer, basis, cfg) for x, c in zip(images, classes)])


def _eval_match(args) -> dict:
    if not args.alpha < args.beta:
        raise UsageError(f"--alpha must be smaller than --beta (got {args.alpha} and {args.beta})")
    _require(args, "model", "images", "basis", "layer")
    model = nc.load_model(args.model)
    images, meta = load_image_set(args.images)
    classes = _labels(meta, len(images))
    basis, cfg = vl.load_basis(args.basis), _attr_cfg(args)
    scores = _concept_scores(model, images, classes, args.layer, basis, cfg)
    per_class = {int(c): scores[classes == c] for c in np.unique(classes)}
    cls, table = ev.class_subspace_match(per_class, args.alpha, args.beta)
    return {"alpha": args.alpha, "beta": args.beta, "classes": cls, "table": table.astype(int),
            "matches": {int(c): np.flatnonzero(row).tolist() for c, row in zip(cls, table)}}


def _eval_auroc(args) -> dict:
    _require(args, "model", "images", "basis", "layer", "class_index")
    model = nc.load_model(args.model)
    images, meta = load_image_set(args.images)
    targets = _labels(meta, len(images), key=args.target_key)
    basis, cfg = vl.load_basis(args.basis), _attr_cfg(args)
    blocks = _block_list(args, basis)
    scores = _concept_scores(model, images, np.full(len(images), args.class_index), args.layer, basis, cfg)
    s = scores[:, blocks].sum(axis=1)
    return {"auroc": ev.auroc(s, targets), "blocks": blocks, "scores": s, "targets": targets}


def _eval_refine(args) -> dict:
    _require(args, "model", "basis", "layer", "class_index", "train", "clean", "poisoned")
    model = nc.load_model(args.model)
    basis, cfg = vl.load_basis(args.basis), _attr_cfg(args)
    blocks = _block_list(args, basis)
    train, tmeta = load_image_set(args.train)
    tlab = _labels(tmeta, len(train))
    own = train[tlab == args.class_index]
    if len(own) == 0:
        raise UsageError(f"no training images of class {args.class_index}")
    means = _concept_scores(model, own, np.full(len(own), args.class_index), args.layer, basis, cfg).mean(axis=0)
    report = {"blocks": blocks, "class_means": means}
    for name, path in (("clean", args.clean), ("poisoned", args.poisoned)):
        X, meta = load_image_set(path)
        y = _labels(meta, len(X))
        base = nc.predict(model, X).argmax(axis=1)
        refined = np.array([np.argmax(vl.refined_logits(model, x, args.class_index, args.layer, basis, blocks,
                                                        means, cfg)) for x in X])
        report[name] = {"accuracy": float(np.mean(base == y)), "refined_accuracy": float(np.mean(refined == y))}
    return report


def _eval_prototypes(args) -> dict:
    _require(args, "dataset", "basis")
    ds = ss.load_acds(args.dataset)
    basis = vl.load_basis(args.basis)
    pool = np.unique(ds.image_ids) if args.pool is None else np.asarray(args.pool)
    ids, obj = ev.prototypes(pool, basis, ds, args.n, N=args.N, seed=args.seed, q=args.q)
    return {"ids": ids, "objective": obj, "n": args.n, "N": args.N}


def cmd_eval(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kind = args.kind
    if kind in ("flip", "flip-multi"):
        report = _eval_flip(args, out, multi=kind == "flip-multi")
    elif kind == "metrics":
        report = _eval_metrics(args)
    elif kind == "match":
        report = _eval_match(args)
    elif kind == "auroc":
        report = _eval_auroc(args)
    elif kind == "refine":
        report = _eval_refine(args)
    else:
        report = _eval_prototypes(args)
    _write_json(out / "report.json", {"kind": kind, **report})


# --------------------------------------------------------------------------
# parser


def _add_attr_flags(p) -> None:
    p.add_argument("--backend", default="LRP", choices=attr.METHODS)
    p.add_argument("--ig-steps", type=int, default=100)
    p.add_argument("--shapley-permutations", type=int, default=25)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--lrp-rules", default=None,
                   help="JSON (or a JSON file) mapping layer index to a rule, e.g. '{\"0\": \"ZB\"}'")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--config", default=None, help="JSON file whose keys mirror the long flags")
    common.add_argument("--out", default=".", help="output directory")

    parser = argparse.ArgumentParser(prog="relsub", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"relsub {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic scenario")
    p.add_argument("scenario", choices=SCENARIOS)
    p.add_argument("--n", type=int, default=None, help="sample count for the 2-D clouds")
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--image-dim", type=int, default=16)
    p.add_argument("--n-train", type=int, default=60)
    p.add_argument("--n-val", type=int, default=60)
    p.add_argument("--mode", default="single", choices=("single", "multi"))
    p.add_argument("--distractor", action="store_true")
    p.add_argument("--poison-rate", type=float, default=0.25)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("extract", parents=[common], help="collect activation/context vectors")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--class", dest="class_index", type=int, default=None,
                   help="explained class for every image (default: each image's label)")
    p.add_argument("--positions", type=int, default=20)
    _add_attr_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("learn", parents=[common], help="learn a subspace basis")
    p.add_argument("method", choices=LEARN_METHODS)
    p.add_argument("--dataset", required=True)
    p.add_argument("-d", "--dim", type=int, default=None)
    p.add_argument("--blocks", type=_int_list, default=None)
    p.add_argument("--q", type=float, default=0.5)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("explain", parents=[common], help="two-step pixel-concept explanation")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--index", type=int, default=None)
    p.add_argument("--class", dest="class_index", type=int, required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--basis", required=True)
    _add_attr_flags(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval", parents=[common], help="evaluation reports")
    p.add_argument("kind", choices=EVAL_KINDS)
    p.add_argument("--model")
    p.add_argument("--images")
    p.add_argument("--dataset")
    p.add_argument("--basis")
    p.add_argument("--layer", type=int)
    p.add_argument("--class", dest="class_index", type=int)
    p.add_argument("--blocks", type=_int_list)
    p.add_argument("--flips-per-step", type=_flips, default=1)
    p.add_argument("--inpainter", default="neighborhood_mean", choices=ev.INPAINTERS)
    p.add_argument("--aupc-rule", default="trapezoid", choices=ev.AUPC_RULES)
    p.add_argument("--no-rectify", action="store_true")
    p.add_argument("--alpha", type=float, default=0.75)
    p.add_argument("--beta", type=float, default=0.85)
    p.add_argument("--target-key", default="glyph_labels")
    p.add_argument("--train")
    p.add_argument("--clean")
    p.add_argument("--poisoned")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--N", type=int, default=1000)
    p.add_argument("--q", type=float, default=0.5)
    p.add_argument("--pool", type=_int_list)
    _add_attr_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, argv) -> argparse.Namespace:
    """Re-parse with the config file's values as defaults (explicit flags still win)."""
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read --config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("--config must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    if cfg.get("class") is not None:
        cfg["class_index"] = cfg.pop("class")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown keys in --config: {unknown}")
    for action in sub._actions:
        if action.dest in cfg and action.type is not None and isinstance(cfg[action.dest], str):
            cfg[action.dest] = action.type(cfg[action.dest])
        if action.dest == "blocks" and isinstance(cfg.get("blocks"), list):
            cfg["blocks"] = tuple(int(v) for v in cfg["blocks"])
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.config:
            args = _apply_config(parser, args, argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        args.func(args)
        write_manifest(Path(args.out), args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"relsub: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"relsub: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, LookupError, OSError, TypeError) as exc:
        print(f"relsub: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
