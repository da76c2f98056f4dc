"""Command-line orchestration: train, extract, binarize, evaluate, grid.

Configs are flat key=value text files; unknown keys are rejected with the
list of valid keys so hyperparameter typos cannot silently change the
training recipe. The data root can also be supplied via PATCHRBM_DATA.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from patchrbm import descriptor as desc
from patchrbm import evaluation, grbm, mcrbm
from patchrbm.dataset import (PatchSet, load_match_pairs, load_patch_archive,
                              resample_batch, synthesize_corpus,
                              write_match_pairs, write_patch_archive)
from patchrbm.grbm import MODEL_PATCH_SIDE, GrbmTrainConfig
from patchrbm.mcrbm import HmcConfig, McrbmArch, McrbmTrainConfig
from patchrbm.metrics import DistanceKind
from patchrbm.models import ModelBundle, load_model, save_model
from patchrbm.preprocess import apply_whitener_batch, fit_whitener, normalize_batch

DATA_ENV = "PATCHRBM_DATA"

COMMON_KEYS = {"kind", "scenes", "sample_cap", "seed"}
GRBM_KEYS = {"n_hidden", "epochs", "lr", "decay", "batch_size",
             "sparsity_target", "sparsity_penalty", "init_std"}
MCRBM_KEYS = {"arch", "n_mean", "n_factors", "n_cov", "topographic",
              "neighborhood", "stride", "epochs", "lr", "batch_size",
              "hmc_leapfrog", "hmc_step", "hmc_target", "p_start_epoch",
              "freeze_p", "retain", "jsd_p_scale"}
GRID_KEYS = {"test_scenes", "metric", "norm", "pairs_name"}


class ConfigError(ValueError):
    pass


def read_config(path, extra_keys: set[str] = frozenset()) -> dict[str, str]:
    cfg: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg[key] = value
    kind = cfg.get("kind")
    if kind not in ("grbm", "spgrbm", "mcrbm"):
        raise ConfigError(f"{path}: kind must be grbm, spgrbm or mcrbm, got {kind!r}")
    valid = COMMON_KEYS | extra_keys | (MCRBM_KEYS if kind == "mcrbm" else GRBM_KEYS)
    unknown = set(cfg) - valid
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}; "
                          f"valid keys: {sorted(valid)}")
    return cfg


def _data_root(args) -> Path:
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise SystemExit("no data directory: pass --data or set " + DATA_ENV)
    return Path(root)


def _load_scene(root: Path, name: str) -> PatchSet:
    path = root if name in (".", "") else root / name
    return load_patch_archive(path)


def _training_matrix(root: Path, cfg: dict, rng: np.random.Generator) -> np.ndarray:
    """Resampled 16x16 rows pooled over the configured scenes, then capped."""
    scenes = [s.strip() for s in cfg.get("scenes", ".").split(",") if s.strip()]
    blocks = [resample_batch(_load_scene(root, s), MODEL_PATCH_SIDE) for s in scenes]
    X = np.vstack(blocks)
    cap = int(cfg.get("sample_cap", "0"))
    if cap and cap < X.shape[0]:
        X = X[rng.choice(X.shape[0], size=cap, replace=False)]
    return X


def _grbm_train_config(cfg: dict, kind: str, seed: int) -> GrbmTrainConfig:
    return GrbmTrainConfig(
        n_hidden=int(cfg.get("n_hidden", "512")),
        lr=float(cfg.get("lr", "0.001")),
        rmsprop_decay=float(cfg.get("decay", "0.9")),
        batch_size=int(cfg.get("batch_size", "128")),
        epochs=int(cfg.get("epochs", "10")),
        sparsity_target=float(cfg.get("sparsity_target", "0.05")),
        sparsity_penalty=float(cfg.get("sparsity_penalty",
                                       "0.2" if kind == "spgrbm" else "0")),
        init_std=float(cfg.get("init_std", "0.1")),
        rng_seed=seed,
    )


def _mcrbm_arch(cfg: dict) -> McrbmArch:
    preset = cfg.get("arch", "large")
    if preset == "large":
        arch = McrbmArch.large()
    elif preset == "compact":
        arch = McrbmArch.compact()
    elif preset == "custom":
        arch = McrbmArch(
            n_mean=int(cfg["n_mean"]),
            n_factors=int(cfg["n_factors"]),
            n_cov=int(cfg["n_cov"]),
            topographic=cfg.get("topographic", "false").lower() == "true",
            neighborhood=int(cfg.get("neighborhood", "5")),
            stride=int(cfg.get("stride", "3")),
        )
    else:
        raise ConfigError(f"arch must be large, compact or custom, got {preset!r}")
    return arch


def _mcrbm_train_config(cfg: dict, seed: int) -> McrbmTrainConfig:
    p_start = cfg.get("p_start_epoch")
    return McrbmTrainConfig(
        lr=float(cfg.get("lr", "0.01")),
        batch_size=int(cfg.get("batch_size", "128")),
        epochs=int(cfg.get("epochs", "100")),
        rng_seed=seed,
        hmc=HmcConfig(
            n_leapfrog=int(cfg.get("hmc_leapfrog", "20")),
            step_size=float(cfg.get("hmc_step", "0.05")),
            target_acceptance=float(cfg.get("hmc_target", "0.9")),
        ),
        p_start_epoch=None if p_start is None else int(p_start),
        freeze_p=cfg.get("freeze_p", "false").lower() == "true",
        pca_retain=float(cfg.get("retain", "0.99")),
    )


def _write_log(path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", "0"))
    root = _data_root(args)
    rng = np.random.default_rng(seed)
    X = _training_matrix(root, cfg, rng)
    kind = cfg["kind"]
    log: list[dict] = [{"event": "start", "kind": kind, "seed": seed,
                        "n_samples": int(X.shape[0])}]

    if kind in ("grbm", "spgrbm"):
        tc = _grbm_train_config(cfg, kind, seed)
        Xn = normalize_batch(X)
        params, diag = grbm.fit(Xn, tc)
        bundle = ModelBundle(kind=kind, grbm=params, config=dict(cfg))
        for e in range(len(diag.reconstruction_error)):
            log.append({"event": "epoch", "epoch": e,
                        "reconstruction_error": diag.reconstruction_error[e],
                        "mean_hidden_activation": diag.mean_hidden_activation[e],
                        "dead_fraction": diag.dead_fraction[e]})
    else:
        arch = _mcrbm_arch(cfg)
        tc = _mcrbm_train_config(cfg, seed)
        whitener = fit_whitener(X, retain=tc.pca_retain)
        Xw = apply_whitener_batch(whitener, X)
        params, diag = mcrbm.fit(Xw, arch, tc)
        bundle = ModelBundle(kind=kind, mcrbm=params, whitener=whitener,
                             config=dict(cfg))
        for e in range(len(diag.data_free_energy)):
            log.append({"event": "epoch", "epoch": e,
                        "data_free_energy": diag.data_free_energy[e],
                        "acceptance_rate": diag.acceptance_rate[e],
                        "step_size": diag.step_size[e]})

    save_model(args.out, bundle)
    _write_log(str(args.out) + ".log", log)
    print(f"trained {kind} model -> {args.out}")
    return 0


def _descriptors_for(bundle: ModelBundle, pset: PatchSet,
                     ids=None, jsd_scale: float | None = None) -> dict:
    model = bundle
    if jsd_scale is not None and bundle.kind == "mcrbm":
        model = ModelBundle(kind=bundle.kind,
                            mcrbm=desc.scale_p(bundle.mcrbm, jsd_scale),
                            whitener=bundle.whitener,
                            threshold=bundle.threshold, config=bundle.config)
    wanted = range(len(pset)) if ids is None else sorted(set(ids))
    return {pid: model.descriptor(pset[pid]) for pid in wanted}


def cmd_extract(args) -> int:
    bundle = load_model(args.model)
    pset = load_patch_archive(_data_root(args))
    ids = None
    if args.pairs:
        pairs = load_match_pairs(args.pairs, pset)
        ids = {p.a for p in pairs} | {p.b for p in pairs}
    descriptors = _descriptors_for(bundle, pset, ids)
    if args.binary:
        if bundle.threshold is None:
            raise SystemExit("model has no binarization threshold; "
                             "run `patchrbm binarize` first")
        descriptors = {pid: desc.binarize(d, bundle.threshold)
                       for pid, d in descriptors.items()}
    desc.write_descriptor_dump(args.out, descriptors,
                               source=bundle.kind, threshold=bundle.threshold)
    print(f"wrote {len(descriptors)} descriptors -> {args.out}")
    return 0


def cmd_binarize(args) -> int:
    bundle = load_model(args.model)
    pset = load_patch_archive(_data_root(args))
    ids = range(len(pset))
    if args.cap and args.cap < len(pset):
        rng = np.random.default_rng(args.seed or 0)
        ids = sorted(rng.choice(len(pset), size=args.cap, replace=False))
    activations = (bundle.descriptor(pset[pid]).values for pid in ids)
    bundle.threshold = desc.fit_binarization_threshold(activations)
    save_model(args.model, bundle)
    print(f"binarization threshold {bundle.threshold:.6f} stored in {args.model}")
    return 0


_METRIC_MAP = {"l1": "L1", "l2": "L2", "jsd": "JSD", "hamming": "Hamming"}


def cmd_evaluate(args) -> int:
    kind = DistanceKind(kind=_METRIC_MAP[args.metric], normalization=args.norm)
    if args.dump:
        descriptors, header = desc.read_descriptor_dump(args.dump)
        pairs = load_match_pairs(args.pairs)
        scene = args.scene or "SYNTH"
    else:
        bundle = load_model(args.model)
        pset = load_patch_archive(_data_root(args))
        pairs = load_match_pairs(args.pairs, pset)
        ids = {p.a for p in pairs} | {p.b for p in pairs}
        jsd_scale = args.jsd_p_scale if args.metric == "jsd" else None
        descriptors = _descriptors_for(bundle, pset, ids, jsd_scale=jsd_scale)
        if args.metric == "hamming":
            if bundle.threshold is None:
                raise SystemExit("Hamming needs a binarized model; "
                                 "run `patchrbm binarize` first")
            descriptors = {pid: desc.binarize(d, bundle.threshold)
                           for pid, d in descriptors.items()}
        scene = args.scene or pset.scene
    report = evaluation.evaluate(descriptors, pairs, kind, scene=scene)
    with open(args.out, "w") as fh:
        fh.write(evaluation.report_to_text(report))
    if args.grid_file:
        row = evaluation.grid_row(args.method or "model", args.train_set or "-",
                                  scene, report)
        with open(args.grid_file, "a") as fh:
            fh.write(row + "\n")
    print(f"95% error rate: {report.error_rate_95:.2f}% "
          f"(threshold {report.threshold_95:.6g}) -> {args.out}")
    return 0


def _tile_image(columns: np.ndarray, tile_side: int) -> np.ndarray:
    """Tile unit filters into a ceil-square grid with 1px separators."""
    n = columns.shape[1]
    grid = math.ceil(math.sqrt(n))
    sep = 1
    side = grid * tile_side + (grid + 1) * sep
    img = np.zeros((side, side), dtype=np.uint8)
    for k in range(n):
        tile = columns[:, k].reshape(tile_side, tile_side)
        lo, hi = tile.min(), tile.max()
        if hi - lo < 1e-12:
            scaled = np.full_like(tile, 127.5)
        else:
            scaled = (tile - lo) / (hi - lo) * 255.0
        r, c = divmod(k, grid)
        r0 = sep + r * (tile_side + sep)
        c0 = sep + c * (tile_side + sep)
        img[r0:r0 + tile_side, c0:c0 + tile_side] = np.rint(scaled).astype(np.uint8)
    return img


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        with open(path, "wb") as fh:
            fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
            fh.write(img.tobytes())
    else:
        from PIL import Image
        Image.fromarray(img, mode="L").save(path)


def cmd_export_filters(args) -> int:
    bundle = load_model(args.model)
    if bundle.kind in ("grbm", "spgrbm"):
        cols = bundle.grbm.W
        side = int(round(math.sqrt(cols.shape[0])))
        # extra tile: the elementwise input scaling Lambda^{-1/2}
        inv_std = np.exp(-0.5 * bundle.grbm.z)[:, None]
        cols = np.hstack([cols, inv_std])
    else:
        cols = bundle.mcrbm.C
        if bundle.whitener is not None:
            cols = bundle.whitener.basis @ cols  # back to pixel space
        side = int(round(math.sqrt(cols.shape[0])))
    if side * side != cols.shape[0]:
        raise SystemExit(f"filters of length {cols.shape[0]} are not square tiles")
    img = _tile_image(cols, side)
    write_image(args.out, img)
    print(f"wrote {cols.shape[1]} filter tiles -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    pset, pairs = synthesize_corpus(args.seed, args.points, args.views)
    out = Path(args.out)
    write_patch_archive(pset, out)
    n = len(pairs)
    write_match_pairs(pairs, pset, out / f"m50_{n}_{n}_0.txt")
    print(f"wrote {len(pset)} patches and {n} pairs -> {out}")
    return 0


def _find_pairs_file(scene_dir: Path, pairs_name: str | None) -> Path:
    if pairs_name:
        return scene_dir / pairs_name
    candidates = sorted(scene_dir.glob("m50_*.txt"),
                        key=lambda p: p.stat().st_size, reverse=True)
    if not candidates:
        raise SystemExit(f"no m50_*.txt pairs file in {scene_dir}")
    return candidates[0]


def cmd_grid(args) -> int:
    cfg = read_config(args.config, extra_keys=GRID_KEYS)
    root = _data_root(args)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", "0"))
    kind = cfg["kind"]
    scenes = [s.strip() for s in cfg.get("scenes", ".").split(",") if s.strip()]
    test_scenes = [s.strip() for s in cfg.get("test_scenes",
                                              cfg.get("scenes", ".")).split(",")
                   if s.strip()]
    metric = cfg.get("metric", "l1")
    norm = cfg.get("norm", "l1")
    dkind = DistanceKind(kind=_METRIC_MAP[metric], normalization=norm)

    train_selections = [[s] for s in scenes]
    if len(scenes) > 1:
        train_selections.append(scenes)

    rows = []
    for selection in train_selections:
        train_cfg = dict(cfg)
        train_cfg["scenes"] = ",".join(selection)
        rng = np.random.default_rng(seed)
        X = _training_matrix(root, train_cfg, rng)
        if kind in ("grbm", "spgrbm"):
            params, _ = grbm.fit(normalize_batch(X), _grbm_train_config(cfg, kind, seed))
            bundle = ModelBundle(kind=kind, grbm=params, config=train_cfg)
        else:
            tc = _mcrbm_train_config(cfg, seed)
            whitener = fit_whitener(X, retain=tc.pca_retain)
            params, _ = mcrbm.fit(apply_whitener_batch(whitener, X),
                                  _mcrbm_arch(cfg), tc)
            bundle = ModelBundle(kind=kind, mcrbm=params, whitener=whitener,
                                 config=train_cfg)
        if metric == "hamming":
            acts = (bundle.descriptor(p).values
                    for p in _load_scene(root, selection[0]).patches)
            bundle.threshold = desc.fit_binarization_threshold(acts)
        train_label = "/".join(selection)
        for test in test_scenes:
            pset = _load_scene(root, test)
            pairs = load_match_pairs(_find_pairs_file(
                root if test in (".", "") else root / test,
                cfg.get("pairs_name")), pset)
            ids = {p.a for p in pairs} | {p.b for p in pairs}
            jsd_scale = float(cfg.get("jsd_p_scale", "3")) if metric == "jsd" else None
            descriptors = _descriptors_for(bundle, pset, ids, jsd_scale=jsd_scale)
            if metric == "hamming":
                descriptors = {pid: desc.binarize(d, bundle.threshold)
                               for pid, d in descriptors.items()}
            report = evaluation.evaluate(descriptors, pairs, dkind, scene=pset.scene)
            rows.append((kind, train_label, test, report.error_rate_95))

    lines = [f"method\ttrain_set\ttest_set\trate",
             *(f"{m}\t{tr}\t{te}\t{rate:.2f}" for m, tr, te, rate in rows)]
    table = "\n".join(lines) + "\n"
    with open(args.out, "w") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchrbm",
        description="Unsupervised RBM descriptors for local image patches.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="write a descriptor dump")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--binary", action="store_true")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("binarize", help="fit and store the binarization threshold")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--cap", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_binarize)

    p = sub.add_parser("evaluate", help="run the 95%% error-rate benchmark")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--dump")
    p.add_argument("--data")
    p.add_argument("--pairs", required=True)
    p.add_argument("--metric", choices=sorted(_METRIC_MAP), required=True)
    p.add_argument("--norm", choices=["none", "l1", "l2"], default="none")
    p.add_argument("--out", required=True)
    p.add_argument("--scene")
    p.add_argument("--jsd-p-scale", type=float, default=3.0)
    p.add_argument("--grid-file")
    p.add_argument("--method")
    p.add_argument("--train-set")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-filters", help="write a filter grid image")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_filters)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--views", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("grid", help="train/test matrix of error rates")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_grid)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
