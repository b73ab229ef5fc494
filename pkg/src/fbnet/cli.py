"""Command-line pipeline: make-toy -> pretrain -> distill -> train -> eval,
plus one-off synthesis. Commands compose via the filesystem only."""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import core, data, eval as evaluation, recognition, synthesis, training
from .core import (CheckpointError, Config, ConfigError, DataError, FBNetError,
                   NumericError, derive_int_seed, load_checkpoint, load_config,
                   save_checkpoint, seeded_rng, write_config_file, Checkpoint)
from .data import Dataset, ToySpec, generate_toy_dataset, ingest, make_splits, parse_manifest
from .geom3d import ViewPose
from .recognition import (FeatureCache, build_feature_cache, build_student,
                          build_teacher, distill, pretrain_teacher)
from .synthesis import draw_noise, make_latent
from .training import (TrainState, arrays_to_module, build_augmenter_for_aug_mode,
                       init_train_state, module_to_arrays, read_trace, run_phase)

log = logging.getLogger("fbnet")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

FEATURE_CACHE = "feature_cache.npz"


# ---------------------------------------------------------------------------
# Pipeline steps (importable; the argparse layer below stays thin)
# ---------------------------------------------------------------------------

def resolve_split(cfg: Config, dataset: Dataset):
    """The split is a pure function of (config seed, dataset labels), so every
    pipeline stage reconstructs the identical partition."""
    n_cats = len(dataset.categories())
    base_count = cfg.base_categories_count or max(1, min(n_cats - 1,
                                                         round(n_cats * 2 / 3)))
    return make_splits(dataset, base_count, cfg.n_support_novel,
                       seeded_rng(cfg.seed, "split"))


def run_make_toy(cfg: Config, out_dir, spec: ToySpec | None = None,
                 force: bool = False) -> Path:
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise DataError(f"target {out_dir} exists and is not empty "
                        f"(use --force to overwrite)")
    spec = spec or ToySpec(resolution=cfg.teacher_resolution)
    generate_toy_dataset(spec, seeded_rng(cfg.seed, "toy"), out_dir=out_dir)
    return out_dir


def _base_train_arrays(cfg: Config, dataset: Dataset, split):
    idx = np.concatenate([split.train[c] for c in split.base_categories])
    return (dataset.images[idx], dataset.labels[idx],
            [dataset.ids[i] for i in idx])


def run_pretrain(cfg: Config, data_dir, out_dir) -> dict:
    """Train the high-resolution teacher on base categories and cache its
    features for every base train image."""
    out_dir = Path(out_dir)
    manifest = parse_manifest(data_dir)
    dataset_hi = ingest(manifest, cfg.teacher_resolution)
    split = resolve_split(cfg, dataset_hi)
    images, labels, ids = _base_train_arrays(cfg, dataset_hi, split)

    torch.manual_seed(derive_int_seed(cfg.seed, "teacher_init"))
    teacher = build_teacher(cfg, split.base_categories)
    accuracy = pretrain_teacher(
        teacher, images, labels, epochs=cfg.pretrain_epochs,
        batch_size=min(cfg.gan_batch, len(images)), lr=cfg.lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        rng=seeded_rng(cfg.seed, "pretrain"))
    log.info("teacher final training accuracy: %.4f", accuracy)

    arrays = module_to_arrays(teacher)
    digest = hashlib.sha256()
    for k in sorted(arrays):
        digest.update(k.encode())
        digest.update(arrays[k].tobytes())
    for i in ids:
        digest.update(i.encode())
    source_hash = digest.hexdigest()

    cache_path = out_dir / FEATURE_CACHE
    reused = False
    if cache_path.exists():
        try:
            reused = FeatureCache.load(cache_path).source_hash == source_hash
        except (DataError, OSError, ValueError):
            reused = False
    if not reused:
        cache = build_feature_cache(teacher, images, ids, source_hash,
                                    batch_size=min(cfg.gan_batch, len(images)))
        out_dir.mkdir(parents=True, exist_ok=True)
        cache.save(cache_path)
    save_checkpoint(Checkpoint(networks={"extractor_high": arrays},
                               phase="pretrain", config=cfg),
                    out_dir / "checkpoints" / "final")
    (out_dir / "pretrain_accuracy.txt").write_text(f"{accuracy!r}\n")
    return {"out_dir": out_dir, "cache": cache_path, "accuracy": accuracy,
            "cache_reused": reused}


def run_distill(cfg: Config, data_dir, pretrain_dir, out_dir) -> dict:
    """Match the low-resolution extractor's features to the cached teacher
    features over the base train images."""
    pretrain_dir = Path(pretrain_dir)
    out_dir = Path(out_dir)
    cache_path = pretrain_dir / FEATURE_CACHE
    if not cache_path.exists():
        raise DataError(f"feature cache not found at {cache_path}; "
                        f"run the pretrain command first")
    cache = FeatureCache.load(cache_path)
    teacher_ckpt = load_checkpoint(pretrain_dir / "checkpoints" / "final")

    manifest = parse_manifest(data_dir)
    dataset = ingest(manifest, cfg.image_resolution)
    split = resolve_split(cfg, dataset)
    images, _, ids = _base_train_arrays(cfg, dataset, split)

    torch.manual_seed(derive_int_seed(cfg.seed, "student_init"))
    student = build_student(cfg)
    history = distill(student, cache, images, ids,
                      iterations=cfg.distill_iters,
                      batch_size=min(cfg.gan_batch, len(images)), lr=cfg.lr,
                      betas=(cfg.adam_beta1, cfg.adam_beta2),
                      rng=seeded_rng(cfg.seed, "distill"))
    out_dir.mkdir(parents=True, exist_ok=True)
    if history:
        (out_dir / "distill_history.tsv").write_text(
            "step\tloss\n" + "".join(f"{i}\t{v!r}\n"
                                     for i, v in enumerate(history)))
        log.info("distillation loss: %.5g -> %.5g", history[0], history[-1])
    save_checkpoint(
        Checkpoint(networks={
            "extractor_low": module_to_arrays(student),
            "extractor_high": teacher_ckpt.networks["extractor_high"]},
            phase="distill", config=cfg),
        out_dir / "checkpoints" / "final")
    return {"out_dir": out_dir, "history": history}


def _latest_checkpoint(run_dir: Path) -> Path:
    root = run_dir / "checkpoints"
    final = root / "final"
    if final.exists():
        return final
    periodic = sorted(root.glob("iter_*"))
    if not periodic:
        raise CheckpointError(f"no checkpoints under {root}")
    return periodic[-1]


def run_train(cfg: Config, data_dir, distill_dir, phase: str, out_dir,
              base_run=None, augmenter_run=None, resume: bool = False,
              feature_cache=None) -> dict:
    out_dir = Path(out_dir)
    manifest = parse_manifest(data_dir)
    dataset = ingest(manifest, cfg.image_resolution)
    split = resolve_split(cfg, dataset)

    cache = None
    if cfg.joint_feature_update:
        if feature_cache is None:
            raise DataError("joint_feature_update requires --feature-cache "
                            "(the cache file written by the pretrain command)")
        cache = FeatureCache.load(feature_cache)

    if resume:
        state = TrainState.from_checkpoint(
            load_checkpoint(_latest_checkpoint(out_dir), expected_config=cfg),
            teacher_cache=cache)
    else:
        distill_ckpt = load_checkpoint(Path(distill_dir) / "checkpoints" / "final") \
            if distill_dir else None
        augmenter = None
        if cfg.ablation_mode == "aug_only":
            if augmenter_run is None:
                raise ConfigError("aug_only mode needs --augmenter pointing at "
                                  "a completed view_only run")
            aug_ckpt = load_checkpoint(_latest_checkpoint(Path(augmenter_run)))
            augmenter = build_augmenter_for_aug_mode(aug_ckpt, cfg)
        base_ckpt = None
        if phase == "novel":
            if base_run is None:
                raise ConfigError("novel phase needs --base-run pointing at a "
                                  "completed base run")
            base_ckpt = load_checkpoint(_latest_checkpoint(Path(base_run)))
        state = init_train_state(
            cfg, phase,
            student_arrays=(distill_ckpt.networks["extractor_low"]
                            if distill_ckpt else None),
            teacher_arrays=(distill_ckpt.networks.get("extractor_high")
                            if distill_ckpt else None),
            base_checkpoint=base_ckpt, augmenter=augmenter,
            teacher_cache=cache)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_config_file(cfg, out_dir / "config.snapshot")

    iterations = cfg.iters_base if phase == "base" else cfg.iters_novel
    run_phase(state, dataset, split, iterations, run_dir=out_dir)
    return {"out_dir": out_dir, "state": state}


def run_eval(data_dir, run_dir, out_dir=None, config: Config | None = None) -> dict:
    run_dir = Path(run_dir)
    ckpt = load_checkpoint(_latest_checkpoint(run_dir), expected_config=config)
    cfg = ckpt.config
    manifest = parse_manifest(data_dir)
    dataset = ingest(manifest, cfg.image_resolution)
    teacher_dataset = ingest(manifest, cfg.teacher_resolution)
    split = resolve_split(cfg, dataset)
    report = evaluation.evaluate_checkpoint(
        ckpt, dataset, teacher_dataset, split, out_dir=out_dir or run_dir)
    return {"report": report, "out_dir": Path(out_dir or run_dir)}


def run_synthesize(data_dir, run_dir, poses: list[ViewPose],
                   condition_ids: list[str], style_ids: list[str] | None,
                   out_dir) -> list[Path]:
    ckpt = load_checkpoint(_latest_checkpoint(Path(run_dir)))
    cfg = ckpt.config
    if cfg.ablation_mode == "rec_only":
        raise ConfigError("rec_only checkpoints carry no generator")
    manifest = parse_manifest(data_dir)
    dataset = ingest(manifest, cfg.image_resolution)
    index = {i: k for k, i in enumerate(dataset.ids)}
    missing = [i for i in condition_ids + (style_ids or []) if i not in index]
    if missing:
        raise DataError(f"unknown image id(s): {missing}")

    student = build_student(cfg)
    arrays_to_module(student, ckpt.networks["extractor_low"])
    generator = synthesis.build_generator(cfg)
    arrays_to_module(generator, ckpt.networks["generator"])

    noise_rng = seeded_rng(cfg.seed, "synthesize.noise")
    cond = torch.as_tensor(dataset.images[[index[i] for i in condition_ids]])
    feats = recognition.extract_features(student, cond)
    z_cond = make_latent(feats, draw_noise(noise_rng, len(cond), cfg.noise_dim))
    z_style = None
    if style_ids:
        sty = torch.as_tensor(dataset.images[[index[i] for i in style_ids]])
        sfeats = recognition.extract_features(student, sty)
        z_style = make_latent(sfeats, draw_noise(noise_rng, len(sty),
                                                 cfg.noise_dim))
        if len(z_style) not in (1, len(z_cond)):
            raise ConfigError("--style must name 1 id or as many as --condition")
        if len(z_style) == 1:
            z_style = z_style.expand(len(z_cond), -1)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with torch.no_grad():
        for p_idx, pose in enumerate(poses):
            theta = pose.as_tensor().unsqueeze(0).expand(len(z_cond), 3)
            images = generator(z_cond, theta, z_style=z_style)
            u8 = evaluation.to_uint8(images)
            for c_idx in range(len(z_cond)):
                path = out_dir / f"pose{p_idx:02d}_cond{c_idx:02d}.png"
                from PIL import Image
                Image.fromarray(u8[c_idx]).save(path)
                written.append(path)
    return written


def run_lambda_sweep(cfg: Config, data_dir, distill_dir, out_root,
                     values=(0.0, 1.0)) -> dict:
    """Train + evaluate one full-mode base run per lambda_cat value; the
    acceptance harness compares the final recorded categorical losses."""
    results = {}
    for value in values:
        cfg_v = cfg.with_overrides(lambda_cat=float(value), ablation_mode="full")
        run_dir = Path(out_root) / f"lambda_cat_{value:g}"
        run_train(cfg_v, data_dir, distill_dir, "base", run_dir)
        run_eval(data_dir, run_dir)
        trace = read_trace(run_dir / "losses.tsv")
        results[float(value)] = {
            "run_dir": run_dir,
            "final_cat": trace[-1].cat if trace else float("nan"),
            "report": run_dir / "metrics.txt",
            "grid": run_dir / "grids" / "base_views.png",
        }
    return results


# ---------------------------------------------------------------------------
# argparse layer
# ---------------------------------------------------------------------------

def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = core._parse_value(value)
    return out


def _config_from_args(args) -> Config:
    overrides = _parse_overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        overrides["ablation_mode"] = args.mode
    return load_config(getattr(args, "config", None), overrides)


def _default_out(root: str, command: str, cfg: Config) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path(root) / f"{command}-{stamp}-s{cfg.seed}"


def _parse_poses(text: str) -> list[ViewPose]:
    poses = []
    for part in text.split(";"):
        vals = [float(v) for v in part.split(",")]
        if len(vals) != 3:
            raise ConfigError(f"pose needs 3 angles, got {part!r}")
        poses.append(ViewPose(*vals))
    return poses


def _add_common(p: argparse.ArgumentParser, config=True):
    if config:
        p.add_argument("--config", help="plain-text config file (key = value lines)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (repeatable)")
        p.add_argument("--seed", type=int, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbnet",
        description="Joint few-shot recognition and novel-view synthesis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="render the procedural toy dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty target")
    p.add_argument("--n-base", type=int, default=8)
    p.add_argument("--n-novel", type=int, default=4)
    p.add_argument("--images-per-category", type=int, default=20)

    p = sub.add_parser("pretrain", help="train the high-resolution teacher "
                                        "and cache its features")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output directory (default runs/...)")

    p = sub.add_parser("distill", help="train the low-resolution extractor "
                                       "against the cached teacher features")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pretrain-dir", required=True)
    p.add_argument("--out")

    p = sub.add_parser("train", help="episodic training for one phase")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--distill-dir", help="distill output directory")
    p.add_argument("--phase", choices=("base", "novel"), default="base")
    p.add_argument("--mode", choices=core.ABLATION_MODES,
                   help="override ablation_mode")
    p.add_argument("--base-run", help="base run directory (novel phase)")
    p.add_argument("--augmenter", help="view_only run directory (aug_only mode)")
    p.add_argument("--feature-cache", help="pretrain cache file "
                                           "(joint_feature_update only)")
    p.add_argument("--resume", action="store_true",
                   help="continue from the latest checkpoint in --out")
    p.add_argument("--out")

    p = sub.add_parser("eval", help="metrics + view grids for a trained run")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--out", help="default: write into the run directory")

    p = sub.add_parser("synthesize", help="render images from a checkpoint")
    _add_common(p, config=False)
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--poses", required=True,
                   help="semicolon-separated x,y,z angle triples (radians)")
    p.add_argument("--condition", required=True,
                   help="comma-separated conditioning image ids")
    p.add_argument("--style", help="comma-separated style image ids "
                                   "(attribute transfer)")
    p.add_argument("--out", required=True)
    return parser


def _dispatch(args) -> int:
    if args.command == "make-toy":
        cfg = _config_from_args(args)
        spec = ToySpec(n_base=args.n_base, n_novel=args.n_novel,
                       images_per_category=args.images_per_category,
                       resolution=cfg.teacher_resolution)
        out = run_make_toy(cfg, args.out, spec, force=args.force)
        print(f"toy dataset written to {out}")
    elif args.command == "pretrain":
        cfg = _config_from_args(args)
        out = args.out or _default_out("runs", "pretrain", cfg)
        info = run_pretrain(cfg, args.data, out)
        print(f"pretrain done: accuracy={info['accuracy']:.4f} "
              f"cache_reused={info['cache_reused']} out={info['out_dir']}")
    elif args.command == "distill":
        cfg = _config_from_args(args)
        out = args.out or _default_out("runs", "distill", cfg)
        info = run_distill(cfg, args.data, args.pretrain_dir, out)
        h = info["history"]
        print(f"distill done: loss {h[0]:.5g} -> {h[-1]:.5g} out={info['out_dir']}"
              if h else f"distill done (0 iterations) out={info['out_dir']}")
    elif args.command == "train":
        cfg = _config_from_args(args)
        out = args.out or _default_out("runs", f"train-{args.phase}", cfg)
        info = run_train(cfg, args.data, args.distill_dir, args.phase, out,
                         base_run=args.base_run, augmenter_run=args.augmenter,
                         resume=args.resume, feature_cache=args.feature_cache)
        print(f"train {args.phase} done: out={info['out_dir']}")
    elif args.command == "eval":
        cfg = _config_from_args(args) if args.config else None
        info = run_eval(args.data, args.run, out_dir=args.out, config=cfg)
        print(f"eval done: out={info['out_dir']}")
        for k, v in info["report"].flat().items():
            print(f"  {k} = {v}")
    elif args.command == "synthesize":
        poses = _parse_poses(args.poses)
        cond = [s for s in args.condition.split(",") if s]
        style = [s for s in args.style.split(",") if s] if args.style else None
        written = run_synthesize(args.data, args.run, poses, cond, style,
                                 args.out)
        print(f"wrote {len(written)} images to {args.out}")
    else:  # pragma: no cover - argparse enforces the choices
        raise ConfigError(f"unknown command {args.command!r}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"ERROR[{EXIT_CONFIG}:config] {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"ERROR[{EXIT_DATA}:data] {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"ERROR[{EXIT_NUMERIC}:numeric] {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"ERROR[{EXIT_IO}:io] {exc}", file=sys.stderr)
        return EXIT_IO
    except FBNetError as exc:  # pragma: no cover - safety net
        print(f"ERROR[1:internal] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
