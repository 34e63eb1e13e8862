"""Command-line entry points: gen-data, train, eval, annotate, analyze (plus pretrain).

Relative paths are resolved against ``$SEMTRACK_OUTPUT_ROOT`` when it is set.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .adapters import AdapterSet
from .analysis import (extract_object_features, encode_batch, linear_probe, pca_rgb_export, pca_sweep,
                       write_table)
from .config import ADAPTER_KINDS, PROMPT_KINDS, RunConfig, TrainerConfig, load_run_config
from .data import (CLASSES, MAX_FOLDS, Episode, FoldSpec, generate_fold_episodes, generate_semantic_samples,
                   make_folds, read_episode, read_manifest, write_episode)
from .encoder import encode_image
from .errors import FormatError, InputError, SemTrackError
from .memory import MemoryBank
from .model import SemTrackModel
from .pipeline import (build_reference_bank, evaluate_fss, load_checkpoint,
                       save_checkpoint, segment_features, train, write_loss_curve)
from .pretrain import base_model
from .promptdec import Prompt

log = logging.getLogger("semtrack")

OUTPUT_ROOT_ENV = "SEMTRACK_OUTPUT_ROOT"


class UsageError(Exception):
    """Bad flag combination detected after argument parsing (exit code 2)."""


def resolve(path: str | Path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


# -- data directory layout ------------------------------------------------------------
#   <data>/fold_<k>/manifest
#   <data>/fold_<k>/{train,test}/<class>/ep_<e>/   (episode directories)

def fold_dir(data: Path, fold: int) -> Path:
    return data / f"fold_{fold}"


def write_fold_manifest(fold: FoldSpec, directory: Path, seed: int, episodes_per_class: int,
                        samples_per_episode: int) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    rows = {
        "fold_id": fold.fold_id,
        "train_classes": " ".join(fold.train_classes),
        "test_classes": " ".join(fold.test_classes),
        "seed": seed,
        "episodes_per_class": episodes_per_class,
        "samples_per_episode": samples_per_episode,
    }
    (directory / "manifest").write_text("".join(f"{k} = {v}\n" for k, v in rows.items()))


def read_fold(data: Path, fold: int) -> FoldSpec:
    d = fold_dir(data, fold)
    if not d.is_dir():
        raise InputError(f"no fold {fold} under {data}; run gen-data first")
    m = read_manifest(d / "manifest")
    try:
        return FoldSpec(int(m["fold_id"]), tuple(m["train_classes"].split()), tuple(m["test_classes"].split()))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed fold manifest in {d}: {exc}") from None


def read_split(data: Path, fold: FoldSpec, split: str) -> list[Episode]:
    allowed = set(fold.train_classes if split == "train" else fold.test_classes)
    episodes = []
    for class_dir in sorted((fold_dir(data, fold.fold_id) / split).iterdir()):
        if class_dir.name not in allowed:
            raise AssertionError(f"fold leakage: {class_dir.name} is not a {split} class of fold {fold.fold_id}")
        for ep_dir in sorted(class_dir.iterdir()):
            episodes.append(read_episode(ep_dir))
    if not episodes:
        raise InputError(f"fold {fold.fold_id} has no {split} episodes")
    return episodes


def class_guard(allowed: Sequence[str], audit: list[str]):
    allowed = set(allowed)

    def check(class_id: str) -> None:
        audit.append(class_id)
        assert class_id in allowed, f"fold leakage: episode of {class_id} sampled"
    return check


# -- model helpers --------------------------------------------------------------------

def load_base(cfg: RunConfig) -> SemTrackModel:
    return base_model(cfg.encoder, cfg.base)


def load_adapters(model: SemTrackModel, checkpoint: Optional[str]) -> Optional[AdapterSet]:
    if checkpoint is None:
        return None
    return load_checkpoint(resolve(checkpoint), expected_fingerprint=model.fingerprint())


def trainer_config(cfg: RunConfig, **overrides) -> TrainerConfig:
    fields = {**cfg.trainer.__dict__, **overrides}
    return TrainerConfig(**fields)


# -- commands -------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    model = load_base(cfg)
    print(f"base model ready: {model.base_tag}")
    return 0


def cmd_gen_data(args) -> int:
    if not 1 <= args.folds <= MAX_FOLDS:
        raise UsageError(f"--folds must be in [1, {MAX_FOLDS}]")
    if args.episodes_per_class < 1:
        raise UsageError("--episodes-per-class must be >= 1")
    cfg = load_run_config(args.config)
    spe = cfg.data.samples_per_episode
    out = resolve(args.out)
    for fold in make_folds(args.folds):
        d = fold_dir(out, fold.fold_id)
        write_fold_manifest(fold, d, args.seed, args.episodes_per_class, spe)
        for split, classes in (("train", fold.train_classes), ("test", fold.test_classes)):
            split_seed = (args.seed * MAX_FOLDS + fold.fold_id) * 2 + (split == "test")
            episodes = generate_fold_episodes(classes, args.episodes_per_class, spe, split_seed,
                                              distractors=cfg.data.distractors)
            counters: dict[str, int] = {}
            for ep in episodes:
                e = counters.get(ep.class_id, 0)
                counters[ep.class_id] = e + 1
                write_episode(ep, d / split / ep.class_id / f"ep_{e:03d}")
    print(f"wrote {len(CLASSES)} classes in {args.folds} folds to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    data = resolve(args.data)
    fold = read_fold(data, args.fold)
    episodes = read_split(data, fold, "train")
    model = load_base(cfg)
    overrides = {k: v for k, v in (("seed", args.seed), ("epochs", args.epochs)) if v is not None}
    tcfg = trainer_config(cfg, **overrides)
    audit: list[str] = []
    adapters, curve = train(model, episodes, tcfg, kind=cfg.adapters.kind,
                            bottleneck_dim=cfg.adapters.resolved_dim(cfg.encoder.embed_dim),
                            class_guard=class_guard(fold.train_classes, audit))
    frozen = sum(p.numel() for p in model.parameters())
    print(f"frozen parameters: {frozen}")
    print(f"trainable parameters: {adapters.num_parameters()}")
    ckpt = resolve(args.out_checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(adapters, ckpt, model.fingerprint(), tcfg.seed)
    curve_path = ckpt.with_suffix(".loss.csv")
    write_loss_curve(curve, curve_path)
    ckpt.with_suffix(".classes.txt").write_text("\n".join(sorted(set(audit))) + "\n")
    print(f"checkpoint: {ckpt}")
    print(f"loss curve: {curve_path} ({len(curve)} steps, {curve[0].total:.4f} -> {curve[-1].total:.4f})")
    return 0


def run_eval(model, adapters, episodes, shots, prompt, seed, targets_per_episode, permute=False):
    return evaluate_fss(model, episodes, adapters, shots=shots, prompt_kind=prompt,
                        targets_per_episode=targets_per_episode, seed=seed, permute_references=permute)


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    data = resolve(args.data)
    fold = read_fold(data, args.fold)
    episodes = read_split(data, fold, "test")
    model = load_base(cfg)
    adapters = load_adapters(model, args.checkpoint)
    shots = args.shots if args.shots is not None else cfg.eval.shots
    prompt = args.prompt or cfg.eval.prompt
    seed = args.seed if args.seed is not None else cfg.eval.seed
    result = run_eval(model, adapters, episodes, shots, prompt, seed, cfg.eval.targets_per_episode,
                      args.permute_refs)
    out = resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(sorted(result.per_class.items()), ["class", "iou"], out / "per_class.csv")
    write_table([[fold.fold_id, shots, prompt, seed, f"{result.miou:.6f}"]],
                ["fold", "shots", "prompt", "seed", "miou"], out / "summary.csv")
    for c, v in sorted(result.per_class.items()):
        print(f"{c}: {v:.4f}")
    print(f"mIoU ({shots}-shot, {prompt}): {result.miou:.4f}")
    return 0


def read_references(refs: Path) -> dict[str, tuple[np.ndarray, Prompt]]:
    out = {}
    for mask_path in sorted(refs.glob("*_mask.png")):
        name = mask_path.name[: -len("_mask.png")]
        img_path = refs / f"{name}.png"
        if not img_path.is_file():
            raise FormatError(f"reference mask {mask_path} has no image {img_path.name}")
        image = np.asarray(Image.open(img_path).convert("RGB"))
        mask = (np.asarray(Image.open(mask_path).convert("L")) > 127).astype(np.uint8)
        out[name] = (image, Prompt("mask", mask))
    if not out:
        raise InputError(f"no '<class>.png' + '<class>_mask.png' references in {refs}")
    return out


def annotate(model: SemTrackModel, adapters: Optional[AdapterSet], refs: dict[str, tuple[np.ndarray, Prompt]],
             targets: dict[str, np.ndarray], cache: bool) -> dict[tuple[str, str], np.ndarray]:
    """Masks per (target, class). With ``cache`` every reference is encoded into memory once."""
    banks: dict[str, MemoryBank] = {}
    if cache:
        banks = {c: build_reference_bank(model, [ref], adapters) for c, ref in refs.items()}
    out = {}
    for name, image in targets.items():
        feats = encode_image(model.encoder, image, adapters, frame_id=name)
        for c, ref in refs.items():
            bank = banks[c] if cache else build_reference_bank(model, [ref], adapters)
            out[(name, c)] = segment_features(model, bank, feats).numpy()
    return out


def cmd_annotate(args) -> int:
    cfg = load_run_config(args.config)
    refs = read_references(resolve(args.refs))
    target_dir = resolve(args.targets)
    target_paths = sorted(target_dir.glob("*.png")) if target_dir.is_dir() else []
    if not target_paths:
        raise InputError(f"no target images in {target_dir}")
    targets = {p.stem: np.asarray(Image.open(p).convert("RGB")) for p in target_paths}
    model = load_base(cfg)
    adapters = load_adapters(model, args.checkpoint)
    start = time.perf_counter()
    masks = annotate(model, adapters, refs, targets, args.cache == "on")
    elapsed = time.perf_counter() - start
    out = resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for (name, c), m in masks.items():
        Image.fromarray(m.astype(np.uint8) * 255, mode="L").save(out / f"{name}__{c}.png")
    print(f"annotated {len(targets)} targets x {len(refs)} classes = {len(masks)} masks")
    print(f"cache {args.cache}: {elapsed:.3f} s total, {len(targets) / elapsed:.2f} images/sec")
    return 0


def _fold_test_episodes(args, cfg) -> tuple[FoldSpec, list[Episode]]:
    data = resolve(args.data)
    fold = read_fold(data, args.fold)
    return fold, read_split(data, fold, "test")


def split_per_class(episodes: Sequence[Episode]) -> tuple[list[Episode], list[Episode]]:
    """Alternate each class's episodes between a centroid-fitting and a held-out split."""
    by_class: dict[str, list[Episode]] = {}
    for ep in episodes:
        by_class.setdefault(ep.class_id, []).append(ep)
    fit, held = [], []
    for eps in by_class.values():
        if len(eps) < 2:
            raise InputError(f"class {eps[0].class_id} needs >= 2 episodes for a fit/held-out split")
        fit += eps[::2]
        held += eps[1::2]
    return fit, held


def cmd_analyze(args) -> int:
    if args.mode != "ablation" and args.checkpoint is None:
        raise UsageError(f"--mode {args.mode} compares frozen vs adapted and needs --checkpoint")
    cfg = load_run_config(args.config)
    model = load_base(cfg)
    adapters = load_adapters(model, args.checkpoint)
    out = resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fold, test_eps = _fold_test_episodes(args, cfg)
    d = cfg.encoder.embed_dim

    if args.mode == "pca-sweep":
        fit_eps, held_eps = split_per_class(test_eps)
        grid = sorted({n for n in (1, 2, 4, 8, 16, 32) if n < d} | {d})
        curves = {}
        for name, a in (("frozen", None), ("adapted", adapters)):
            tr = extract_object_features(model, fit_eps, a, "train")
            te = extract_object_features(model, held_eps, a, "test")
            curves[name] = dict(pca_sweep(tr, te, grid, seed=args.seed))
        rows = [[n, f"{curves['frozen'][n]:.6f}", f"{curves['adapted'][n]:.6f}"] for n in grid]
        write_table(rows, ["n_components", "frozen", "adapted"], out / "pca_sweep.csv")
        for r in rows:
            print(",".join(map(str, r)))
    elif args.mode == "probe":
        classes = fold.test_classes
        train_set = generate_semantic_samples(classes, 64, args.seed * 2)
        test_set = generate_semantic_samples(classes, 32, args.seed * 2 + 1)
        rows = []
        for name, a in (("frozen", None), ("adapted", adapters)):
            probe = linear_probe(model, train_set, test_set, len(classes) + 1, a, seed=args.seed)
            fss = run_eval(model, a, test_eps, 1, "mask", args.seed, cfg.eval.targets_per_episode).miou
            rows.append([name, f"{probe:.6f}", f"{fss:.6f}"])
        write_table(rows, ["model", "probe_miou", "fss_miou"], out / "probe.csv")
        for r in rows:
            print(",".join(r))
    elif args.mode == "pca-rgb":
        images = [s.image for ep in test_eps[:4] for s in ep.samples[:1]]
        for name, a in (("frozen", None), ("adapted", adapters)):
            pca_rgb_export(encode_batch(model, images, a), out / f"pca_rgb_{name}.png", cfg.encoder.image_size)
        print(f"wrote {out / 'pca_rgb_frozen.png'} and {out / 'pca_rgb_adapted.png'}")
    else:
        rows = ablation(model, cfg, args, fold, test_eps)
        write_table(rows, ["variant", "kind", "bottleneck_dim", "J", "miou"], out / "ablation.csv")
        for r in rows:
            print(",".join(map(str, r)))
    return 0


def ablation(model, cfg, args, fold, test_eps) -> list[list]:
    train_eps = read_split(resolve(args.data), fold, "train")
    d = cfg.encoder.embed_dim
    default_kind, default_dim = cfg.adapters.kind, cfg.adapters.resolved_dim(d)
    evaluate = lambda a: run_eval(model, a, test_eps, cfg.eval.shots, "mask", args.seed,
                                  cfg.eval.targets_per_episode).miou
    variants = [("frozen", None, None, None), ("adapter_j1", default_kind, default_dim, 1),
                ("full_loss", default_kind, default_dim, cfg.trainer.clip_targets)]
    variants += [(f"kind_{k}", k, default_dim, cfg.trainer.clip_targets) for k in args.kinds if k != default_kind]
    variants += [(f"dim_{r}", default_kind, r, cfg.trainer.clip_targets) for r in args.dims if r != default_dim]
    rows = []
    for name, kind, r, J in variants:
        if kind is None:
            miou = evaluate(None)
        else:
            tcfg = trainer_config(cfg, clip_targets=J, seed=args.seed)
            adapters, _ = train(model, train_eps, tcfg, kind=kind, bottleneck_dim=r,
                                class_guard=class_guard(fold.train_classes, []))
            miou = evaluate(adapters)
        rows.append([name, kind or "-", r or "-", J or "-", f"{miou:.6f}"])
    return rows


# -- parser ---------------------------------------------------------------------------

def _positive(value: str) -> int:
    v = int(value)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semtrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        p.add_argument("--config", default=None, help="INI run configuration")
        if data:
            p.add_argument("--data", default="data", help="directory written by gen-data")

    p = sub.add_parser("pretrain", help="build (or load) the cached frozen base model")
    common(p, data=False)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gen-data", help="write the synthetic benchmark")
    common(p, data=False)
    p.add_argument("--out", default="data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--episodes-per-class", type=int, default=4)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train adapters on a fold's seen classes")
    common(p)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=_positive, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="k-shot evaluation on a fold's unseen classes")
    common(p)
    p.add_argument("--checkpoint", default=None, help="adapters; omit for the frozen baseline")
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--shots", type=_positive, default=None)
    p.add_argument("--prompt", choices=PROMPT_KINDS, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--permute-refs", action="store_true", help="shuffle reference order per episode")
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("annotate", help="segment many targets against cached references")
    common(p, data=False)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--refs", required=True, help="dir with <class>.png and <class>_mask.png")
    p.add_argument("--targets", required=True, help="dir of target .png images")
    p.add_argument("--out", required=True)
    p.add_argument("--cache", choices=["on", "off"], default="on")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("analyze", help="representation analyses and ablations")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--mode", choices=["pca-sweep", "probe", "pca-rgb", "ablation"], required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kinds", nargs="*", choices=ADAPTER_KINDS, default=[])
    p.add_argument("--dims", nargs="*", type=_positive, default=[])
    p.add_argument("--out", default="analysis")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"semtrack: error: {exc}", file=sys.stderr)
        return 2
    except (SemTrackError, OSError, AssertionError) as exc:
        print(f"semtrack: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
