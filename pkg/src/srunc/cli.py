"""Command-line entry point: ``srunc <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Errors are printed to stderr as ``error: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import ConfigError, ImageFormatError, ShapeError, SRUncError
from .config import RunConfig
from .evaluation import SetEvaluation, evaluate_set, reports_to_csv
from .imaging import (
    DatasetManifest,
    as_image,
    bicubic_resize,
    load_image,
    load_pairs,
    make_pair,
    save_image,
    save_image16,
    scan_manifest,
    center_origin,
)
from .models import forward
from .persistence import (
    CheckpointError,
    load_checkpoint,
    read_sigma,
    render_overlay,
    save_checkpoint,
    sigma_gray,
    write_sigma,
)
from .training import TrainingDivergedError, run_recipe, train_ensemble
from .uncertainty import (
    DEFAULT_MCD_SAMPLES,
    SampleStack,
    aggregate_mean,
    aggregate_std,
    check_mcd_capable,
    ensemble_sample,
    mc_dropout_sample,
)

logger = logging.getLogger("srunc")


class UsageError(SRUncError):
    pass


@contextmanager
def deterministic_mode(flag: bool):
    """Single-threaded, deterministic kernels for the duration of a command."""
    if not flag:
        yield
        return
    threads = torch.get_num_threads()
    was = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(was)


def _load_config(path: str | None, seed: int | None) -> RunConfig:
    cfg = RunConfig.from_file(path) if path else RunConfig()
    if seed is not None:
        cfg.seed = seed
    return cfg


def _safe_id(source_id: str) -> str:
    return Path(source_id).with_suffix("").as_posix().replace("/", "__")


# -- samplers ------------------------------------------------------------------


def make_sampler(method: str, checkpoints: Sequence[str], M: int | None, seed: int,
                 scale: int = 4) -> Callable[[np.ndarray], SampleStack]:
    """Map an LR image to a :class:`SampleStack` for the requested method."""
    if method == "bicubic":
        def bicubic(lr):
            return SampleStack(bicubic_resize(lr, scale * lr.shape[0], scale * lr.shape[1])[None], "single")
        return bicubic
    if not checkpoints:
        raise UsageError(f"method {method!r} needs at least one --checkpoint")
    gens = [load_checkpoint(p).generator for p in checkpoints]
    if method == "single":
        if len(gens) != 1:
            raise UsageError("method 'single' takes exactly one checkpoint")
        return lambda lr: SampleStack(forward(gens[0], lr), "single")
    if method == "mcd":
        if len(gens) != 1:
            raise UsageError("method 'mcd' takes exactly one checkpoint")
        try:
            check_mcd_capable(gens[0])
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc
        return lambda lr: mc_dropout_sample(gens[0], lr, M or DEFAULT_MCD_SAMPLES, seed)
    if method == "ensemble":
        if len(gens) < 2:
            raise UsageError("method 'ensemble' needs at least two checkpoints")
        return lambda lr: ensemble_sample(gens, lr)
    raise UsageError(f"unknown method {method!r}")


# -- commands --------------------------------------------------------------------


def cmd_prepare(args) -> int:
    manifest = scan_manifest(args.in_dir, args.scale, args.hr_size, args.split)
    out = Path(args.out_dir)
    (out / "hr").mkdir(parents=True, exist_ok=True)
    (out / "lr").mkdir(parents=True, exist_ok=True)
    entries = []
    for source_id, _, split in manifest.entries:
        img = load_image(manifest.root / source_id)
        name = _safe_id(source_id) + ".png"
        pair = make_pair(img, center_origin(img.shape, args.hr_size), args.hr_size, args.scale, source_id)
        save_image(pair.hr, out / "hr" / name)
        save_image(pair.lr, out / "lr" / name)
        entries.append((_safe_id(source_id), f"hr/{name}", split))
    DatasetManifest(entries, args.scale, args.hr_size, args.hr_size // args.scale).write(out / "manifest.tsv")
    skip_lines = [f"{path}\t{reason}" for path, reason in manifest.skipped]
    (out / "skipped.txt").write_text("".join(line + "\n" for line in skip_lines), encoding="utf-8")
    if not entries:
        print(f"warning: no usable images found in {args.in_dir}", file=sys.stderr)
    print(f"prepared {len(entries)} pairs ({len(manifest.skipped)} skipped) in {out}")
    return 0


def _train_data(cfg: RunConfig, args):
    path = args.manifest or cfg.train_manifest
    if not path:
        raise UsageError("no training manifest (use --manifest or data.train_manifest)")
    manifest = DatasetManifest.read(path)
    if not len(manifest):
        raise UsageError(f"training manifest {path} is empty")
    return load_pairs(manifest)


def _write_run(ckpt, out: Path, stem: str, suffix: str = "") -> None:
    save_checkpoint(ckpt, out / f"{stem}{suffix}.ckpt")
    (out / f"metrics{suffix}.csv").write_text(ckpt.report.to_csv(), encoding="utf-8")
    (out / f"train{suffix}.log").write_text(ckpt.report.to_log(), encoding="utf-8")


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out = Path(args.out or cfg.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    pairs = _train_data(cfg, args)
    extractor = cfg.build_extractor() if cfg.adversarial_enabled else None
    ckpt = run_recipe(cfg.recipe(), pairs, cfg.seed, extractor)
    _write_run(ckpt, out, "checkpoint")
    logger.info("training wall time %.2fs", ckpt.report.wall_time)
    print(f"wrote {out / 'checkpoint.ckpt'}")
    return 0


def cmd_train_ensemble(args) -> int:
    cfg = _load_config(args.config, args.seed)
    seeds = cfg.member_seeds()
    M = cfg.M or len(seeds)
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"ensemble seeds must be distinct, got {seeds}")
    out = Path(args.out or cfg.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    pairs = _train_data(cfg, args)
    extractor = cfg.build_extractor() if cfg.adversarial_enabled else None
    ckpts = train_ensemble(cfg.recipe(), M, seeds, pairs, extractor)
    for k, ckpt in enumerate(ckpts):
        _write_run(ckpt, out, "member", f"_{k}")
    print(f"wrote {len(ckpts)} members to {out}")
    return 0


def cmd_infer(args) -> int:
    cfg = _load_config(args.config, args.seed)
    method = args.method or cfg.method
    if method == "bicubic":
        raise UsageError("infer needs a trained method: single, mcd or ensemble")
    sampler = make_sampler(method, args.checkpoint, args.M or cfg.M, cfg.seed)
    lr = load_image(args.image)
    stack = sampler(lr)
    mean = aggregate_mean(stack)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    save_image(mean, out / f"{stem}_sr.png")
    written = [f"{stem}_sr.png"]
    if method != "single":
        mode = args.mode or cfg.std_mode
        umap = aggregate_std(stack, mode)
        save_image16(sigma_gray(umap.sigma), out / f"{stem}_sigma.png")
        write_sigma(umap.sigma, out / f"{stem}_sigma.f32", mode, stack.M)
        written += [f"{stem}_sigma.png", f"{stem}_sigma.f32"]
        print(f"sigma_mean={umap.sigma_mean!r}")
    print("wrote " + ", ".join(written))
    return 0


def _evaluate(args) -> tuple[RunConfig, SetEvaluation]:
    cfg = _load_config(args.config, args.seed)
    path = args.manifest or cfg.eval_manifest
    if not path:
        raise UsageError("no evaluation manifest (use --manifest or data.eval_manifest)")
    manifest = DatasetManifest.read(path)
    if not len(manifest):
        raise UsageError(f"evaluation manifest {path} is empty")
    method = args.method or cfg.method
    sampler = make_sampler(method, args.checkpoint, args.M or cfg.M, cfg.seed, manifest.scale)
    pairs = load_pairs(manifest, crop=cfg.eval_crop, rng=np.random.default_rng(cfg.seed))
    result = evaluate_set(sampler, pairs, args.mode or cfg.std_mode, cfg.n_bins, cfg.n_thresholds, cfg.luminance)
    return cfg, result


def cmd_evaluate(args) -> int:
    _, result = _evaluate(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(reports_to_csv(result.reports), encoding="utf-8")
    summary = " ".join(f"{k}={v:.6g}" for k, v in result.summary.items())
    print(f"{len(result.reports)} images: {summary}")
    return 0


def cmd_calibrate(args) -> int:
    _, result = _evaluate(args)
    out = Path(args.out)
    (out / "sweeps").mkdir(parents=True, exist_ok=True)
    (out / "calibration_binned.csv").write_text(result.curve.to_csv(), encoding="utf-8")
    for image_id, curve in result.sweeps.items():
        (out / "sweeps" / f"{image_id}.csv").write_text(curve.to_csv(), encoding="utf-8")
    print(f"wrote binned curve ({len(result.curve.points)} points) and {len(result.sweeps)} sweeps to {out}")
    return 0


def cmd_render(args) -> int:
    sr = load_image(args.sr)
    sigma, _ = read_sigma(args.sigma)
    if sigma.shape[:2] != sr.shape[:2]:
        raise UsageError(f"sigma {sigma.shape[:2]} and SR image {sr.shape[:2]} differ in size")
    overlay = render_overlay(sr, sigma)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(overlay / 255.0, out)
    if args.original:
        orig = load_image(args.original)
        if orig.shape[:2] != sr.shape[:2]:
            raise UsageError(f"original {orig.shape[:2]} and SR image {sr.shape[:2]} differ in size")
        rgb = [np.repeat(x, 3, axis=2) if x.shape[2] == 1 else x for x in (orig, sr)]
        panel = np.concatenate([rgb[0], rgb[1], overlay / 255.0], axis=1)
        save_image(as_image(panel), out.with_name(out.stem + "_panel.png"))
    print(f"wrote {out}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (YAML, dotted keys)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="srunc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", parents=[common], help="crop HR images and derive bicubic LR pairs")
    s.add_argument("in_dir")
    s.add_argument("out_dir")
    s.add_argument("--scale", type=int, default=4)
    s.add_argument("--hr-size", type=int, default=256)
    s.add_argument("--split", default="train")
    s.set_defaults(func=cmd_prepare)

    for name, func in (("train", cmd_train), ("train-ensemble", cmd_train_ensemble)):
        s = sub.add_parser(name, parents=[common], help=f"{name.replace('-', ' ')} from a config")
        s.add_argument("--manifest", help="training manifest (overrides data.train_manifest)")
        s.add_argument("--out", help="output directory (overrides output.dir)")
        s.set_defaults(func=func)

    def sampling(s):
        s.add_argument("--checkpoint", action="append", default=[], help="repeat for ensembles")
        s.add_argument("--M", type=int, help="MC-Dropout sample count")
        s.add_argument("--mode", choices=("paper_eq7", "sample_std"))

    s = sub.add_parser("infer", parents=[common], help="super-resolve one LR image")
    sampling(s)
    s.add_argument("--image", required=True)
    s.add_argument("--method", choices=("single", "mcd", "ensemble"))
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_infer)

    for name, func, out_help in (("evaluate", cmd_evaluate, "metrics CSV path"),
                                 ("calibrate", cmd_calibrate, "output directory")):
        s = sub.add_parser(name, parents=[common], help=f"{name} over a prepared manifest")
        sampling(s)
        s.add_argument("--manifest")
        s.add_argument("--method", choices=("single", "mcd", "ensemble", "bicubic"))
        s.add_argument("--out", required=True, help=out_help)
        s.set_defaults(func=func)

    s = sub.add_parser("render", parents=[common], help="overlay sigma on an SR image")
    s.add_argument("--sr", required=True)
    s.add_argument("--sigma", required=True, help="raw sigma sidecar (.f32)")
    s.add_argument("--original", help="optional reference image for a side-by-side panel")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with deterministic_mode(args.deterministic):
            return args.func(args)
    except (UsageError, ConfigError, ShapeError, ImageFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, SRUncError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
