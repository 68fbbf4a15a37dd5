"""Command-line entry point: ``condnerf {train,render,eval-fid,synth-data,inspect}``.

Exit codes: 0 success, 2 configuration / checkpoint / usage error, 3 dataset
error, 4 numerical failure during training.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig, load_config
from .data import DatasetError, SyntheticSceneSpec, generate_synthetic, load_all, load_manifest
from .evaluation import (POSE_CONTROLS, compute_fid, generate_samples, load_embedding,
                         render_class_interpolation, render_condition_sweep, render_latent_interpolation,
                         render_pose_controls, render_rotation_grid)
from .training import CheckpointError, TrainingError, load_checkpoint, train

log = logging.getLogger("condnerf")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
GRID_KINDS = ("rotation", "sweep", "class-interp", "latent-interp", "pose")


class UsageError(Exception):
    """Bad flag values detected after argument parsing (exit 2)."""


# --------------------------------------------------------------------------
# helpers

def run_directory(base: str | Path, command: str) -> Path:
    """Fresh ``<base>/<timestamp>-<command>`` directory (suffixed if it already exists)."""
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    root = Path(base) / f"{stamp}-{command}"
    path, k = root, 1
    while path.exists():
        path = root.with_name(f"{root.name}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def _write_invocation(run_dir: Path, args: argparse.Namespace) -> None:
    record = {k: v for k, v in vars(args).items() if k != "func"}
    (run_dir / "invocation.json").write_text(json.dumps(record, indent=2, default=str))


def parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def parse_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def parse_range(text: str) -> list[float]:
    """``start:stop:count`` with both ends included."""
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"range must look like start:stop:count, got {text!r}")
    try:
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as exc:
        raise UsageError(f"bad range {text!r}") from exc
    if n < 2:
        raise UsageError("range count must be >= 2")
    return np.linspace(lo, hi, n).tolist()


def parse_overrides(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_attribute(name: str, attributes: Sequence[str], dim: int) -> int:
    if name in attributes:
        return list(attributes).index(name)
    try:
        idx = int(name)
    except ValueError:
        raise UsageError(f"unknown attribute {name!r}; known attributes: {list(attributes)}") from None
    if not 0 <= idx < dim:
        raise UsageError(f"attribute index {idx} out of range for {dim} attributes")
    return idx


# --------------------------------------------------------------------------
# subcommands

def cmd_train(args: argparse.Namespace) -> int:
    overrides = parse_overrides(args.set or [])
    for flag, key in (("iterations", "train.iterations"), ("seed", "train.seed"),
                      ("batch_size", "train.batch_size"), ("checkpoint_every", "train.checkpoint_every"),
                      ("manifest", "data.manifest"), ("output_dir", "output_dir"),
                      ("num_threads", "train.num_threads")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    try:
        cfg = load_config(args.config, overrides)
    except (OSError, ValueError, TypeError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    if cfg.data.manifest is None:
        log.error("config error: no dataset given (set data.manifest or pass --manifest)")
        return EXIT_CONFIG

    try:
        manifest = load_manifest(cfg.data.manifest)
        images, conditions = load_all(manifest, cfg.data.resolution, cfg.data.fail_on_bad_image)
    except DatasetError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    if manifest.dim_condition != cfg.model.dim_condition:
        log.info("using %d condition attributes from the manifest (config had %d)",
                 manifest.dim_condition, cfg.model.dim_condition)
        cfg.model.dim_condition = manifest.dim_condition

    resume = None
    if args.resume:
        try:
            resume = load_checkpoint(args.resume)
        except CheckpointError as exc:
            log.error("%s", exc)
            return EXIT_CONFIG

    run_dir = run_directory(cfg.output_dir, "train")
    cfg.save(run_dir / "config.json")
    _write_invocation(run_dir, args)
    log.info("run directory: %s", run_dir)

    def progress(parts: dict) -> None:
        if parts["iteration"] % max(args.print_every, 1) == 0:
            log.info("iter %d  loss_d %.4f  loss_g %.4f  r1 %.4f", parts["iteration"], parts["loss_d"],
                     parts["loss_g"], parts["r1"])

    try:
        last = None
        for last in train(cfg, images, conditions, out_dir=run_dir, attributes=manifest.attributes,
                          label_kinds=manifest.label_kinds, resume=resume, progress=progress):
            log.info("checkpoint at iteration %d", last.iteration)
    except TrainingError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    print(run_dir)
    return EXIT_OK


def _conditions(ckpt, text: str | None, rows: int) -> list[list[float]]:
    dim = RunConfig.from_dict(ckpt.config).model.dim_condition
    if text:
        chunks = [parse_floats(c) for c in text.split(";")]
        for c in chunks:
            if len(c) != dim:
                raise UsageError(f"condition {c} has {len(c)} entries, the model expects {dim}")
        if len(chunks) == 1:
            chunks = chunks * rows
        if len(chunks) != rows:
            raise UsageError(f"give one condition (or {rows} separated by ';')")
        return chunks
    pool = ckpt.label_pool
    if pool is None or pool.shape[0] == 0:
        return [[0.0] * dim for _ in range(rows)]
    return [pool[i % pool.shape[0]].tolist() for i in range(rows)]


def cmd_render(args: argparse.Namespace) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    cfg = ckpt.run_config()
    generator = ckpt.build_generator()
    prior = cfg.prior
    seeds = parse_ints(args.seeds)
    attributes = ckpt.attributes or [str(i) for i in range(cfg.model.dim_condition)]
    kind = args.kind
    if kind == "rotation":
        grid = render_rotation_grid(generator, prior, seeds, _conditions(ckpt, args.condition, len(seeds)),
                                    parse_floats(args.angles))
    elif kind == "sweep":
        if args.attr is None:
            raise UsageError("sweep needs --attr")
        idx = resolve_attribute(args.attr, attributes, cfg.model.dim_condition)
        base = _conditions(ckpt, args.condition, 1)[0]
        grid = render_condition_sweep(generator, prior, seeds, base, idx, parse_range(args.range))
    elif kind == "class-interp":
        if not (args.class_a and args.class_b):
            raise UsageError("class-interp needs --class-a and --class-b")
        grid = render_class_interpolation(generator, prior, seeds, attributes, args.class_a, args.class_b,
                                          args.steps)
    elif kind == "latent-interp":
        pairs = [tuple(parse_ints(p.replace("-", ","))) for p in args.seed_pairs.split(";")]
        if any(len(p) != 2 for p in pairs):
            raise UsageError("--seed-pairs expects a-b pairs separated by ';'")
        grid = render_latent_interpolation(generator, prior, _conditions(ckpt, args.condition, 1)[0], pairs,
                                           args.steps)
    else:
        grid = render_pose_controls(generator, prior, seeds, _conditions(ckpt, args.condition, len(seeds)),
                                    args.control, parse_floats(args.values))
    run_dir = run_directory(args.output_dir, f"render-{kind}")
    grid.sidecar["checkpoint"] = str(args.checkpoint)
    png, side = grid.save(run_dir / "grid.png")
    cfg.save(run_dir / "config.json")
    _write_invocation(run_dir, args)
    log.info("wrote %s (%d x %d tiles) and %s", png, *grid.shape, side)
    print(png)
    return EXIT_OK


def cmd_eval_fid(args: argparse.Namespace) -> int:
    try:
        ckpt = None if args.self_test else load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    try:
        manifest = load_manifest(args.manifest)
        resolution = ckpt.run_config().model.image_res if ckpt else (args.resolution or manifest.resolution or 64)
        images, conditions = load_all(manifest, resolution)
    except DatasetError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    n = images.shape[0]
    count = args.count
    if count > n:
        warnings.warn(f"requested {count} images but the dataset has {n}; using {n}", stacklevel=1)
        log.warning("count %d exceeds the dataset size; capped at %d", count, n)
        count = n
    order = np.random.default_rng(args.seed).permutation(n)[:count]
    idx = torch.from_numpy(order)
    real, cond = images[idx], conditions[idx]
    embedding = load_embedding(args.embedding)

    if args.self_test:
        fake = real
    else:
        cfg = ckpt.run_config()
        fake = generate_samples(ckpt.build_generator(), cond, cfg.prior, seed=args.seed)
    classes = manifest.class_attributes()
    kwargs = {}
    if classes:
        labels = np.asarray(classes)[cond[:, classes].numpy().argmax(1)]
        kwargs = dict(real_classes=labels, fake_classes=labels, class_names=manifest.attributes)
    report = compute_fid(real, fake, embedding, **kwargs)

    run_dir = run_directory(args.output_dir, "eval-fid")
    (run_dir / "fid.json").write_text(report.to_json())
    if ckpt is not None:
        ckpt.run_config().save(run_dir / "config.json")
    _write_invocation(run_dir, args)
    print(report.to_json())
    return EXIT_OK


def cmd_synth_data(args: argparse.Namespace) -> int:
    try:
        data = json.loads(Path(args.spec).read_text()) if args.spec else {}
        spec = SyntheticSceneSpec.from_dict(data)
        spec.validate()
    except (OSError, ValueError, TypeError) as exc:
        log.error("invalid synthetic spec: %s", exc)
        return EXIT_CONFIG
    if args.count < 1:
        log.error("--count must be >= 1")
        return EXIT_CONFIG
    out = Path(args.out_dir) if args.out_dir else run_directory(args.output_dir, "synth-data")
    manifest = generate_synthetic(spec, args.count, out, seed=args.seed)
    log.info("wrote %d images to %s", len(manifest), out)
    print(out / "manifest.csv")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    info = {"iteration": ckpt.iteration, "attributes": ckpt.attributes, "label_kinds": ckpt.label_kinds,
            "n_labels": 0 if ckpt.label_pool is None else int(ckpt.label_pool.shape[0]),
            "generator_parameters": int(sum(v.numel() for v in ckpt.generator.values())),
            "discriminator_parameters": int(sum(v.numel() for v in ckpt.discriminator.values())),
            **ckpt.metadata, "config": ckpt.config}
    print(json.dumps(info, indent=2))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="condnerf", description="Conditional 3D-aware GAN toolkit.")
    p.add_argument("--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a generator/discriminator pair")
    t.add_argument("--config", help="JSON or YAML run config (defaults used when omitted)")
    t.add_argument("--manifest", help="dataset manifest CSV or class-folder root (overrides data.manifest)")
    t.add_argument("--iterations", type=int, help="number of training iterations")
    t.add_argument("--batch-size", type=int, help="images per batch")
    t.add_argument("--seed", type=int, help="training seed")
    t.add_argument("--checkpoint-every", type=int, help="iterations between checkpoints")
    t.add_argument("--num-threads", type=int, help="torch CPU threads")
    t.add_argument("--output-dir", help="parent of the timestamped run directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--print-every", type=int, default=100, help="iterations between progress lines")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted config override, e.g. model.hidden=64 (repeatable)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render an evaluation grid from a checkpoint")
    r.add_argument("kind", help=f"grid kind: {', '.join(GRID_KINDS)}")
    r.add_argument("--checkpoint", required=True, help="checkpoint file")
    r.add_argument("--seeds", default="0,1,2,3", help="comma-separated latent seeds, one row each")
    r.add_argument("--condition", help="condition vector '1,0' (or one per row separated by ';'); "
                                       "defaults to labels from the training data")
    r.add_argument("--angles", default="0,30,60", help="rotation: object yaw offsets in degrees")
    r.add_argument("--attr", help="sweep: attribute name or index")
    r.add_argument("--range", default="0:3:7", help="sweep: start:stop:count")
    r.add_argument("--class-a", help="class-interp: start class")
    r.add_argument("--class-b", help="class-interp: end class")
    r.add_argument("--steps", type=int, default=5, help="interpolation columns")
    r.add_argument("--seed-pairs", default="0-1", help="latent-interp: pairs like '0-1;2-3'")
    r.add_argument("--control", default="horizontal", help=f"pose: one of {', '.join(POSE_CONTROLS)}")
    r.add_argument("--values", default="-0.3,0,0.3", help="pose: per-column offsets or factors (write --values=-0.3,0 when the first is negative)")
    r.add_argument("--output-dir", default="runs", help="parent of the timestamped run directory")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval-fid", help="FID between generated and real images")
    e.add_argument("--checkpoint", help="checkpoint file (not needed with --self-test)")
    e.add_argument("--manifest", required=True, help="real-image manifest")
    e.add_argument("--count", type=int, default=20000, help="number of real/fake images (capped at dataset size)")
    e.add_argument("--embedding", default="random", help="'random', 'random:<seed>' or a TorchScript file")
    e.add_argument("--self-test", action="store_true", help="score the real images against themselves")
    e.add_argument("--resolution", type=int, help="image size for --self-test (default: manifest resolution)")
    e.add_argument("--seed", type=int, default=0, help="sampling seed")
    e.add_argument("--output-dir", default="runs", help="parent of the timestamped run directory")
    e.set_defaults(func=cmd_eval_fid)

    s = sub.add_parser("synth-data", help="write a synthetic hue-controlled dataset")
    s.add_argument("--spec", help="JSON synthetic scene spec (defaults used when omitted)")
    s.add_argument("--count", type=int, default=512, help="number of images")
    s.add_argument("--seed", type=int, default=0, help="dataset seed")
    s.add_argument("--out-dir", help="destination directory (default: a new run directory)")
    s.add_argument("--output-dir", default="runs", help="parent of the run directory when --out-dir is absent")
    s.set_defaults(func=cmd_synth_data)

    i = sub.add_parser("inspect", help="print checkpoint metadata")
    i.add_argument("--checkpoint", required=True, help="checkpoint file")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    if args.command == "render" and args.kind not in GRID_KINDS:
        log.error("unknown grid kind %r; valid kinds: %s", args.kind, ", ".join(GRID_KINDS))
        return EXIT_CONFIG
    if args.command == "render" and args.kind == "pose" and args.control not in POSE_CONTROLS:
        log.error("unknown pose control %r; valid controls: %s", args.control, ", ".join(POSE_CONTROLS))
        return EXIT_CONFIG
    if args.command == "eval-fid" and not args.self_test and not args.checkpoint:
        log.error("eval-fid needs --checkpoint unless --self-test is given")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
