"""Command-line entry point.

Subcommands cover the full pipeline: ``synth`` generates a synthetic
clean/cluttered dataset, ``train`` optimizes a scene, ``render`` exports
any layer of a trained view, ``eval`` computes metrics, and the two
``ablate-*`` commands sweep the clutter ratio and the transient-set seed
count.  ``--out`` targets ending in ``.npz`` receive exact float arrays;
``.png`` targets receive 8-bit previews.  Exit codes: 0 success, 2 usage
error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointData, load_checkpoint, save_checkpoint
from .compositing import distractor_mask, render_decomposed, render_static_only
from .config import TrainConfig
from .data import (
    Dataset,
    MANIFEST_NAME,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    save_dataset,
    write_png,
)
from .errors import DataError, NumericError, UsageError
from .training import evaluate, train

LAYERS = ("static", "distractor", "composite", "mask")
PROTOCOLS = ("static", "left-right")


class _Tracked(argparse.Action):
    """Store the value and remember that the user supplied it."""

    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        if not hasattr(namespace, "_provided"):
            namespace._provided = set()
        namespace._provided.add(self.dest)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _add_config_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("training configuration overrides")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            group.add_argument(flag, dest=f.name, type=_parse_bool, default=f.default,
                               action=_Tracked, metavar="BOOL",
                               help=f"(default: {str(f.default).lower()})")
        elif f.type in ("int", int):
            group.add_argument(flag, dest=f.name, type=int, default=f.default,
                               action=_Tracked, metavar="N",
                               help=f"(default: {f.default})")
        else:
            group.add_argument(flag, dest=f.name, type=float, default=f.default,
                               action=_Tracked, metavar="X",
                               help=f"(default: {f.default})")


def _resolve_config(args) -> TrainConfig:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    field_names = {f.name for f in dataclasses.fields(TrainConfig)}
    for name in args._provided & field_names:
        setattr(config, name, getattr(args, name))
    config.validate()
    return config


def _parse_spec_file(path) -> SyntheticSpec:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"spec file not found: {path}")
    fields = {f.name: f for f in dataclasses.fields(SyntheticSpec)}
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, val = line.partition("=")
        key = key.strip()
        if not eq or key not in fields:
            raise UsageError(f"spec line {lineno}: unknown or malformed entry")
        ftype = fields[key].type
        values[key] = int(val.strip()) if ftype in ("int", int) else float(val.strip())
    spec = SyntheticSpec(**values)
    spec.validate()
    return spec


def _parse_list(text: str, cast) -> list:
    out = []
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            continue
        try:
            val = cast(piece)
        except ValueError as exc:
            raise UsageError(f"bad list entry {piece!r}") from exc
        if val not in out:  # deduplicate, keep order
            out.append(val)
    if not out:
        raise UsageError("empty list argument")
    return out


def cmd_synth(args) -> int:
    spec = _parse_spec_file(args.spec) if args.spec else SyntheticSpec()
    dataset, _ = generate_synthetic(spec)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _resolve_config(args)
    dataset = load_dataset(args.data)
    result = train(dataset, config, out_dir=args.out)
    final = result.metrics[-1]
    print(f"trained {config.iterations} steps; final loss {final['total']:.6f}; "
          f"checkpoint at {Path(args.out) / 'checkpoint.ckpt'}")
    return 0


def cmd_render(args) -> int:
    data = load_checkpoint(args.checkpoint)
    if not 0 <= args.view < len(data.cameras):
        raise UsageError(f"view {args.view} out of range (checkpoint has "
                         f"{len(data.cameras)} cameras)")
    cam = data.cameras[args.view]
    model = data.model
    comp = render_decomposed(model, args.view, cam,
                             training=args.view in model.distractor_sets)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.layer == "composite":
        arrays = {"color": comp.color, "static_alpha": comp.static_alpha,
                  "distractor_alpha": comp.distractor_alpha}
        preview = comp.color
    elif args.layer == "static":
        arrays = {"color": comp.static_color, "alpha": comp.static_alpha}
        preview = comp.static_color
    elif args.layer == "distractor":
        arrays = {"color": comp.distractor_color, "alpha": comp.distractor_alpha}
        preview = np.concatenate(
            [comp.distractor_color, comp.distractor_alpha[:, :, None]], axis=2)
    else:  # mask
        mask = distractor_mask(comp)
        arrays = {"mask": mask}
        preview = mask.astype(np.float64)

    if out.suffix == ".npz":
        np.savez(out, **arrays)
    else:
        write_png(out, np.clip(preview, 0.0, 1.0))
    print(f"wrote {args.layer} layer of view {args.view} to {out}")
    return 0


def cmd_eval(args) -> int:
    data = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    rows = evaluate(data.model, dataset, protocol=args.protocol,
                    psnr_cap=data.config.psnr_cap)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "psnr", "ssim"])
        for row in rows:
            writer.writerow([row["name"], f"{row['psnr']:.6f}", f"{row['ssim']:.6f}"])
    print(f"wrote metrics for {len(rows) - 1} frames to {out} "
          f"(mean psnr {rows[-1]['psnr']:.2f} dB)")
    return 0


def _dataset_digest(data_dir) -> str:
    root = Path(data_dir)
    digest = hashlib.sha256()
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"missing manifest: {manifest}")
    digest.update(manifest.read_bytes())
    for path in sorted(root.glob("*.png")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def _mixed_ratio_dataset(dataset: Dataset, ratio: float, seed: int) -> Dataset:
    """Swap the cluttered image for the clean one in a (1-ratio) fraction."""
    n = len(dataset)
    rng = np.random.default_rng(seed)
    keep_cluttered = set(rng.permutation(n)[: int(np.ceil(ratio * n))].tolist())
    frames = []
    for i, frame in enumerate(dataset.frames):
        if frame.clean is None:
            raise DataError(f"frame {frame.name} has no clean variant; "
                            "the ratio sweep needs clean/cluttered pairs")
        f = dataclasses.replace(frame)
        if i not in keep_cluttered:
            f.image = frame.clean
            f.sprite_mask = (np.zeros(frame.clean.shape[:2], dtype=bool)
                             if frame.sprite_mask is not None else None)
        frames.append(f)
    return Dataset(frames=frames, init_points=dataset.init_points,
                   init_colors=dataset.init_colors, bbox=dataset.bbox,
                   quantized=dataset.quantized)


def _train_cached(dataset: Dataset, config: TrainConfig, cache_dir, tag: str):
    """Train, reusing a cached checkpoint when the inputs are unchanged."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = hashlib.sha256((tag + "\n" + config.to_text()).encode()).hexdigest()[:24]
    path = cache_dir / f"{key}.ckpt"
    if path.exists():
        return load_checkpoint(path).model
    result = train(dataset, config)
    save_checkpoint(path, result.checkpoint)
    return result.model


def _sweep_common(args):
    config = _resolve_config(args)
    dataset = load_dataset(args.data)
    digest = _dataset_digest(args.data)
    cache = args.cache if args.cache else str(Path(args.out).with_suffix("")) + ".cache"
    return config, dataset, digest, cache


def cmd_ablate_ratio(args) -> int:
    config, dataset, digest, cache = _sweep_common(args)
    ratios = _parse_list(args.ratios, float)
    rows = []
    for ratio in ratios:
        if not 0.0 <= ratio <= 1.0:
            raise UsageError(f"ratio {ratio} outside [0, 1]")
        mixed = _mixed_ratio_dataset(dataset, ratio, config.seed)

        ours = dataclasses.replace(config, distractors_enabled=True)
        model = _train_cached(mixed, ours, cache, f"{digest}|ratio={ratio}|ours")
        psnr_ours = evaluate(model, mixed, protocol="static",
                             psnr_cap=config.psnr_cap)[-1]["psnr"]

        base = dataclasses.replace(config, distractors_enabled=False,
                                   lambda_static_alpha=0.0,
                                   lambda_distractor_alpha=0.0)
        model = _train_cached(mixed, base, cache, f"{digest}|ratio={ratio}|baseline")
        psnr_base = evaluate(model, mixed, protocol="static",
                             psnr_cap=config.psnr_cap)[-1]["psnr"]
        rows.append((ratio, psnr_ours, psnr_base))
        print(f"ratio {ratio:.2f}: ours {psnr_ours:.2f} dB, baseline {psnr_base:.2f} dB")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ratio", "psnr_desplat", "psnr_baseline"])
        for ratio, ours_db, base_db in rows:
            writer.writerow([ratio, f"{ours_db:.6f}", f"{base_db:.6f}"])
    return 0


def cmd_ablate_init(args) -> int:
    config, dataset, digest, cache = _sweep_common(args)
    counts = _parse_list(args.counts, int)
    rows = []
    for count in counts:
        if count < 1:
            raise UsageError(f"count {count} must be >= 1")
        cfg = dataclasses.replace(config, distractors_enabled=True, k_distractors=count)
        model = _train_cached(dataset, cfg, cache, f"{digest}|k={count}")
        value = evaluate(model, dataset, protocol="static",
                         psnr_cap=config.psnr_cap)[-1]["psnr"]
        rows.append((count, value))
        print(f"k={count}: {value:.2f} dB")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "psnr"])
        for count, value in rows:
            writer.writerow([count, f"{value:.6f}"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cleansplat",
        description="Distractor-robust Gaussian splatting with explicit "
                    "static/transient scene decomposition.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic clean/cluttered dataset")
    p.add_argument("--spec", help="synthetic spec file (key = value lines)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a decomposed scene model")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="training config file (key = value lines)")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one layer of a trained view")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--layer", choices=LAYERS, required=True)
    p.add_argument("--out", required=True, help="output file (.png preview or .npz arrays)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=PROTOCOLS, default="static")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-ratio",
                       help="sweep the cluttered-view ratio against the baseline")
    p.add_argument("--data", required=True, help="dataset with clean/cluttered pairs")
    p.add_argument("--config", help="training config file")
    p.add_argument("--ratios", required=True, help="comma-separated ratios, e.g. 0,0.5,1")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--cache", help="checkpoint cache directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate_ratio)

    p = sub.add_parser("ablate-init", help="sweep the per-view transient seed count")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="training config file")
    p.add_argument("--counts", required=True, help="comma-separated counts, e.g. 100,1000")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--cache", help="checkpoint cache directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate_init)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "_provided"):
        args._provided = set()
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
