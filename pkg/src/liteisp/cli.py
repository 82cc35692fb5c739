"""Command line entry point: ``liteisp <command> [options]``.

Exit status is 0 on success, 1 for configuration or runtime errors (with a
one-line diagnostic naming the offending key where there is one) and 2 for
usage errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import backbone
from .config import ConfigError, describe_keys, load_config, parse_overrides
from .dataio import (
    LAYOUTS,
    DatasetManifest,
    ManifestError,
    SyntheticDomainSpec,
    generate_synthetic,
    load_manifest,
    read_raw,
    split_manifest,
    write_rgb,
)
from .evaluation import METRICS, evaluate
from .features import build_extractors, fetch_weights
from .raw_pipeline import PATTERNS, pack
from .trainer import TrainingDiverged, run_stage

log = logging.getLogger("liteisp")


def _write_run_record(out: Path, args: argparse.Namespace):
    """Frozen record of the resolved arguments (the output dir is where it lives)."""
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"command = {args.command}\n"]
    for k, v in sorted(vars(args).items()):
        if k in ("command", "func", "out") or v is None:
            continue
        if isinstance(v, list):
            v = " ".join(str(x) for x in v)
        lines.append(f"{k} = {v}\n")
    (out / "run.txt").write_text("".join(lines))


def _training_config(args, stage: str | None):
    overrides = parse_overrides(args.set)
    if stage is not None:
        if overrides.get("stage", stage) != stage:
            raise ConfigError("stage", f"conflicts with --stage {stage}")
        overrides["stage"] = stage
    return load_config(args.config, overrides)


def cmd_prepare_data(args) -> int:
    m = load_manifest(
        args.root,
        layout=args.layout,
        pairing_mode=args.pairing,
        raw_dir=args.raw_dir,
        rgb_dir=args.rgb_dir,
        exclude=args.exclude,
        bayer_pattern=args.pattern,
        black_level=args.black_level,
        white_level=args.white_level,
    )
    out = Path(args.out)
    _write_run_record(out, args)
    if args.val or args.test:
        parts = dict(zip(("train", "val", "test"), split_manifest(m, args.val, args.test, args.seed)))
    else:
        parts = {"all": m}
    for name, part in parts.items():
        part.save(out / f"{name}.txt")
        print(f"{name}: {len(part)} patches -> {out / (name + '.txt')}")
    return 0


def cmd_synth_data(args) -> int:
    matrix = tuple(float(v) for v in args.matrix.split(","))
    if len(matrix) != 9:
        raise ConfigError("matrix", f"expected 9 comma-separated values, got {len(matrix)}")
    spec = SyntheticDomainSpec(
        color_matrix=tuple(matrix[i : i + 3] for i in (0, 3, 6)),
        gamma=args.gamma,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    out = Path(args.out)
    _write_run_record(out, args)
    m = generate_synthetic(spec, args.n, args.size, out)
    print(f"wrote {len(m)} synthetic pairs to {out}")
    return 0


def _stage_run(args, stage: str | None) -> int:
    cfg = _training_config(args, stage)
    out = Path(args.out)
    _write_run_record(out, args)
    train = DatasetManifest.load(args.data)
    val = DatasetManifest.load(args.val) if args.val else None
    targets = None
    if cfg.stage == "unpaired":
        if not args.targets:
            raise ConfigError("targets", "unpaired stage needs --targets (RGB pool index)")
        targets = DatasetManifest.load(args.targets)
    chosen, metrics = run_stage(cfg, train, out, val=val, targets=targets, resume=args.resume)
    print(f"checkpoint: {chosen}")
    print(f"metrics: {metrics}")
    return 0


def cmd_pretrain(args) -> int:
    return _stage_run(args, "pretrain")


def cmd_train(args) -> int:
    return _stage_run(args, args.stage)


def cmd_eval(args) -> int:
    out = Path(args.out)
    _write_run_record(out, args)
    model = backbone.load(args.checkpoint)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    ext = build_extractors(args.extractors, args.cache) if "lpips" in metrics else None
    manifest = DatasetManifest.load(args.data)
    report = evaluate(
        model, manifest, metrics, ext, out, model_tag=Path(args.checkpoint).stem,
        dataset_tag=Path(args.data).parent.name, split_tag=Path(args.data).stem, demosaic_algo=args.demosaic,
    )
    print(report.to_markdown(), end="")
    return 0


def cmd_infer(args) -> int:
    src = Path(args.input)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() == ".png") if src.is_dir() else [src]
    if not files:
        raise FileNotFoundError(f"no RAW PNG files found in {src}")
    out = Path(args.out)
    _write_run_record(out, args)
    model = backbone.load(args.checkpoint)
    for path in files:
        raw = read_raw(path, args.pattern, args.black_level, args.white_level)
        x = torch.from_numpy(pack(raw)[None])
        rgb = model.infer(x)[0].numpy()
        write_rgb(out / f"{path.stem}.png", rgb)
        print(f"{path.name} -> {out / (path.stem + '.png')} {rgb.shape[0]}x{rgb.shape[1]}")
    return 0


def cmd_fetch_weights(args) -> int:
    root = fetch_weights(args.cache)
    print(f"weights cached in {root}")
    return 0


def cmd_config_keys(args) -> int:
    print(describe_keys())
    return 0


def _add_train_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--data", required=True, help="training manifest index")
    p.add_argument("--val", help="paired validation manifest index")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoints/last.pt")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="liteisp", description="Compact learned RAW-to-RGB pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="scan a dataset directory into manifest index files")
    p.add_argument("--root", required=True)
    p.add_argument("--layout", choices=sorted(LAYOUTS), default="zrr")
    p.add_argument("--pairing", choices=("paired", "unpaired"), default="paired")
    p.add_argument("--raw-dir")
    p.add_argument("--rgb-dir")
    p.add_argument("--exclude", help="file listing patch stems to drop, one per line")
    p.add_argument("--pattern", choices=PATTERNS)
    p.add_argument("--black-level", type=float)
    p.add_argument("--white-level", type=float)
    p.add_argument("--val", type=int, default=0, help="validation patches to split off")
    p.add_argument("--test", type=int, default=0, help="test patches to split off")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("synth-data", help="generate a synthetic RAW/RGB dataset with a known transform")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=64, help="patch side in pixels (even)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--matrix", default="1,0,0,0,1,0,0,0,1", help="row-major 3x3 camera-to-RGB matrix")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sigma on the normalized mosaic")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="demosaic pretraining stage")
    _add_train_args(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="paired or unpaired training stage")
    p.add_argument("--stage", choices=("paired_no_adv", "paired_full", "unpaired"))
    p.add_argument("--targets", help="target-domain RGB pool index (unpaired stage)")
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a paired manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", default=",".join(METRICS))
    p.add_argument("--extractors", choices=("stub", "pretrained"), default="stub")
    p.add_argument("--cache", help="pretrained weight cache directory")
    p.add_argument("--demosaic", default="bilinear")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="convert RAW PNG mosaics to RGB PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="RAW PNG file or directory")
    p.add_argument("--pattern", choices=PATTERNS, default="RGGB")
    p.add_argument("--black-level", type=float, default=0)
    p.add_argument("--white-level", type=float, default=1020)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("fetch-weights", help="download pretrained extractor weights")
    p.add_argument("--cache", help="cache directory (default: $LITEISP_CACHE or ~/.cache/liteisp)")
    p.set_defaults(func=cmd_fetch_weights)

    p = sub.add_parser("config-keys", help="list configuration keys with defaults")
    p.set_defaults(func=cmd_config_keys)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"liteisp: config error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"liteisp: {exc} (last good weights: {exc.checkpoint})", file=sys.stderr)
        return 1
    except (ManifestError, FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        print(f"liteisp: error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
