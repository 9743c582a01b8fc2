"""Command-line entry point: ``lulc-adapt <command> [flags]``.

Commands
    prepare    raster (+ CLC labels) -> tiled dataset on disk
    synth      synthetic source/target datasets
    train      ``baseline`` or ``bdl`` training run
    translate  push a dataset through a saved generator
    eval       score a saved segmenter on a labeled dataset
    report     merge saved evaluations into one table

Every command accepts ``--config``, ``--seed``, ``--out`` and ``--preset``.
What ``--preset`` selects depends on the command.  Configs are JSON files
mirroring :class:`~lulc_adapt.trainer.TrainConfig`.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (DataError, DomainDataset, normalize_illumination, quantize_to_8bit, read_dataset,
                   read_label_raster, read_raster, remap_clc_labels, select_bands, tile_raster,
                   upsample_labels, write_dataset)
from .evaluation import EvalReport, render_report
from .losses import WEIGHT_PRESETS, LossWeights
from .models import CheckpointError, ResnetGenerator, SegmentationNet, load_model
from .schema import CLC_RASTER_INDEX, LULC_SCHEMA, SATELLITES
from .synthetic import SHIFT_PRESETS, generate_synthetic_domains
from .trainer import (ConfigError, DivergenceError, TrainConfig, evaluate_segmenter, run_bdl, synthetic_config,
                      train_segmenter_baseline, translate_dataset)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


# --------------------------------------------------------------------------
# helpers


def _load_config(path: str | None, preset: str | None, seed: int | None, iterations: int | None) -> TrainConfig:
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        config = TrainConfig.from_dict(raw)
    elif preset == "synthetic":
        config = synthetic_config()
    else:
        config = TrainConfig()
    changes = {}
    if preset is not None:
        if preset not in WEIGHT_PRESETS:
            raise ConfigError(f"unknown loss preset {preset!r}; choose from {sorted(WEIGHT_PRESETS)}")
        changes.update(weights=LossWeights.preset(preset), preset_name=preset)
    if seed is not None:
        changes["seed"] = seed
    if iterations is not None:
        changes.update(total_iterations=iterations, baseline_iterations=None,
                       translation_iterations=None, adapted_iterations=None)
    return dataclasses.replace(config, **changes)


def _read(path: str | None, what: str) -> DomainDataset | None:
    if path is None:
        return None
    if not Path(path, "manifest.json").exists():
        raise DataError(f"{what} dataset {path} has no manifest.json")
    return read_dataset(path)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1))


def _report_from_dict(d: dict) -> EvalReport:
    per_class = [d["per_class_iou"][n] for n in LULC_SCHEMA.names]
    return EvalReport(per_class, d["miou"], d.get("pixel_counts", []), d.get("metadata", {}))


# --------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    preset = SATELLITES[args.preset or "sentinel2"]
    band_ids = args.bands.split(",") if args.bands else [b.band_id for b in preset.bands]
    by_id = {b.band_id: b for b in preset.bands}
    unknown = [b for b in band_ids if b not in by_id]
    if unknown:
        raise ConfigError(f"bands {unknown} are not part of the {preset.name} preset {list(by_id)}")
    if args.unlabeled:
        args.labels = None
    elif args.labels is None:
        raise ConfigError("give --labels or pass --unlabeled for an image-only dataset")
    for p in [*args.raster, *([args.labels] if args.labels else [])]:
        if not Path(p).exists():
            raise DataError(f"input {p} not found")

    bit_depth = args.bit_depth or preset.bit_depth
    scene = read_raster(args.raster, [by_id[b] for b in band_ids], bit_depth=bit_depth,
                        origin_id=Path(args.raster[0]).stem)
    scene = quantize_to_8bit(scene, (args.clip_low, args.clip_high))
    scene = select_bands(scene, list(preset.rgb))
    if args.reference_stats:
        scene = normalize_illumination(scene, json.loads(Path(args.reference_stats).read_text()))

    label_plane = None
    if args.labels is not None:
        grid = read_label_raster(args.labels)
        if args.label_encoding == "index":
            grid = np.vectorize(lambda v: CLC_RASTER_INDEX.get(int(v), 0), otypes=[np.int64])(grid)
        codes, n_unknown = remap_clc_labels(grid)
        h, w = scene.shape
        if codes.shape != (h, w):
            fy, fx = h / codes.shape[0], w / codes.shape[1]
            if abs(fy - fx) > 1e-9 or fy < 1:
                raise DataError(f"label grid {codes.shape} is not aligned with raster grid {(h, w)}")
            codes = upsample_labels(codes, fy)
            if codes.shape != (h, w):
                raise DataError(f"label grid {codes.shape} is not aligned with raster grid {(h, w)}")
        if n_unknown:
            print(f"{n_unknown} label cells had unlisted CLC identifiers and were set to Unknown")
        label_plane = codes

    tile_size = args.tile_size or preset.tile_size
    tiles = tile_raster(scene, label_plane, tile_size, prefix=args.prefix)
    ds = DomainDataset(args.name or preset.name, tiles, tile_size, args.split, label_plane is not None)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} tiles of {tile_size}px to {args.out}")
    if ds.labeled:
        hist = ds.class_histogram()
        for name, n in zip(LULC_SCHEMA.names, hist):
            print(f"  {name:<12}{n:>12d}")
    return EXIT_OK


def cmd_synth(args) -> int:
    shift = args.preset or "satellite"
    if shift not in SHIFT_PRESETS:
        raise ConfigError(f"unknown shift preset {shift!r}; choose from {sorted(SHIFT_PRESETS)}")
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    src, tgt = generate_synthetic_domains(seed, args.n_tiles, args.tile_size, shift)
    write_dataset(src, out / "source")
    write_dataset(tgt, out / "target")
    print(f"wrote {len(src)} source and {len(tgt)} target tiles to {out}")
    if args.eval_tiles:
        _, held_out = generate_synthetic_domains(seed + 1000, args.eval_tiles, args.tile_size, shift, split="test")
        write_dataset(held_out, out / "target_eval")
        print(f"wrote {len(held_out)} held-out target tiles to {out / 'target_eval'}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args.config, args.preset, args.seed, args.iterations)
    source = _read(args.source, "source")
    target = _read(args.target, "target")
    target_eval = _read(args.target_eval, "evaluation")
    if args.mode == "bdl" and target is None:
        raise ConfigError("bdl training needs --target")
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "run.json", {
        "mode": args.mode, "preset": config.preset_name, "seed": config.seed,
        "weights": config.weights.to_dict(), "config_hash": config.config_hash(),
        "source": args.source, "target": args.target, "target_eval": args.target_eval})

    eval_set = target_eval if target_eval is not None else (target if target is not None and target.labeled else None)
    if args.mode == "baseline":
        (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=1))
        res = train_segmenter_baseline(config, source, run_dir=run_dir)
        reports = [] if eval_set is None else [evaluate_segmenter(res["M"], eval_set, name="baseline")]
        final = res.checkpoint
    else:
        out = run_bdl(config, source, target, target_eval, run_dir=run_dir)
        reports = out.reports
        final = out.checkpoints[out.schedule[-1]]
    _write_json(run_dir / "final.json", {"segmenter": str(final / "M.pt")})
    if reports:
        _write_json(run_dir / "eval_target.json", [r.to_dict() for r in reports])
        print(render_report(reports))
    print(f"final segmenter: {final / 'M.pt'}")
    return EXIT_OK


def cmd_translate(args) -> int:
    F, _ = load_model(args.checkpoint)
    if not isinstance(F, ResnetGenerator):
        raise CheckpointError(f"{args.checkpoint} does not hold an image generator")
    ds = _read(args.dataset, "input")
    out = translate_dataset(F, ds, name=f"{ds.name}_translated")
    write_dataset(out, args.out)
    print(f"wrote {len(out)} translated tiles to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    M, _ = load_model(args.checkpoint)
    if not isinstance(M, SegmentationNet):
        raise CheckpointError(f"{args.checkpoint} does not hold a segmenter")
    ds = _read(args.dataset, "evaluation")
    report = evaluate_segmenter(M, ds, name=args.name or ds.name, checkpoint=str(args.checkpoint))
    out = Path(args.out)
    _write_json(out / f"eval_{ds.name}.json", report.to_dict())
    (out / f"eval_{ds.name}.csv").write_text(render_report([report], "csv"))
    print(render_report([report]))
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for p in args.inputs:
        try:
            blob = json.loads(Path(p).read_text())
        except FileNotFoundError:
            raise DataError(f"evaluation file {p} not found") from None
        for d in blob if isinstance(blob, list) else [blob]:
            reports.append(_report_from_dict(d))
    text = render_report(reports, args.format)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + ("" if text.endswith("\n") else "\n"))
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="JSON training configuration file")
    g.add_argument("--seed", type=int, help="random seed (overrides the config)")
    g.add_argument("--out", help="output directory (file for report)")
    g.add_argument("--preset", help="named preset whose meaning depends on the command")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(prog="lulc-adapt", description="Domain adaptation for land-cover maps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="tile a satellite scene into a dataset")
    p.add_argument("--raster", nargs="+", required=True, help="one multi-band GeoTIFF or one file per band")
    p.add_argument("--bands", help="comma-separated band ids in file order (default: the preset's bands)")
    p.add_argument("--labels", help="CLC label raster")
    p.add_argument("--label-encoding", choices=["codes", "index"], default="codes",
                   help="label values are CLC codes (111..523) or raster indices (1..44, 48)")
    p.add_argument("--unlabeled", action="store_true", help="build an image-only dataset")
    p.add_argument("--tile-size", type=int, help="tile edge in pixels (default: preset)")
    p.add_argument("--bit-depth", type=int, help="sample bit depth (default: preset)")
    p.add_argument("--clip-low", type=float, default=0.02, help="lower stretch percentile as a fraction")
    p.add_argument("--clip-high", type=float, default=0.98, help="upper stretch percentile as a fraction")
    p.add_argument("--reference-stats", help="JSON list of [mean, std] per RGB band for illumination matching")
    p.add_argument("--name", help="dataset name")
    p.add_argument("--prefix", default="", help="tile id prefix")
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_prepare, needs_out=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic source/target datasets")
    p.add_argument("--n-tiles", type=int, default=200)
    p.add_argument("--tile-size", type=int, default=32)
    p.add_argument("--eval-tiles", type=int, default=0, help="also write a held-out labeled target set")
    p.set_defaults(func=cmd_synth, needs_out=True)

    p = sub.add_parser("train", parents=[common], help="train a baseline or bidirectional model")
    p.add_argument("mode", choices=["baseline", "bdl"])
    p.add_argument("--source", required=True, help="labeled source dataset directory")
    p.add_argument("--target", help="target dataset directory (labels unused for training)")
    p.add_argument("--target-eval", help="labeled target dataset for evaluation")
    p.add_argument("--iterations", type=int, help="iterations per phase (overrides the config)")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("translate", parents=[common], help="translate a dataset with a saved generator")
    p.add_argument("--checkpoint", required=True, help="generator file (F.pt or F_inv.pt)")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_translate, needs_out=True)

    p = sub.add_parser("eval", parents=[common], help="evaluate a saved segmenter")
    p.add_argument("--checkpoint", required=True, help="segmenter file (M.pt)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--name", help="row label in the report")
    p.set_defaults(func=cmd_eval, needs_out=True)

    p = sub.add_parser("report", parents=[common], help="render saved evaluations as one table")
    p.add_argument("inputs", nargs="+", help="eval_*.json files")
    p.add_argument("--format", choices=["table", "csv", "json"], default="table")
    p.set_defaults(func=cmd_report, needs_out=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.needs_out and not args.out:
        parser.error(f"{args.command} requires --out")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
