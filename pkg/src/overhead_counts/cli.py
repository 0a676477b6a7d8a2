#!/usr/bin/env python3
"""Command-line interface for overhead-counts.

Subcommands:
    synth    Generate a synthetic dataset (JSONL + tiles + true rates)
    stats    Summarize a dataset's object counts
    train    Split, train one or more families, report held-out fit
    eval     Evaluate a checkpoint on a dataset
    map      Render a baseline or model heatmap for one category
    topk     List the tiles with the highest expected count
    cluster  k-means over predicted rates, rendered as a cluster map

Every command writes its outputs into one directory together with a
``manifest.json`` describing the run. On failure, partial outputs are removed.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .constants import (
    DEFAULT_BANDWIDTH_DEG,
    DEFAULT_CLUSTERS,
    DEFAULT_RESTARTS,
    DEFAULT_TEST_FRACTION,
    DEFAULT_TILE_SPAN_DEG,
    FAMILIES,
    FAMILY_DISPLAY,
    CategoryLabels,
)
from .counts import (
    GeoSample,
    SyntheticConfig,
    dataset_stats,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .errors import ConfigError, OverheadCountsError
from .geomap import (
    GridSpec,
    baseline_map,
    cluster_map,
    cluster_params,
    model_heatmap,
    render_raster,
    tiles_to_grid,
    top_k_tiles,
    write_sidecar,
)
from .net import predict
from .tiles import GeoBounds
from .trainer import (
    EvalReport,
    TrainConfig,
    check_family,
    evaluate,
    infer_input_shape,
    intercept_report,
    load_checkpoint,
    sample_inputs,
    save_checkpoint,
    train,
    write_loss_csv,
)

logger = logging.getLogger("overhead_counts.cli")

DEFAULT_OUTPUT_ROOT = "runs"
DEFAULT_GRID_SIZE = 16


# =============================================================================
# Run Bookkeeping
# =============================================================================

@dataclass
class RunManifest:
    """What a command did: resolved config, seed, inputs, outputs and duration."""

    command: str
    config: dict
    seed: int | None
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    duration_s: float = 0.0
    version: str = __version__

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "duration_s": self.duration_s,
            "version": self.version,
        }


def write_json_atomic(path: Path, payload: dict) -> Path:
    """Write JSON via a temp file and rename, so readers never see a partial file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


class RunOutputs:
    """Tracks files a command writes so a failed run can remove them."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.paths: list[Path] = []
        self._existed = out_dir.exists()

    def add(self, *paths: Path) -> None:
        self.paths.extend(Path(p) for p in paths)

    def json(self, name: str, payload: dict) -> Path:
        path = write_json_atomic(self.out_dir / name, payload)
        self.add(path)
        return path

    def cleanup(self) -> None:
        for path in reversed(self.paths):
            path.unlink(missing_ok=True)
        # Remove directories this run created, deepest first, if now empty
        dirs = {p.parent for p in self.paths} | {self.out_dir}
        dirs = sorted(dirs, key=lambda d: len(d.parts), reverse=True)
        for d in dirs:
            if d == self.out_dir and self._existed:
                continue
            try:
                d.rmdir()
            except OSError:
                pass
        logger.debug(f"Removed {len(self.paths)} partial output(s) under {self.out_dir}")


# =============================================================================
# Helpers
# =============================================================================

def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e.msg} (line {e.lineno})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return data


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(args.out) if args.out else Path(args.output_root) / args.command


def _families(values: list[str] | None, fallback: str) -> list[str]:
    if not values:
        return [FAMILIES.normalize(fallback)]
    if any(v.lower() == "all" for v in values):
        return list(FAMILY_DISPLAY)
    families = []
    for v in values:
        name = FAMILIES.normalize(v)
        if name not in families:
            families.append(name)
    return families


def _dataset_bounds(samples: list[GeoSample]) -> GeoBounds:
    """Extent of the samples, padded by half a tile."""
    half = DEFAULT_TILE_SPAN_DEG / 2.0
    lats = [s.lat for s in samples]
    lons = [s.lon for s in samples]
    return GeoBounds(
        lat_min=max(min(lats) - half, -90.0),
        lon_min=max(min(lons) - half, -180.0),
        lat_max=min(max(lats) + half, 90.0),
        lon_max=min(max(lons) + half, 180.0),
    )


def _grid(args: argparse.Namespace, samples: list[GeoSample]) -> GridSpec:
    return GridSpec(_dataset_bounds(samples), args.rows, args.cols)


def _print_table(rows: list[tuple[str, EvalReport]]) -> None:
    width = max(len(name) for name, _ in rows) + 2
    print(f"{'Model':<{width}} {'Mean Log-Likelihood':>20} {'Samples':>8}")
    for name, report in rows:
        print(f"{name:<{width}} {report.mean_log_likelihood:>20.4f} {report.sample_count:>8}")


def _write_true_rates(samples: list[GeoSample], path: Path) -> Path:
    width = len(samples[0].true_rates)
    lines = ["id," + ",".join(f"r{i}" for i in range(width))]
    for s in samples:
        lines.append(s.id + "," + ",".join(repr(r) for r in s.true_rates))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# =============================================================================
# Commands
# =============================================================================

def cmd_synth(args: argparse.Namespace, outputs: RunOutputs) -> RunManifest:
    data = _load_config_file(args.config)
    for key, value in (
        ("seed", args.seed),
        ("category_count", args.categories),
        ("n_samples", args.samples),
        ("layout", args.layout),
        ("tile_size", args.tile_size),
        ("channels", args.channels),
    ):
        if value is not None:
            data[key] = value
    config = SyntheticConfig.from_dict(data)
    config.validate()

    samples = generate_synthetic(config)
    outputs.add(*save_dataset(samples, outputs.out_dir / "dataset.jsonl"))
    outputs.add(_write_true_rates(samples, outputs.out_dir / "true_rates.csv"))
    print(f"Wrote {len(samples)} samples to {outputs.out_dir / 'dataset.jsonl'}")
    return RunManifest("synth", config.to_dict(), config.seed)


def cmd_stats(args: argparse.Namespace, outputs: RunOutputs) -> RunManifest:
    samples = load_dataset(args.dataset, category_count=args.categories)
    stats = dataset_stats(samples)
    outputs.json("stats.json", stats.to_dict())

    print(f"Samples:                     {stats.sample_count}")
    print(f"With at least one object:    {stats.nonzero_fraction:.1%}")
    mean = f"{stats.mean_nonzero_total:.3f}" if stats.mean_nonzero_total is not None else "n/a"
    print(f"Mean objects (non-empty):    {mean}")
    print(f"Max objects in one sample:   {stats.max_total}")
    if stats.most_frequent_category is not None:
        labels = CategoryLabels.from_option(len(stats.category_frequency), args.labels)
        print(f"Most frequent category:      {labels.label(stats.most_frequent_category)}")
    return RunManifest("stats", {"categories": args.categories, "labels": args.labels}, None,
                       inputs=[str(args.dataset)])


def cmd_train(args: argparse.Namespace, outputs: RunOutputs) -> RunManifest:
    data = _load_config_file(args.config)
    for key, value in (("seed", args.seed), ("epochs", args.epochs), ("batch_size", args.batch_size)):
        if value is not None:
            data[key] = value
    if args.lr is not None:
        data.setdefault("nadam", {})["learning_rate"] = args.lr
    if args.input_mode is not None:
        data.setdefault("model", {})["input_mode"] = args.input_mode
    base = TrainConfig.from_dict(data)

    samples = load_dataset(args.dataset, category_count=args.categories)
    if not samples:
        raise ConfigError(f"Dataset {args.dataset} is empty")
    train_set, test_set = split_dataset(samples, args.test_fraction, base.seed)
    base.model.category_count = samples[0].histogram.category_count
    base.model.input_shape = infer_input_shape(samples, base.model.input_mode)
    base.validate()
    print(f"Split {len(samples)} samples: {len(train_set)} train, {len(test_set)} test")

    rows: list[tuple[str, EvalReport]] = []
    configs = {}
    for family in _families(args.family, base.family):
        config = TrainConfig.from_dict({**base.to_dict(), "family": family})
        family_dir = outputs.out_dir / family
        ckpt_path = family_dir / "checkpoint.npz"
        outputs.add(ckpt_path)
        result = train(config, train_set, checkpoint_path=ckpt_path)
        outputs.add(write_loss_csv(result.history, family_dir / "loss.csv"))
        save_checkpoint(
            ckpt_path, result.weights, result.optimizer, config,
            epoch=result.epoch, rng_state=result.rng_state, history=result.history,
        )
        report = evaluate(result.weights, config, test_set)
        outputs.json(f"{family}/eval.json", report.to_dict())
        rows.append((FAMILY_DISPLAY[family], report))
        configs[family] = config.to_dict()

    baseline = intercept_report(train_set, test_set)
    rows.append(("Intercept (Poisson)", baseline))
    outputs.json("report.json", {
        "test_fraction": args.test_fraction,
        "rows": [{"model": name, **report.to_dict()} for name, report in rows],
    })
    print()
    _print_table(rows)
    return RunManifest(
        "train",
        {"families": configs, "test_fraction": args.test_fraction},
        base.seed,
        inputs=[str(args.dataset)],
    )


def cmd_eval(args: argparse.Namespace, outputs: RunOutputs) -> RunManifest:
    ckpt = load_checkpoint(args.checkpoint)
    check_family(ckpt, args.family)
    samples = load_dataset(args.dataset, category_count=ckpt.config.model.category_count)
    if args.held_out:
        _, samples = split_dataset(samples, args.test_fraction, ckpt.config.seed)
    report = evaluate(ckpt.weights, ckpt.config, samples)
    outputs.json("eval.json", report.to_dict())
    _print_table([(FAMILY_DISPLAY[ckpt.config.family], report)])
    return RunManifest(
        "eval",
        {"family": ckpt.config.family, "held_out": args.held_out, "test_fraction": args.test_fraction},
        ckpt.config.seed,
        inputs=[str(args.checkpoint), str(args.dataset)],
    )


def cmd_map(args: argparse.Namespace, outputs: RunOutputs) -> RunManifest:
    if bool(args.baseline) == bool(args.checkpoint):
        raise ConfigError("map needs exactly one of --baseline or --checkpoint")

    if args.baseline:
        samples = load_dataset(args.dataset, category_count=args.categories)
        labels = CategoryLabels.from_option(samples[0].histogram.category_count, args.labels)
        category = labels.resolve(args.category)
        raster = baseline_map(samples, category, _grid(args, samples), args.bandwidth)
        source = {"baseline": True, "bandwidth": args.bandwidth}
        inputs = [str(args.dataset)]
    else:
        ckpt = load_checkpoint(args.checkpoint)
        model = ckpt.config.model
        samples = load_dataset(args.dataset, category_count=model.category_count)
        labels = CategoryLabels.from_option(model.category_count, args.labels)
        category = labels.resolve(args.category)
        grid = _grid(args, samples)
        cells = tiles_to_grid(samples, grid)
        tiles = [[s.tile if s is not None else None for s in row] for row in cells]
        raster = model_heatmap(ckpt.weights, model, tiles, category, grid)
        source = {"checkpoint": str(args.checkpoint), "family": model.family}
        inputs = [str(args.checkpoint), str(args.dataset)]

    raster.label = labels.label(category)
    image = outputs.out_dir / "map.ppm"
    image.write_bytes(render_raster(raster, "green", cell_pixels=args.cell_pixels))
    outputs.add(image)
    outputs.add(write_sidecar(raster, outputs.out_dir / "map.json", extra=source))
    print(f"Wrote {image} ({raster.grid.rows}x{raster.grid.cols} cells, category '{raster.label}')")
    return RunManifest(
        "map",
        {**source, "category": category, "rows": args.rows, "cols": args.cols},
        None,
        inputs=inputs,
    )


def cmd_topk(args: argparse.Namespace, outputs: RunOutputs) -> RunManifest:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.config.model
    samples = load_dataset(args.dataset, category_count=model.category_count)
    labels = CategoryLabels.from_option(model.category_count, args.labels)
    category = labels.resolve(args.category)
    ranked = top_k_tiles(ckpt.weights, model, samples, category, args.k)

    outputs.json("topk.json", {
        "category": category,
        "label": labels.label(category),
        "ranking": [{"id": tile_id, "expected_count": value} for tile_id, value in ranked],
    })
    print(f"Top {args.k} tiles for '{labels.label(category)}':")
    for rank, (tile_id, value) in enumerate(ranked, start=1):
        print(f"  {rank:>3}. {tile_id:<20} {value:.4f}")
    return RunManifest(
        "topk",
        {"category": category, "k": args.k},
        None,
        inputs=[str(args.checkpoint), str(args.dataset)],
    )


def cmd_cluster(args: argparse.Namespace, outputs: RunOutputs) -> RunManifest:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.config.model
    samples = load_dataset(args.dataset, category_count=model.category_count)
    grid = _grid(args, samples)
    cells = tiles_to_grid(samples, grid)
    placed = [((r, c), s) for r, row in enumerate(cells) for c, s in enumerate(row) if s is not None]
    seed = args.seed if args.seed is not None else 0

    params = predict(ckpt.weights, model, sample_inputs([s for _, s in placed], model))
    clusters = cluster_params(params.mean, args.k, seed=seed, restarts=args.restarts, log_space=args.log_space)
    raster = cluster_map(grid, [cell for cell, _ in placed], clusters)

    image = outputs.out_dir / "clusters.ppm"
    image.write_bytes(render_raster(raster, "categorical", cell_pixels=args.cell_pixels))
    outputs.add(image)
    outputs.json("clusters.json", {
        **clusters.to_dict(),
        "cells": [[r, c] for (r, c), _ in placed],
        "ids": [s.id for _, s in placed],
    })
    outputs.add(write_sidecar(raster, outputs.out_dir / "clusters.map.json"))
    print(f"Clustered {len(placed)} cells into k={args.k} groups (inertia {clusters.inertia:.4g})")
    print(f"Wrote {image}")
    return RunManifest(
        "cluster",
        {"k": args.k, "restarts": args.restarts, "log_space": args.log_space, "rows": args.rows, "cols": args.cols},
        seed,
        inputs=[str(args.checkpoint), str(args.dataset)],
    )


COMMANDS = {
    "synth": cmd_synth,
    "stats": cmd_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "map": cmd_map,
    "topk": cmd_topk,
    "cluster": cmd_cluster,
}


# =============================================================================
# Parser
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="overhead-counts",
        description="Predict ground-level object counts from overhead tiles",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Environment Variables:
  OVERHEAD_COUNTS_OUTPUT_ROOT  Default output root; each command writes to <root>/<command> (default: runs)
  OVERHEAD_COUNTS_DEBUG        Enable debug logging (true/false)

Configuration precedence:
  built-in defaults < --config JSON file < environment variables < flags

Examples:
  overhead-counts synth --samples 2000 --categories 5 --layout gradient --out runs/data
  overhead-counts stats runs/data/dataset.jsonl
  overhead-counts train runs/data/dataset.jsonl --family all --lr 0.01 --epochs 20
  overhead-counts eval runs/train/poisson/checkpoint.npz runs/data/dataset.jsonl --held-out
  overhead-counts map runs/data/dataset.jsonl --baseline --category 1 --bandwidth 0.01
  overhead-counts map runs/data/dataset.jsonl --checkpoint runs/train/poisson/checkpoint.npz --category 1
  overhead-counts topk runs/train/poisson/checkpoint.npz runs/data/dataset.jsonl --category 1 --k 5
  overhead-counts cluster runs/train/poisson/checkpoint.npz runs/data/dataset.jsonl --k 10
        """,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--out",
        help="Output directory (default: $OVERHEAD_COUNTS_OUTPUT_ROOT/<command>)",
    )
    common.add_argument(
        "--output-root",
        default=os.environ.get("OVERHEAD_COUNTS_OUTPUT_ROOT", DEFAULT_OUTPUT_ROOT),
        help="Root for default output directories (default: runs)",
    )
    common.add_argument(
        "--debug",
        action="store_true",
        default=os.environ.get("OVERHEAD_COUNTS_DEBUG", "").lower() == "true",
        help="Enable debug logging",
    )
    common.add_argument("--seed", type=int, default=None, help="Random seed (default: from config, else 0)")
    common.add_argument("--categories", type=int, default=None, help="Number of object categories C (synth: 91; other commands: taken from the dataset)")
    common.add_argument("--labels", default=None, help="Category labels: 'coco' or a file with one name per line")

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--rows", type=int, default=DEFAULT_GRID_SIZE, help="Grid rows (default: 16)")
    grid.add_argument("--cols", type=int, default=DEFAULT_GRID_SIZE, help="Grid columns (default: 16)")
    grid.add_argument("--cell-pixels", type=int, default=1, help="Pixels per grid cell in the image (default: 1)")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic dataset")
    p.add_argument("--config", help="SyntheticConfig JSON file")
    p.add_argument("--samples", type=int, default=None, help="Number of samples (random/gradient layouts)")
    p.add_argument("--layout", choices=["random", "gradient", "grid"], default=None)
    p.add_argument("--tile-size", type=int, default=None)
    p.add_argument("--channels", type=int, choices=[1, 3], default=None)

    p = sub.add_parser("stats", parents=[common], help="Summarize a dataset's counts")
    p.add_argument("dataset")

    p = sub.add_parser("train", parents=[common], help="Train and evaluate count models")
    p.add_argument("dataset")
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument(
        "--family",
        action="append",
        help=f"Distribution family ({FAMILIES.options_str}, or all); repeatable",
    )
    p.add_argument(
        "--test-fraction",
        type=float,
        default=DEFAULT_TEST_FRACTION,
        help=f"Held-out fraction (default: {DEFAULT_TEST_FRACTION})",
    )
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="Nadam learning rate (default: 2e-5)")
    p.add_argument("--input-mode", choices=["tile", "features"], default=None)

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--family", help="Expected family; a mismatch with the checkpoint is an error")
    p.add_argument("--held-out", action="store_true", help="Evaluate only the test split used in training")
    p.add_argument("--test-fraction", type=float, default=DEFAULT_TEST_FRACTION)

    p = sub.add_parser("map", parents=[common, grid], help="Render a category heatmap")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", help="Model checkpoint for a predicted heatmap")
    p.add_argument("--baseline", action="store_true", help="Kernel-weighted average of observed counts")
    p.add_argument("--category", required=True, help="Category name or index")
    p.add_argument(
        "--bandwidth",
        type=float,
        default=DEFAULT_BANDWIDTH_DEG,
        help=f"Baseline kernel bandwidth in degrees (default: {DEFAULT_BANDWIDTH_DEG})",
    )

    p = sub.add_parser("topk", parents=[common], help="Tiles with the highest expected count")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--category", required=True, help="Category name or index")
    p.add_argument("--k", type=int, default=DEFAULT_CLUSTERS, help="Number of tiles (default: 10)")

    p = sub.add_parser("cluster", parents=[common, grid], help="Cluster predicted rates over a grid")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--k", type=int, default=DEFAULT_CLUSTERS, help="Number of clusters (default: 10)")
    p.add_argument("--restarts", type=int, default=DEFAULT_RESTARTS, help="k-means restarts (default: 8)")
    p.add_argument("--log-space", action="store_true", help="Cluster log-rates instead of rates")

    return parser


def configure_logging(debug: bool) -> None:
    if debug:
        logging.basicConfig(
            level=logging.DEBUG,
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S',
        )
    else:
        logging.basicConfig(
            level=logging.WARNING,
            format='%(asctime)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S',
        )
        logging.getLogger("overhead_counts").setLevel(logging.INFO)


def main(argv: list[str] | None = None) -> int:
    """Main entry point. Returns 0 on success, 1 on failure, 2 on bad configuration."""
    args = build_parser().parse_args(argv)
    configure_logging(args.debug)

    out_dir = _out_dir(args)
    outputs = RunOutputs(out_dir)
    started = time.monotonic()
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = COMMANDS[args.command](args, outputs)
        manifest.duration_s = round(time.monotonic() - started, 3)
        manifest.outputs = [str(p) for p in outputs.paths]
        manifest_path = write_json_atomic(out_dir / "manifest.json", manifest.to_dict())
        logger.debug(f"Wrote {manifest_path}")
        return 0
    except KeyboardInterrupt:
        outputs.cleanup()
        print("\nCancelled.")
        return 1
    except ConfigError as e:
        outputs.cleanup()
        print(f"ERROR: {e}")
        return 2
    except (OverheadCountsError, OSError) as e:
        outputs.cleanup()
        print(f"ERROR: {e}")
        if args.debug:
            import traceback
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
