#!/usr/bin/env python3
"""
PLDA command-line front-end
Dataset generation, training, CAM evaluation, plotting and ablation runs
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import DEVICES, TrainConfig, __version__, output_root, resolve_config
from errors import DatasetError, PLDAError
from evalviz import (SweepResult, cam_to_mask, plot_loss_curves, plot_similarity_histograms, plot_sweep_curve,
                     save_cam_overlay, write_delimited)
from synthdata import DatasetSpec, dataset_stats, generate_dataset, load_dataset, save_dataset
from trainer import (CHECKPOINT_FILE, METRICS_FILE, collect_cams, evaluate_cam_miou, load_model, read_metrics,
                     resolve_device, similarity_report, train)

try:
    from rich.console import Console
    from rich.table import Table
    RICH_AVAILABLE = True
except ImportError:
    RICH_AVAILABLE = False

MANIFEST_FILE = "manifest.json"
ABLATION_FILE = "ablation.jsonl"
SENSITIVITY_GRID = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
ABLATION_MATRICES = ("components", "uda", "assign", "alpha", "beta")

# fields handled by the shared --seed/--device flags
SHARED_FIELDS = ("seed", "device")


@dataclass
class RunManifest:
    """Everything needed to re-run a training run"""
    config: Dict
    data_spec: Dict
    seed: int
    paths: Dict[str, str]
    tool_version: str = __version__
    created_at: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"manifest not found: {path}")
        data = json.loads(path.read_text())
        missing = [k for k in ("config", "data_spec", "seed", "paths") if k not in data]
        if missing:
            raise DatasetError(f"{path} is missing {', '.join(missing)}")
        return cls(**data)


def ablation_rows(matrix: str) -> List[Tuple[str, Dict]]:
    """(row name, TrainConfig overrides) for one ablation matrix"""
    if matrix == "components":
        switches = [
            ("baseline", (False, False, False)),
            ("+uda", (True, False, False)),
            ("+cps_s", (False, True, False)),
            ("+cps_t", (False, False, True)),
            ("+uda+cps_s", (True, True, False)),
            ("full", (True, True, True)),
        ]
        return [(name, {"use_uda": u, "use_cps_s": s, "use_cps_t": t}) for name, (u, s, t) in switches]
    if matrix == "uda":
        return [("global", {"uda_mode": "global"}), ("multihead", {"uda_mode": "multihead"})]
    if matrix == "assign":
        return [("simple", {"assign_mode": "simple"}), ("mask", {"assign_mode": "mask"})]
    if matrix == "alpha":
        return [(f"alpha={a}", {"alpha": a}) for a in SENSITIVITY_GRID]
    if matrix == "beta":
        return [(f"beta={b}", {"beta_prime": b}) for b in SENSITIVITY_GRID]
    raise PLDAError(f"unknown ablation matrix '{matrix}'")


class PLDARunner:
    """Runs the subcommands and reports to the console"""

    def __init__(self, logger=None):
        self.console = Console() if RICH_AVAILABLE else None
        self.logger = logger or logging.getLogger(__name__)

    def say(self, message: str):
        if self.console:
            self.console.print(message)
        else:
            print(message)

    # ------------------------------------------------------------ data

    def _load_or_generate(self, data_dir: Optional[str], spec: DatasetSpec, out: Path):
        if data_dir:
            train_set, val_set, saved_spec = load_dataset(data_dir)
            self.say(f"📁 Loaded {len(train_set)} train / {len(val_set)} val samples from {data_dir}")
            return train_set, val_set, saved_spec or spec, Path(data_dir)
        train_set, val_set = generate_dataset(spec)
        data_dir = save_dataset(train_set, val_set, spec, out / "data")
        self.say(f"🎲 Generated {len(train_set)} train / {len(val_set)} val samples into {data_dir}")
        return train_set, val_set, spec, data_dir

    def gen_data(self, spec: DatasetSpec, out: Path) -> int:
        train_set, val_set = generate_dataset(spec)
        save_dataset(train_set, val_set, spec, out)
        self.say(f"✓ Wrote dataset to {out}")
        self.display_dataset_stats(train_set, val_set)
        return 0

    def display_dataset_stats(self, train_set, val_set):
        rows = []
        for name, samples in (("train", train_set), ("val", val_set)):
            if samples:
                stats = dataset_stats(samples)
                rows.append((name, str(stats.num_samples), " / ".join(map(str, stats.class_image_counts)),
                             f"{stats.mean_object_area:.1f}", f"{stats.mean_core_area:.1f}"))
        header = ("Split", "Images", "Images per class", "Object area", "Core area")
        self._table(header, rows)

    # ------------------------------------------------------------ train / eval

    def train(self, cfg: TrainConfig, spec: DatasetSpec, out: Path, data_dir: Optional[str] = None,
              dry_run: bool = False) -> int:
        paths = {
            "out_dir": str(out),
            "dataset": str(data_dir) if data_dir else str(out / "data"),
            "checkpoint": str(out / CHECKPOINT_FILE),
            "metrics": str(out / METRICS_FILE),
            "figures": str(out / "figures"),
        }
        manifest = RunManifest(config=cfg.to_dict(), data_spec=spec.to_dict(), seed=cfg.seed, paths=paths)
        manifest.write(out / MANIFEST_FILE)
        self.say(f"📝 Manifest written to {out / MANIFEST_FILE}")
        if dry_run:
            self.say("✓ Config valid, dry run: no training steps taken")
            return 0

        train_set, val_set, _, _ = self._load_or_generate(data_dir, spec, out)
        self.say(f"🚀 Training {cfg.epochs} epochs (uda={cfg.use_uda}, cps_s={cfg.use_cps_s}, "
                 f"cps_t={cfg.use_cps_t}, seed={cfg.seed})")
        train(train_set, val_set, cfg, out_dir=str(out), logger=self.logger, on_epoch=self.display_epoch)
        Path(paths["figures"]).mkdir(parents=True, exist_ok=True)
        self.say(f"💾 Checkpoint: {paths['checkpoint']}")
        self.say(f"📈 Metrics: {paths['metrics']}")
        return 0

    def train_from_manifest(self, manifest_path: str, out: Optional[Path]) -> int:
        manifest = RunManifest.read(manifest_path)
        cfg = TrainConfig.from_dict(manifest.config).validate()
        spec = DatasetSpec.from_dict(manifest.data_spec).validate()
        out = out or Path(manifest.paths["out_dir"])
        data_dir = manifest.paths.get("dataset")
        if data_dir and not (Path(data_dir) / "index.jsonl").exists():
            self.logger.warning(f"Dataset {data_dir} missing, regenerating from the manifest spec")
            data_dir = None
        self.say(f"🔁 Re-running from {manifest_path}")
        return self.train(cfg, spec, out, data_dir)

    def display_epoch(self, record: Dict):
        miou = "n/a" if record["val_miou"] is None else f"{100 * record['val_miou']:.2f}%"
        self.say(f"  epoch {record['epoch']:>3} | total {record['total']:.4f} | cls {record['cls']:.4f} | "
                 f"uda {record['uda']:.4f} | cps_s {record['cps_s']:.4f} | cps_t {record['cps_t']:.4f} | "
                 f"lr {record['lr']:.5f} | val mIoU {miou}")

    def eval_cam(self, checkpoint: str, data_dir: str, split: str, step: float, out: Path,
                 device: str) -> SweepResult:
        model, cfg = load_model(checkpoint, resolve_device(device, self.logger))
        train_set, val_set, _ = load_dataset(data_dir)
        samples = val_set if split == "val" else train_set
        result = evaluate_cam_miou(model, samples, step, device=next(model.parameters()).device)

        write_delimited(out / "sweep.csv", ("threshold", "miou"), result.curve)
        report = {
            "checkpoint": str(checkpoint),
            "split": split,
            "best_threshold": result.best_threshold,
            "miou": result.best_report.mean,
            "per_class": result.best_report.per_class,
        }
        (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        self.display_sweep(result)
        return result

    def display_sweep(self, result: SweepResult):
        self.say(f"🎯 Best background threshold {result.best_threshold:.2f}: "
                 f"mIoU {100 * result.best_report.mean:.2f}% over {result.best_report.valid_classes} classes")
        rows = [("background" if c == 0 else f"class {c - 1}", f"{100 * iou:.2f}")
                for c, iou in enumerate(result.best_report.per_class)]
        self._table(("Label", "IoU (%)"), rows)

    # ------------------------------------------------------------ plots

    def plot(self, run_dir: Path, data_dir: Optional[str], overlays: int, regions: str, device: str) -> int:
        figures = run_dir / "figures"
        metrics_path = run_dir / METRICS_FILE
        if metrics_path.exists():
            records = read_metrics(metrics_path)
            if any(r["val_miou"] is None for r in records):
                self.logger.warning("Some epochs have no validation mIoU, skipping loss curves")
            else:
                self.say(f"🖼️  {plot_loss_curves(records, figures / 'loss_curves.png')}")
        else:
            self.logger.warning(f"No {METRICS_FILE} in {run_dir}, skipping loss curves")

        checkpoint = run_dir / CHECKPOINT_FILE
        if not checkpoint.exists():
            self.logger.warning(f"No checkpoint in {run_dir}, skipping CAM figures")
            return 0
        if data_dir is None:
            manifest_path = run_dir / MANIFEST_FILE
            data_dir = RunManifest.read(manifest_path).paths["dataset"] if manifest_path.exists() else None
        if data_dir is None:
            self.logger.warning("No dataset given, skipping CAM figures")
            return 0

        model, cfg = load_model(checkpoint, resolve_device(device, self.logger))
        device_obj = next(model.parameters()).device
        _, val_set, _ = load_dataset(data_dir)
        result = evaluate_cam_miou(model, val_set, cfg.sweep_step, device=device_obj)
        write_delimited(figures / "sweep.csv", ("threshold", "miou"), result.curve)
        self.say(f"🖼️  {plot_sweep_curve(result, figures / 'sweep_curve.png')}")

        report = similarity_report(model, val_set, cfg, regions=regions, seed=cfg.seed, device=device_obj)
        centers = 0.5 * (report.bin_edges[:-1] + report.bin_edges[1:])
        write_delimited(figures / "similarity.csv", ("bin_center", "source", "target"),
                        zip(centers.tolist(), report.source_hist.tolist(), report.target_hist.tolist()))
        self.say(f"🖼️  {plot_similarity_histograms({regions: report}, figures / 'similarity.png')}")

        if overlays > 0:
            chosen = val_set[:overlays]
            for sample, cam in zip(chosen, collect_cams(model, chosen, device=device_obj)):
                mask = cam_to_mask(cam, result.best_threshold, sample.image_label)
                save_cam_overlay(sample.image, mask, model.num_classes,
                                 figures / "overlays" / f"{sample.sample_id:05d}.png")
            self.say(f"🖼️  {len(chosen)} overlays in {figures / 'overlays'}")
        return 0

    # ------------------------------------------------------------ ablation

    def ablate(self, matrix: str, base: TrainConfig, spec: DatasetSpec, out: Path, seeds: int,
               data_dir: Optional[str] = None) -> List[Dict]:
        train_set, val_set, _, _ = self._load_or_generate(data_dir, spec, out)
        if not val_set:
            raise DatasetError("ablation needs a validation split")

        results_path = out / ABLATION_FILE
        results: List[Dict] = []
        for row, overrides in ablation_rows(matrix):
            for k in range(seeds):
                cfg = replace(base, seed=base.seed + k, **overrides).validate()
                self.say(f"🧪 {matrix}: {row} (seed {cfg.seed})")
                run_dir = out / matrix / row.replace("+", "plus_").replace("=", "_") / f"seed{cfg.seed}"
                model, _ = train(train_set, val_set, cfg, out_dir=str(run_dir), logger=self.logger)
                sweep = evaluate_cam_miou(model, val_set, cfg.sweep_step)
                try:
                    gap = similarity_report(model, val_set, cfg, seed=cfg.seed).gap
                except DatasetError as e:
                    self.logger.warning(f"Similarity diagnostic skipped for {row}: {e}")
                    gap = None
                record = {"matrix": matrix, "row": row, "seed": cfg.seed, "miou": sweep.best_report.mean,
                          "threshold": sweep.best_threshold, "similarity_gap": gap, "config": cfg.to_dict()}
                results.append(record)
                with open(results_path, "a") as f:
                    f.write(json.dumps(record, sort_keys=True) + "\n")

        self.display_ablation(matrix, results)
        return results

    def display_ablation(self, matrix: str, results: List[Dict]):
        rows = []
        for row, _ in ablation_rows(matrix):
            runs = [r for r in results if r["row"] == row]
            gaps = [r["similarity_gap"] for r in runs if r["similarity_gap"] is not None]
            rows.append((row, str(len(runs)), f"{100 * np.mean([r['miou'] for r in runs]):.2f}",
                         f"{np.mean(gaps):.4f}" if gaps else "n/a"))
        self.say(f"\n📊 Ablation summary: {matrix}")
        self._table(("Config", "Seeds", "mIoU (%)", "Similarity gap"), rows)

    def _table(self, header: Sequence[str], rows: Sequence[Sequence[str]]):
        if RICH_AVAILABLE:
            table = Table(show_header=True, header_style="bold magenta")
            for name in header:
                table.add_column(name)
            for row in rows:
                table.add_row(*row)
            self.console.print(table)
            return
        widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
        print("  ".join(f"{h:<{w}}" for h, w in zip(header, widths)))
        print("-" * (sum(widths) + 2 * (len(widths) - 1)))
        for row in rows:
            print("  ".join(f"{v:<{w}}" for v, w in zip(row, widths)))


def setup_logging(debug: bool = False, log_file: Optional[str] = None):
    """Setup logging configuration"""
    level = logging.DEBUG if debug else logging.WARNING

    logger = logging.getLogger()
    logger.setLevel(level)
    logger.handlers.clear()

    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    # Add console handler only if debug mode
    if debug:
        console_handler = logging.StreamHandler()
        console_handler.setLevel(level)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    return logger


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_dataclass_flags(parser: argparse.ArgumentParser, cls, title: str):
    """One --kebab-case override per field; absent flags leave the attribute unset"""
    group = parser.add_argument_group(title)
    for f in fields(cls):
        if f.name in SHARED_FIELDS:
            continue
        if isinstance(f.default, bool):
            group.add_argument(_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS)
        elif isinstance(f.default, tuple):
            group.add_argument(_flag(f.name), dest=f.name, default=argparse.SUPPRESS, metavar="N,N,...")
        else:
            group.add_argument(_flag(f.name), dest=f.name, type=type(f.default), default=argparse.SUPPRESS)


def overrides_from(args: argparse.Namespace, cls, shared: bool = True) -> Dict:
    """Explicitly given flags for the fields of cls; shared=False leaves --seed/--device out"""
    values = {f.name: getattr(args, f.name) for f in fields(cls)
              if f.name not in SHARED_FIELDS and hasattr(args, f.name)}
    if not shared:
        return values
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if cls is TrainConfig and getattr(args, "device", None) is not None:
        values["device"] = args.device
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="Random seed (dataset seed for gen-data, training seed otherwise)")
    common.add_argument("--out", help="Output directory (default: $PLDA_OUTPUT_ROOT/<command> or ./runs/<command>)")
    common.add_argument("--device", choices=DEVICES, help="Compute device")
    common.add_argument("--debug", action="store_true", help="Enable debug output to console")
    common.add_argument("--log-file", help="Save debug logs to file")

    parser = argparse.ArgumentParser(
        prog="plda",
        description="Pixel-level domain adaptation for weakly supervised segmentation on synthetic data")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    gen = sub.add_parser("gen-data", parents=[common], help="Generate a synthetic dataset")
    gen.add_argument("--config", help="INI config file ([data] section is used)")
    add_dataclass_flags(gen, DatasetSpec, "dataset")

    tr = sub.add_parser("train", parents=[common], help="Train a model")
    tr.add_argument("--config", help="INI config file with [train] and [data] sections")
    tr.add_argument("--data", help="Existing dataset directory (generated from [data] otherwise)")
    tr.add_argument("--dry-run", action="store_true", help="Validate config and write the manifest only")
    tr.add_argument("--from-manifest", help="Re-run from a manifest.json")
    add_dataclass_flags(tr, TrainConfig, "training")
    add_dataclass_flags(tr, DatasetSpec, "dataset (when generating)")

    ev = sub.add_parser("eval-cam", parents=[common], help="Background-threshold sweep of a checkpoint")
    ev.add_argument("--checkpoint", required=True, help="checkpoint.npz")
    ev.add_argument("--data", required=True, help="Dataset directory")
    ev.add_argument("--split", choices=("val", "train"), default="val")
    ev.add_argument("--step", type=float, default=0.05, help="Threshold grid step")

    pl = sub.add_parser("plot", parents=[common], help="Figures for a training run")
    pl.add_argument("--run", required=True, help="Run directory with metrics.jsonl and checkpoint.npz")
    pl.add_argument("--data", help="Dataset directory (default: the one in the run manifest)")
    pl.add_argument("--overlays", type=int, default=8, help="Number of validation CAM overlays")
    pl.add_argument("--regions", choices=("cam", "parts"), default="cam",
                    help="Source/target regions for the similarity histograms")

    ab = sub.add_parser("ablate", parents=[common], help="Run an ablation matrix")
    ab.add_argument("--matrix", choices=ABLATION_MATRICES, default="components")
    ab.add_argument("--seeds", type=int, default=3, help="Seeds per row")
    ab.add_argument("--config", help="INI config file for the shared base settings")
    ab.add_argument("--data", help="Existing dataset directory")
    add_dataclass_flags(ab, TrainConfig, "training")
    add_dataclass_flags(ab, DatasetSpec, "dataset (when generating)")
    return parser


def _run(args: argparse.Namespace, runner: PLDARunner) -> int:
    out = Path(args.out) if args.out else output_root() / args.command

    if args.command == "gen-data":
        data_overrides = overrides_from(args, DatasetSpec)
        _, spec = resolve_config(args.config, {}, data_overrides)
        return runner.gen_data(spec, out)

    if args.command == "train":
        if args.from_manifest:
            return runner.train_from_manifest(args.from_manifest, Path(args.out) if args.out else None)
        cfg, spec = resolve_config(args.config, overrides_from(args, TrainConfig),
                                   overrides_from(args, DatasetSpec, shared=False))
        return runner.train(cfg, spec, out, args.data, dry_run=args.dry_run)

    if args.command == "eval-cam":
        runner.eval_cam(args.checkpoint, args.data, args.split, args.step, out, args.device or "cpu")
        return 0

    if args.command == "plot":
        return runner.plot(Path(args.run), args.data, args.overlays, args.regions, args.device or "cpu")

    if args.command == "ablate":
        if args.seeds < 1:
            raise PLDAError("--seeds must be >= 1")
        cfg, spec = resolve_config(args.config, overrides_from(args, TrainConfig),
                                   overrides_from(args, DatasetSpec, shared=False))
        runner.ablate(args.matrix, cfg, spec, out, args.seeds, args.data)
        return 0

    raise PLDAError(f"unknown command {args.command}")


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv and run one subcommand; returns the exit status"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    logger = setup_logging(args.debug, args.log_file)
    runner = PLDARunner(logger)
    try:
        (Path(args.out) if args.out else output_root() / args.command).mkdir(parents=True, exist_ok=True)
        return _run(args, runner)
    except KeyboardInterrupt:
        print("\n👋 Stopped by user")
        return 130
    except Exception as e:
        logger.error(f"Fatal error: {type(e).__name__}: {e}")
        print(f"❌ Error: {e}")
        if args.debug:
            import traceback
            traceback.print_exc()
        return 1


def main():
    """Main function"""
    return dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
