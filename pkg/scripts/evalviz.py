#!/usr/bin/env python3
"""
CAM evaluation (mIoU, background-threshold sweep), the pixel-to-centroid
similarity diagnostic, and figure/CSV emission
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

import matplotlib as mpl
mpl.use("Agg")
import matplotlib.pyplot as plt

from assign import mask_assign
from errors import ConfigError, DatasetError, ShapeError
from netcore import CamMap
from synthdata import PART_BODY, PART_CORE

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, torch.Tensor]

DEFAULT_BINS = 20
DEFAULT_SAMPLES_PER_CLASS = 64

FIGURE_PARAMS = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 120,
}
mpl.rcParams.update(FIGURE_PARAMS)


@dataclass
class IoUReport:
    per_class: List[float]  # index 0 = background; zero-union classes hold 0.0
    mean: float
    valid_classes: int
    valid: List[bool] = field(default_factory=list)


@dataclass
class SweepResult:
    best_threshold: float
    best_report: IoUReport
    curve: List[Tuple[float, float]]  # (threshold, mean IoU)


@dataclass
class RegionLabels:
    """Per-pixel class for the source and target domains of one image, -1 where absent"""
    source_class: np.ndarray  # int [h, w]
    target_class: np.ndarray  # int [h, w]


@dataclass
class SimilarityReport:
    bin_edges: np.ndarray
    source_hist: np.ndarray
    target_hist: np.ndarray
    source_mean: float
    target_mean: float
    samples_per_class: Dict[int, int]

    @property
    def gap(self) -> float:
        return abs(self.source_mean - self.target_mean)


def _to_numpy(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


# ---------------------------------------------------------------- metrics

def confusion_matrix(pred: ArrayLike, gt: ArrayLike, num_labels: int) -> np.ndarray:
    pred, gt = _to_numpy(pred).astype(np.int64), _to_numpy(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    valid = (gt >= 0) & (gt < num_labels)
    return np.bincount(num_labels * gt[valid] + pred[valid], minlength=num_labels ** 2).reshape(num_labels, num_labels)


def miou(preds: Union[ArrayLike, Sequence[ArrayLike]], gts: Union[ArrayLike, Sequence[ArrayLike]],
         num_classes: int) -> IoUReport:
    """IoU over labels 0..num_classes (0 = background) accumulated over the whole set"""
    if isinstance(preds, (np.ndarray, torch.Tensor)) and _to_numpy(preds).ndim == 2:
        preds, gts = [preds], [gts]
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions for {len(gts)} ground truths")

    num_labels = num_classes + 1
    conf = np.zeros((num_labels, num_labels), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        conf += confusion_matrix(pred, gt, num_labels)

    intersection = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    valid = union > 0
    per_class = np.where(valid, intersection / np.maximum(union, 1), 0.0)
    mean = float(per_class[valid].mean()) if valid.any() else 0.0
    return IoUReport(per_class=per_class.tolist(), mean=mean, valid_classes=int(valid.sum()),
                     valid=valid.tolist())


def cam_to_mask(cam: ArrayLike, bg_threshold: float, label: ArrayLike) -> np.ndarray:
    """argmax over [bg_threshold, present-class maps]; background wins ties"""
    if not 0.0 < bg_threshold < 1.0:
        raise ConfigError("bg_threshold", f"must lie in (0, 1), got {bg_threshold}")
    cam = _to_numpy(cam).astype(np.float64)
    present = _to_numpy(label).astype(bool)
    if cam.shape[0] != present.shape[0]:
        raise ShapeError(f"cam has {cam.shape[0]} classes, label {present.shape[0]}")
    scores = np.where(present[:, None, None], cam, -np.inf)
    stacked = np.concatenate([np.full((1,) + cam.shape[1:], bg_threshold), scores], axis=0)
    return stacked.argmax(axis=0)


def default_grid(step: float = 0.05) -> List[float]:
    count = int(round(1.0 / step))
    return [round(i * step, 6) for i in range(1, count) if 0.0 < i * step < 1.0]


def sweep_background_threshold(cams: Sequence[ArrayLike], gts: Sequence[ArrayLike], labels: Sequence[ArrayLike],
                               grid: Sequence[float], num_classes: Optional[int] = None) -> SweepResult:
    """Evaluate every threshold; best by mean IoU, ties to the smaller threshold"""
    thresholds = sorted(set(float(t) for t in grid))
    if not thresholds:
        raise ConfigError("grid", "background threshold grid is empty")
    if not cams:
        raise DatasetError("no CAMs to evaluate")
    if num_classes is None:
        num_classes = _to_numpy(cams[0]).shape[0]

    curve = []
    best: Optional[Tuple[float, IoUReport]] = None
    for tau in thresholds:
        preds = [cam_to_mask(cam, tau, label) for cam, label in zip(cams, labels)]
        report = miou(preds, gts, num_classes)
        curve.append((tau, report.mean))
        if best is None or report.mean > best[1].mean:
            best = (tau, report)
        logger.debug(f"bg threshold {tau:.3f}: mIoU {report.mean:.4f}")
    return SweepResult(best_threshold=best[0], best_report=best[1], curve=curve)


# ---------------------------------------------------------------- similarity diagnostic

def centroid_similarity(features: np.ndarray, classes: np.ndarray,
                        counted: Optional[np.ndarray] = None) -> np.ndarray:
    """Cosine similarity of each feature row to the mean feature of its class

    ``counted`` marks the rows that enter the class means; repeated rows of the
    same pixel are scored but left out of the mean.
    """
    features = np.asarray(features, dtype=np.float64)
    classes = np.asarray(classes)
    counted = np.ones(features.shape[0], dtype=bool) if counted is None else np.asarray(counted, dtype=bool)
    scores = np.zeros(features.shape[0])
    for cls in np.unique(classes):
        rows = classes == cls
        members = rows & counted
        centroid = features[members].mean(axis=0)
        norms = np.linalg.norm(features[rows], axis=1) * np.linalg.norm(centroid)
        scores[rows] = (features[rows] @ centroid) / np.maximum(norms, 1e-12)
    return scores


def normalize_per_class(scores: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """Min-max per class; a class whose scores are all equal maps to 1"""
    out = np.ones_like(scores, dtype=np.float64)
    for cls in np.unique(classes):
        rows = classes == cls
        low, high = scores[rows].min(), scores[rows].max()
        if high > low:
            out[rows] = (scores[rows] - low) / (high - low)
    return out


def cam_regions(cam: CamMap, masked_cam: CamMap, alpha: float, label: torch.Tensor) -> RegionLabels:
    """Source/target regions from the same alpha rule the trainer uses"""
    h, w = cam.normalized.shape[-2:]
    assignment = mask_assign(cam, masked_cam, alpha, label)
    source = np.full(h * w, -1, dtype=np.int64)
    target = np.full(h * w, -1, dtype=np.int64)
    source[_to_numpy(assignment.source_idx)] = _to_numpy(assignment.source_class)
    target[_to_numpy(assignment.target_idx)] = _to_numpy(assignment.target_class)
    return RegionLabels(source.reshape(h, w), target.reshape(h, w))


def part_regions(gt_mask: np.ndarray, part_mask: np.ndarray, stride: int) -> RegionLabels:
    """Ground-truth regions sampled at feature resolution: core -> source, body -> target"""
    offset = stride // 2
    gt = gt_mask[offset::stride, offset::stride].astype(np.int64) - 1
    parts = part_mask[offset::stride, offset::stride]
    return RegionLabels(np.where(parts == PART_CORE, gt, -1), np.where(parts == PART_BODY, gt, -1))


def similarity_histogram(features: Sequence[ArrayLike], regions: Sequence[RegionLabels],
                         samples_per_class: int = DEFAULT_SAMPLES_PER_CLASS, bins: int = DEFAULT_BINS,
                         seed: int = 0) -> SimilarityReport:
    """Normalized pixel-to-class-centroid similarity histograms for source and target pixels"""
    rows, classes, domains, counted = [], [], [], []
    for feat, region in zip(features, regions):
        feat = _to_numpy(feat)
        flat = feat.reshape(feat.shape[0], -1).T
        for domain, cls_map in ((0, region.source_class), (1, region.target_class)):
            cls_flat = cls_map.reshape(-1)
            picked = cls_flat >= 0
            rows.append(flat[picked])
            classes.append(cls_flat[picked])
            domains.append(np.full(int(picked.sum()), domain))
            if domain == 0:
                counted.append(np.ones(int(picked.sum()), dtype=bool))
            else:
                # a pixel in both sets with the same class enters its centroid once
                repeat = region.source_class.reshape(-1) == cls_flat
                counted.append(~repeat[picked])
    if not rows:
        raise DatasetError("no images given to the similarity diagnostic")

    rows = np.concatenate(rows)
    classes = np.concatenate(classes)
    domains = np.concatenate(domains)
    counted = np.concatenate(counted)
    scores = normalize_per_class(centroid_similarity(rows, classes, counted), classes)

    rng = np.random.default_rng(seed)
    source_vals, target_vals, counts = [], [], {}
    for cls in np.unique(classes):
        src = np.flatnonzero((classes == cls) & (domains == 0))
        tgt = np.flatnonzero((classes == cls) & (domains == 1))
        n = min(samples_per_class, src.size, tgt.size)
        if n == 0:
            logger.warning(f"Class {cls} has {src.size} source / {tgt.size} target pixels, skipping")
            continue
        source_vals.append(scores[rng.choice(src, size=n, replace=False)])
        target_vals.append(scores[rng.choice(tgt, size=n, replace=False)])
        counts[int(cls)] = int(n)
    if not counts:
        raise DatasetError("no class has both source and target pixels")

    source_vals = np.concatenate(source_vals)
    target_vals = np.concatenate(target_vals)
    edges = np.linspace(0.0, 1.0, bins + 1)
    source_hist = np.histogram(source_vals, bins=edges)[0] / source_vals.size
    target_hist = np.histogram(target_vals, bins=edges)[0] / target_vals.size
    return SimilarityReport(bin_edges=edges, source_hist=source_hist, target_hist=target_hist,
                            source_mean=float(source_vals.mean()), target_mean=float(target_vals.mean()),
                            samples_per_class=counts)


# ---------------------------------------------------------------- emission

def write_delimited(path: Union[str, Path], header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.debug(f"Wrote figure {path}")
    return path


def plot_sweep_curve(result: SweepResult, path: Union[str, Path], title: str = "CAM mIoU vs background threshold"):
    fig, ax = plt.subplots()
    taus, means = zip(*result.curve)
    ax.plot(taus, [100 * m for m in means], marker="o", markersize=3)
    ax.axvline(result.best_threshold, color="gray", linestyle="--", linewidth=0.8)
    ax.set_xlabel("background threshold")
    ax.set_ylabel("mIoU (%)")
    ax.set_title(title)
    return _save(fig, path)


def plot_loss_curves(records: Sequence[Dict], path: Union[str, Path]):
    fig, (ax_loss, ax_miou) = plt.subplots(1, 2, figsize=(8.0, 3.2))
    epochs = [r["epoch"] for r in records]
    for key in ("cls", "uda", "cps_s", "cps_t", "total"):
        ax_loss.plot(epochs, [r[key] for r in records], label=key)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_miou.plot(epochs, [100 * r["val_miou"] for r in records], marker="o", markersize=3)
    ax_miou.set_xlabel("epoch")
    ax_miou.set_ylabel("val CAM mIoU (%)")
    return _save(fig, path)


def plot_similarity_histograms(reports: Dict[str, SimilarityReport], path: Union[str, Path]):
    fig, axes = plt.subplots(1, len(reports), figsize=(4.0 * len(reports), 3.2), squeeze=False)
    for ax, (name, report) in zip(axes[0], reports.items()):
        centers = 0.5 * (report.bin_edges[:-1] + report.bin_edges[1:])
        width = report.bin_edges[1] - report.bin_edges[0]
        ax.bar(centers, report.source_hist, width=width, alpha=0.6, label="source")
        ax.bar(centers, report.target_hist, width=width, alpha=0.6, label="target")
        ax.set_xlabel("normalized similarity")
        ax.set_ylabel("fraction of pixels")
        ax.set_title(f"{name} (gap {report.gap:.3f})")
        ax.legend()
    return _save(fig, path)


def save_cam_overlay(image: ArrayLike, mask: ArrayLike, num_classes: int, path: Union[str, Path],
                     opacity: float = 0.5) -> Path:
    """Blend a class-index mask over an image; background pixels are left untouched"""
    image = _to_numpy(image).transpose(1, 2, 0).astype(np.float64)
    mask = _to_numpy(mask).astype(np.int64)
    palette = np.array([mpl.colormaps["tab10"](i % 10)[:3] for i in range(num_classes)])
    overlay = image.copy()
    fg = mask > 0
    overlay[fg] = (1 - opacity) * image[fg] + opacity * palette[mask[fg] - 1]

    fig, axes = plt.subplots(1, 2, figsize=(4.0, 2.0))
    axes[0].imshow(np.clip(image, 0, 1), interpolation="nearest")
    axes[1].imshow(np.clip(overlay, 0, 1), interpolation="nearest")
    for ax in axes:
        ax.axis("off")
    return _save(fig, path)
