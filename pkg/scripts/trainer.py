#!/usr/bin/env python3
"""
Training loop: classification + intra-image adversarial alignment + confident
pseudo-supervision, one SGD optimizer, poly learning rate
"""

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from assign import mask_assign, mask_image, simple_assign
from checkpoints import load_checkpoint, save_checkpoint
from config import TrainConfig
from cps import dynamic_threshold, cps_loss, pixel_log_probs, refine_cam
from domadv import DomainAssignment, DomainClassifier, domain_logits, uda_loss_global, uda_loss_multihead
from errors import ConfigError, DatasetError, NonFiniteLossError
from evalviz import (RegionLabels, SimilarityReport, SweepResult, cam_regions, default_grid, part_regions,
                     similarity_histogram, sweep_background_threshold)
from grl import GrlConfig, grl_apply
from netcore import Backbone, CamHead, CamMap, classification_loss, compute_cam, extract_features, upsample_cam
from synthdata import SynthSample

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.npz"
EVAL_BATCH_SIZE = 32


class PLDAModel(nn.Module):
    """Backbone theta, CAM head w and the domain classifier phi"""

    def __init__(self, num_classes: int, feature_dim: int = 64):
        super().__init__()
        self.backbone = Backbone(feature_dim=feature_dim)
        self.head = CamHead(num_classes, feature_dim)
        self.domain = DomainClassifier(feature_dim=feature_dim, num_classes=num_classes)

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    def forward(self, images: torch.Tensor, labels: torch.Tensor) -> Tuple[torch.Tensor, CamMap]:
        z = extract_features(images, self.backbone)
        return z, compute_cam(z, self.head, labels)

    @contextmanager
    def frozen_norm_stats(self):
        """Normalization running buffers are restored on exit; batch statistics still apply inside"""
        saved = {name: buf.clone() for name, buf in self.named_buffers()}
        try:
            yield self
        finally:
            with torch.no_grad():
                for name, buf in self.named_buffers():
                    buf.copy_(saved[name])


@dataclass
class LossBundle:
    cls: torch.Tensor
    uda: torch.Tensor
    cps_s: torch.Tensor
    cps_t: torch.Tensor
    num_source: int = 0
    num_target: int = 0

    @property
    def total(self) -> torch.Tensor:
        return self.cls + self.uda + self.cps_s + self.cps_t

    def detach(self) -> "LossBundle":
        return LossBundle(self.cls.detach(), self.uda.detach(), self.cps_s.detach(), self.cps_t.detach(),
                          self.num_source, self.num_target)

    def as_floats(self) -> Dict[str, float]:
        return {
            "cls": float(self.cls),
            "uda": float(self.uda),
            "cps_s": float(self.cps_s),
            "cps_t": float(self.cps_t),
            "total": float(self.total),
        }


def poly_lr(t: int, total: int, base: float, gamma: float) -> float:
    """base * (1 - t/T)^gamma"""
    if total <= 0:
        raise ConfigError("total_steps", f"must be > 0, got {total}")
    if t < 0 or t > total:
        raise ConfigError("step", f"must lie in [0, {total}], got {t}")
    if gamma <= 0:
        raise ConfigError("gamma", f"must be > 0, got {gamma}")
    return base * (1.0 - t / total) ** gamma


def build_model(num_classes: int, cfg: TrainConfig) -> PLDAModel:
    torch.manual_seed(cfg.seed)
    return PLDAModel(num_classes, cfg.feature_dim)


def build_optimizer(model: PLDAModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def resolve_device(name: str, logger: Optional[logging.Logger] = None) -> torch.device:
    logger = logger or logging.getLogger(__name__)
    if name == "cpu":
        return torch.device("cpu")
    if torch.cuda.is_available():
        return torch.device("cuda")
    if getattr(torch.backends, "mps", None) is not None and torch.backends.mps.is_available():
        return torch.device("mps")
    logger.warning("No accelerator found, falling back to CPU")
    return torch.device("cpu")


def _image_cam(cam: CamMap, b: int) -> CamMap:
    return CamMap(raw=cam.raw[b], normalized=cam.normalized[b],
                  logits=None if cam.logits is None else cam.logits[b])


def _flat_pixels(z: torch.Tensor) -> torch.Tensor:
    """[B, D, h, w] -> [B*h*w, D], row b*h*w + y*w + x"""
    return z.movedim(1, -1).reshape(-1, z.shape[1])


def _check_finite(bundle: LossBundle, step: Optional[int]):
    for component in ("cls", "uda", "cps_s", "cps_t"):
        value = getattr(bundle, component)
        if not bool(torch.isfinite(value)):
            raise NonFiniteLossError(component, float(value), step)


def assign_batch(cam: CamMap, masked_cam: CamMap, labels: torch.Tensor, cfg: TrainConfig) -> DomainAssignment:
    """Per-image assignments merged into batch-level flat pixel indices"""
    h, w = cam.normalized.shape[-2:]
    per_image = []
    for b in range(labels.shape[0]):
        if cfg.assign_mode == "simple":
            per_image.append(simple_assign(_image_cam(cam, b), cfg.alpha, cfg.simple_alpha_lo, labels[b]))
        else:
            per_image.append(mask_assign(_image_cam(cam, b), _image_cam(masked_cam, b), cfg.alpha, labels[b]))
    return DomainAssignment.concat(per_image, h * w)


def _uda_term(model: PLDAModel, z: torch.Tensor, z_target: torch.Tensor, assignment: DomainAssignment,
              cfg: TrainConfig, progress: float) -> torch.Tensor:
    source_rows = _flat_pixels(z)
    if z_target is z:
        rows, shifted = source_rows, assignment
    else:
        # target rows follow the source rows
        n = source_rows.shape[0]
        rows = torch.cat([source_rows, _flat_pixels(z_target)])
        shifted = DomainAssignment(assignment.source_idx, assignment.target_idx + n,
                                   assignment.source_class, assignment.target_class)

    reversed_rows = grl_apply(rows, GrlConfig(cfg.grl_lambda, cfg.grl_warmup), progress)
    if cfg.uda_mode == "global":
        if shifted.is_empty():
            return model.domain.global_logits(reversed_rows[:0]).sum() * 0.0
        logits = model.domain.global_logits(reversed_rows[shifted.pixel_idx])
        return uda_loss_global(logits, shifted.domain_label)
    if shifted.is_empty():
        return domain_logits(reversed_rows[:0], model.domain).sum() * 0.0
    picked = shifted.pixel_idx
    logits = domain_logits(reversed_rows[picked], model.domain)
    # re-index the assignment onto the picked rows
    local = torch.arange(picked.numel(), device=picked.device)
    compact = DomainAssignment(local[:shifted.num_source], local[shifted.num_source:],
                               shifted.source_class, shifted.target_class)
    return uda_loss_multihead(logits, compact)


def compute_losses(model: PLDAModel, images: torch.Tensor, labels: torch.Tensor, cfg: TrainConfig,
                   progress: float = 1.0, step: Optional[int] = None) -> LossBundle:
    """Forward both passes, assign domains, refine pseudo labels and build every loss term"""
    if images.shape[0] == 0:
        raise DatasetError("empty batch")
    dtype = next(model.parameters()).dtype
    images = images.to(dtype)
    labels = labels.to(dtype)

    z, cam = model(images, labels)
    cls = classification_loss(cam, labels)
    zero = cls.new_zeros(())
    bundle = LossBundle(cls=cls, uda=zero, cps_s=zero, cps_t=zero)

    if cfg.use_uda or cfg.use_cps_s or cfg.use_cps_t:
        masked_images = mask_image(images, cam.detach(), cfg.alpha, labels)
        with model.frozen_norm_stats():
            if cfg.target_features == "masked":
                z_masked, masked_cam = model(masked_images, labels)
            else:
                with torch.no_grad():
                    z_masked, masked_cam = model(masked_images, labels)
        assignment = assign_batch(cam.detach(), masked_cam.detach(), labels, cfg)
        bundle.num_source, bundle.num_target = assignment.num_source, assignment.num_target

        if cfg.use_uda:
            z_target = z_masked if cfg.target_features == "masked" else z
            bundle.uda = _uda_term(model, z, z_target, assignment, cfg, progress)

        if cfg.use_cps_s or cfg.use_cps_t:
            prediction = pixel_log_probs(cam, labels, cfg.bg_power)
            if cfg.use_cps_s:
                pseudo = refine_cam(cam, images, cfg.refine_iterations, cfg.refine_dilations, cfg.bg_power,
                                    anchor=cfg.alpha)
                bundle.cps_s = cps_loss(prediction, pseudo, assignment.source_idx,
                                        dynamic_threshold(pseudo, cfg.beta_prime))
            if cfg.use_cps_t:
                pseudo_masked = refine_cam(masked_cam, images, cfg.refine_iterations, cfg.refine_dilations,
                                           cfg.bg_power, masked=True, anchor=cfg.alpha)
                bundle.cps_t = cps_loss(prediction, pseudo_masked, assignment.target_idx,
                                        dynamic_threshold(pseudo_masked, cfg.beta_prime))

    _check_finite(bundle, step)
    return bundle


def train_step(model: PLDAModel, optimizer: torch.optim.Optimizer, images: torch.Tensor, labels: torch.Tensor,
               cfg: TrainConfig, step: int, total_steps: int) -> LossBundle:
    """One optimizer step at the poly learning rate; returns the pre-step losses"""
    lr = poly_lr(step, total_steps, cfg.base_lr, cfg.gamma)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad()
    bundle = compute_losses(model, images, labels, cfg, progress=step / total_steps, step=step)
    bundle.total.backward()
    optimizer.step()
    return bundle.detach()


def stack_batch(samples: Sequence[SynthSample], device: Optional[torch.device] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    labels = torch.from_numpy(np.stack([s.image_label for s in samples]))
    if device is not None:
        images, labels = images.to(device), labels.to(device)
    return images, labels


def _hflip(images: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    flip = torch.rand(images.shape[0], generator=generator) < 0.5
    if not bool(flip.any()):
        return images
    flip = flip.to(images.device)[:, None, None, None]
    return torch.where(flip, images.flip(-1), images)


def steps_per_epoch(num_samples: int, batch_size: int) -> int:
    return math.ceil(num_samples / batch_size)


@torch.no_grad()
def collect_cams(model: PLDAModel, samples: Sequence[SynthSample], batch_size: int = EVAL_BATCH_SIZE,
                 device: Optional[torch.device] = None) -> List[np.ndarray]:
    """Normalized CAMs upsampled to image resolution, one [C, H, W] array per sample"""
    was_training = model.training
    model.eval()
    cams = []
    for start in range(0, len(samples), batch_size):
        images, labels = stack_batch(samples[start:start + batch_size], device)
        _, cam = model(images, labels)
        up = upsample_cam(cam.normalized, tuple(images.shape[-2:]))
        cams.extend(c.cpu().numpy() for c in up)
    model.train(was_training)
    return cams


def evaluate_cam_miou(model: PLDAModel, samples: Sequence[SynthSample], step: float = 0.05,
                      grid: Optional[Sequence[float]] = None, device: Optional[torch.device] = None) -> SweepResult:
    if not samples:
        raise DatasetError("no samples to evaluate")
    cams = collect_cams(model, samples, device=device)
    return sweep_background_threshold(cams, [s.gt_mask for s in samples], [s.image_label for s in samples],
                                      grid if grid is not None else default_grid(step),
                                      num_classes=model.num_classes)


@torch.no_grad()
def similarity_report(model: PLDAModel, samples: Sequence[SynthSample], cfg: TrainConfig, regions: str = "cam",
                      samples_per_class: int = 64, seed: int = 0,
                      device: Optional[torch.device] = None) -> SimilarityReport:
    """Pixel-to-centroid similarity histograms of source vs target pixels on the final model"""
    if regions not in ("cam", "parts"):
        raise ConfigError("regions", f"must be cam or parts, got '{regions}'")
    was_training = model.training
    model.eval()
    features: List[np.ndarray] = []
    labels_out: List[RegionLabels] = []
    for start in range(0, len(samples), EVAL_BATCH_SIZE):
        chunk = samples[start:start + EVAL_BATCH_SIZE]
        images, labels = stack_batch(chunk, device)
        z, cam = model(images, labels)
        if regions == "cam":
            _, masked_cam = model(mask_image(images, cam, cfg.alpha, labels), labels)
        for b, sample in enumerate(chunk):
            features.append(z[b].cpu().numpy())
            if regions == "cam":
                labels_out.append(cam_regions(_image_cam(cam, b), _image_cam(masked_cam, b), cfg.alpha, labels[b]))
            else:
                labels_out.append(part_regions(sample.gt_mask, sample.part_mask, model.backbone.stride))
    model.train(was_training)
    return similarity_histogram(features, labels_out, samples_per_class=samples_per_class, seed=seed)


def _epoch_record(epoch: int, lr: float, bundles: List[LossBundle], sweep: Optional[SweepResult]) -> Dict:
    record = {"epoch": epoch, "lr": lr, "steps": len(bundles)}
    for key in ("cls", "uda", "cps_s", "cps_t", "total"):
        record[key] = float(np.mean([b.as_floats()[key] for b in bundles]))
    record["val_miou"] = None if sweep is None else sweep.best_report.mean
    record["val_threshold"] = None if sweep is None else sweep.best_threshold
    return record


def train(train_set: Sequence[SynthSample], val_set: Sequence[SynthSample], cfg: TrainConfig,
          out_dir: Optional[str] = None, logger: Optional[logging.Logger] = None,
          on_epoch: Optional[Callable[[Dict], None]] = None) -> Tuple[PLDAModel, List[Dict]]:
    """Run cfg.epochs epochs; writes metrics.jsonl and checkpoint.npz when out_dir is given"""
    logger = logger or logging.getLogger(__name__)
    cfg.validate()
    if not train_set:
        raise DatasetError("training set is empty")

    device = resolve_device(cfg.device, logger)
    num_classes = train_set[0].num_classes
    model = build_model(num_classes, cfg).to(device)
    optimizer = build_optimizer(model, cfg)
    generator = torch.Generator().manual_seed(cfg.seed)

    per_epoch = steps_per_epoch(len(train_set), cfg.batch_size)
    total_steps = cfg.epochs * per_epoch

    metrics_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        metrics_path = Path(out_dir) / METRICS_FILE
        metrics_path.write_text("")

    logger.info(f"Training {len(train_set)} samples, {per_epoch} steps/epoch, {total_steps} steps total")
    records: List[Dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(len(train_set), generator=generator).tolist()
        bundles: List[LossBundle] = []
        lr = poly_lr(step, total_steps, cfg.base_lr, cfg.gamma)
        for start in range(0, len(order), cfg.batch_size):
            images, labels = stack_batch([train_set[i] for i in order[start:start + cfg.batch_size]], device)
            if cfg.hflip:
                images = _hflip(images, generator)
            bundle = train_step(model, optimizer, images, labels, cfg, step, total_steps)
            bundles.append(bundle)
            logger.debug(f"step {step}: " + " ".join(f"{k}={v:.4f}" for k, v in bundle.as_floats().items())
                         + f" |Ds|={bundle.num_source} |Dt|={bundle.num_target}")
            step += 1

        sweep = evaluate_cam_miou(model, val_set, cfg.sweep_step, device=device) if val_set else None
        record = _epoch_record(epoch, lr, bundles, sweep)
        records.append(record)
        logger.info(f"epoch {epoch}: total={record['total']:.4f} cls={record['cls']:.4f} "
                    f"uda={record['uda']:.4f} cps_s={record['cps_s']:.4f} cps_t={record['cps_t']:.4f} "
                    f"lr={lr:.5f} val_miou={record['val_miou']}")
        if metrics_path is not None:
            with open(metrics_path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        if on_epoch is not None:
            on_epoch(record)

    if out_dir is not None:
        save_model(model, cfg, Path(out_dir) / CHECKPOINT_FILE)
    return model, records


def save_model(model: PLDAModel, cfg: TrainConfig, path) -> Path:
    meta = {"num_classes": model.num_classes, "feature_dim": model.feature_dim, "config": cfg.to_dict()}
    return save_checkpoint(path, model.state_dict(), meta)


def load_model(path, device: Optional[torch.device] = None) -> Tuple[PLDAModel, TrainConfig]:
    state, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    model = PLDAModel(int(meta["num_classes"]), int(meta["feature_dim"]))
    model.load_state_dict(state)
    model.to(device or torch.device("cpu"))
    model.eval()
    return model, cfg


def read_metrics(path) -> List[Dict]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"metrics log not found: {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
