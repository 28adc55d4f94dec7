#!/usr/bin/env python3
"""
Synthetic weakly supervised segmentation dataset

Every object is a composite shape: a small discriminative core painted in a
class-unique color, and a larger body painted with a stripe texture that is
identical for all classes. A classifier trained on image tags only needs the
core, so its activation maps cover the core and miss the body.
"""

import colorsys
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from errors import ConfigError, DatasetError

logger = logging.getLogger(__name__)

# part_mask values
PART_BACKGROUND = 0
PART_CORE = 1
PART_BODY = 2

MAX_PLACEMENT_TRIES = 50
MIN_OBJECT_AREA = 16
STRIPE_PERIOD = 6


@dataclass
class DatasetSpec:
    num_train: int = 500
    num_val: int = 100
    num_classes: int = 3
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 2
    core_fraction: float = 0.25
    core_contrast: float = 0.85
    body_contrast: float = 0.15
    noise_level: float = 0.05
    background_level: float = 0.1
    min_radius: float = 0.12  # fraction of image_size
    max_radius: float = 0.22
    stride: int = 4  # total backbone stride the images must be divisible by
    seed: int = 0

    def validate(self):
        """Raise ConfigError naming the first invalid field"""
        if self.num_train < 1:
            raise ConfigError("num_train", f"must be >= 1, got {self.num_train}")
        if self.num_val < 0:
            raise ConfigError("num_val", f"must be >= 0, got {self.num_val}")
        if self.num_classes < 2:
            raise ConfigError("num_classes", f"must be >= 2, got {self.num_classes}")
        if self.stride < 1:
            raise ConfigError("stride", f"must be >= 1, got {self.stride}")
        if self.image_size < 8 or self.image_size % self.stride != 0:
            raise ConfigError("image_size",
                              f"must be >= 8 and divisible by stride {self.stride}, got {self.image_size}")
        if self.min_objects < 1:
            raise ConfigError("min_objects", f"must be >= 1, got {self.min_objects}")
        if self.max_objects < self.min_objects:
            raise ConfigError("max_objects", f"must be >= min_objects ({self.min_objects}), got {self.max_objects}")
        if not 0.0 < self.core_fraction < 1.0:
            raise ConfigError("core_fraction", f"must lie in (0, 1), got {self.core_fraction}")
        for name in ("core_contrast", "body_contrast", "noise_level", "background_level"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(name, f"must lie in [0, 1], got {value}")
        if not 0.0 < self.min_radius <= self.max_radius < 0.5:
            raise ConfigError("min_radius", "need 0 < min_radius <= max_radius < 0.5")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown dataset field")
        return cls(**data)


@dataclass
class SynthSample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    image_label: np.ndarray  # float32 [C], multi-hot
    gt_mask: np.ndarray  # uint8 [H, W], 0 = background, c + 1 = class c
    part_mask: np.ndarray  # uint8 [H, W], PART_* values
    sample_id: int

    @property
    def num_classes(self) -> int:
        return int(self.image_label.shape[0])

    @property
    def present_classes(self) -> List[int]:
        return [int(c) for c in np.flatnonzero(self.image_label)]


@dataclass
class DatasetStats:
    num_samples: int
    class_image_counts: List[int]
    mean_object_area: float
    mean_core_area: float


def canonical_core_colors(num_classes: int) -> np.ndarray:
    """Class-unique saturated colors, evenly spaced in hue, shape [C, 3]"""
    return np.array([colorsys.hsv_to_rgb(c / num_classes, 1.0, 1.0) for c in range(num_classes)],
                    dtype=np.float32)


def _shape_polygon(rng: np.random.Generator, spec: DatasetSpec) -> List[Tuple[float, float]]:
    """Random ellipse or star-convex polygon that lies fully inside the image"""
    size = spec.image_size
    rx, ry = rng.uniform(spec.min_radius, spec.max_radius, size=2) * size
    extent = max(rx, ry)
    cx = rng.uniform(extent, size - 1 - extent)
    cy = rng.uniform(extent, size - 1 - extent)
    angle = rng.uniform(0.0, np.pi)

    if rng.random() < 0.5:
        thetas = np.linspace(0.0, 2 * np.pi, 32, endpoint=False)
        radii = np.ones_like(thetas)
    else:
        n_vertices = int(rng.integers(5, 9))
        thetas = np.sort(rng.uniform(0.0, 2 * np.pi, size=n_vertices))
        radii = rng.uniform(0.75, 1.0, size=n_vertices)

    px = radii * rx * np.cos(thetas)
    py = radii * ry * np.sin(thetas)
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    xs = cx + cos_a * px - sin_a * py
    ys = cy + sin_a * px + cos_a * py
    return list(zip(xs.tolist(), ys.tolist()))


def _rasterize(polygon: Sequence[Tuple[float, float]], size: int) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    ImageDraw.Draw(canvas).polygon(list(polygon), fill=1)
    return np.array(canvas, dtype=bool)


def _core_region(body: np.ndarray, rng: np.random.Generator, core_fraction: float) -> np.ndarray:
    """The round(core_fraction * area) body pixels nearest an off-center anchor"""
    ys, xs = np.nonzero(body)
    k = max(1, int(round(core_fraction * ys.size)))
    # anchor sits between the centroid and a random body pixel, like a head on a torso
    pick = int(rng.integers(ys.size))
    anchor_y = 0.4 * ys.mean() + 0.6 * ys[pick]
    anchor_x = 0.4 * xs.mean() + 0.6 * xs[pick]
    dist = (ys - anchor_y) ** 2 + (xs - anchor_x) ** 2
    nearest = np.argsort(dist, kind="stable")[:k]
    core = np.zeros_like(body)
    core[ys[nearest], xs[nearest]] = True
    return core


def generate_sample(spec: DatasetSpec, sample_id: int) -> SynthSample:
    """Pure function of (spec, sample_id)"""
    rng = np.random.default_rng([spec.seed, sample_id])
    size = spec.image_size
    colors = canonical_core_colors(spec.num_classes)

    image = spec.background_level + spec.noise_level * rng.standard_normal((size, size, 3))
    gt_mask = np.zeros((size, size), dtype=np.uint8)
    part_mask = np.zeros((size, size), dtype=np.uint8)

    yy, xx = np.mgrid[0:size, 0:size]
    stripes = np.sign(np.sin(2 * np.pi * (xx + yy) / STRIPE_PERIOD))
    body_texture = 0.5 + spec.body_contrast * stripes

    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    n_objects = min(n_objects, spec.num_classes)
    classes = rng.choice(spec.num_classes, size=n_objects, replace=False)

    for cls in classes:
        body = None
        for _ in range(MAX_PLACEMENT_TRIES):
            candidate = _rasterize(_shape_polygon(rng, spec), size)
            if candidate.sum() >= MIN_OBJECT_AREA and not (candidate & (gt_mask > 0)).any():
                body = candidate
                break
        if body is None:
            logger.debug(f"Sample {sample_id}: could not place class {cls}, skipping object")
            continue

        core = _core_region(body, rng, spec.core_fraction)
        noise = spec.noise_level * rng.standard_normal((size, size, 3))
        image[body] = body_texture[body][:, None] + noise[body]
        core_value = spec.core_contrast * colors[cls] + (1.0 - spec.core_contrast) * 0.5
        image[core] = core_value[None, :] + noise[core]

        gt_mask[body] = cls + 1
        part_mask[body] = PART_BODY
        part_mask[core] = PART_CORE

    # quantize to 8 bits so the in-memory and persisted datasets are identical
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    image_label = np.zeros(spec.num_classes, dtype=np.float32)
    for value in np.unique(gt_mask):
        if value > 0:
            image_label[value - 1] = 1.0

    return SynthSample(
        image=np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32),
        image_label=image_label,
        gt_mask=gt_mask,
        part_mask=part_mask,
        sample_id=int(sample_id),
    )


def generate_dataset(spec: DatasetSpec) -> Tuple[List[SynthSample], List[SynthSample]]:
    """Generate (train, val); ids 0..num_train-1 are train, the next num_val are val"""
    spec.validate()
    train = [generate_sample(spec, i) for i in range(spec.num_train)]
    val = [generate_sample(spec, spec.num_train + i) for i in range(spec.num_val)]
    logger.info(f"Generated {len(train)} train / {len(val)} val samples "
                f"(C={spec.num_classes}, {spec.image_size}x{spec.image_size}, seed={spec.seed})")
    return train, val


def dataset_stats(dataset: Sequence[SynthSample]) -> DatasetStats:
    if not dataset:
        raise DatasetError("dataset_stats needs a nonempty dataset")

    num_classes = dataset[0].num_classes
    counts = [0] * num_classes
    object_areas = []
    core_areas = []
    for sample in dataset:
        for cls in sample.present_classes:
            counts[cls] += 1
            obj = sample.gt_mask == cls + 1
            object_areas.append(int(obj.sum()))
            core_areas.append(int((obj & (sample.part_mask == PART_CORE)).sum()))

    return DatasetStats(
        num_samples=len(dataset),
        class_image_counts=counts,
        mean_object_area=float(np.mean(object_areas)) if object_areas else 0.0,
        mean_core_area=float(np.mean(core_areas)) if core_areas else 0.0,
    )


def save_dataset(train: Sequence[SynthSample], val: Sequence[SynthSample],
                 spec: Optional[DatasetSpec], root: str) -> Path:
    """Write PNG rasters plus index.jsonl (and spec.json when the spec is known)"""
    root = Path(root)
    for sub in ("images", "gt", "parts"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    lines = []
    for split, samples in (("train", train), ("val", val)):
        for sample in samples:
            name = f"{sample.sample_id:05d}.png"
            rgb = np.round(sample.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
            Image.fromarray(rgb).save(root / "images" / name)
            Image.fromarray(sample.gt_mask).save(root / "gt" / name)
            Image.fromarray(sample.part_mask).save(root / "parts" / name)
            record = {"id": sample.sample_id, "label": [int(v) for v in sample.image_label], "split": split}
            lines.append(json.dumps(record, sort_keys=True))

    (root / "index.jsonl").write_text("\n".join(lines) + "\n")
    if spec is not None:
        (root / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    logger.info(f"Saved {len(lines)} samples to {root}")
    return root


def load_dataset(root: str) -> Tuple[List[SynthSample], List[SynthSample], Optional[DatasetSpec]]:
    root = Path(root)
    index_file = root / "index.jsonl"
    if not index_file.exists():
        raise DatasetError(f"no index.jsonl in {root}")

    splits: Dict[str, List[SynthSample]] = {"train": [], "val": []}
    for line in index_file.read_text().splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        name = f"{record['id']:05d}.png"
        rgb = (np.array(Image.open(root / "images" / name).convert("RGB"), dtype=np.float64) / 255.0).astype(np.float32)
        sample = SynthSample(
            image=np.ascontiguousarray(rgb.transpose(2, 0, 1)),
            image_label=np.array(record["label"], dtype=np.float32),
            gt_mask=np.array(Image.open(root / "gt" / name), dtype=np.uint8),
            part_mask=np.array(Image.open(root / "parts" / name), dtype=np.uint8),
            sample_id=int(record["id"]),
        )
        if record["split"] not in splits:
            raise DatasetError(f"unknown split '{record['split']}' for sample {record['id']}")
        splits[record["split"]].append(sample)

    spec = None
    spec_file = root / "spec.json"
    if spec_file.exists():
        spec = DatasetSpec.from_dict(json.loads(spec_file.read_text()))
    if not splits["train"] and not splits["val"]:
        raise DatasetError(f"dataset at {root} is empty")
    logger.info(f"Loaded {len(splits['train'])} train / {len(splits['val'])} val samples from {root}")
    return splits["train"], splits["val"], spec
