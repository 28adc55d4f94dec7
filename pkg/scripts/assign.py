#!/usr/bin/env python3
"""
Domain-label assignment: MaskAssign (erase, re-run, re-threshold) and the dual-threshold SimpleAssign
"""

import logging
from typing import Tuple

import torch

from domadv import DomainAssignment
from errors import ConfigError, ShapeError
from netcore import CamMap

logger = logging.getLogger(__name__)


def _check_threshold(value: float, field: str):
    if not 0.0 < value < 1.0:
        raise ConfigError(field, f"must lie in (0, 1), got {value}")


def _present(label: torch.Tensor) -> torch.Tensor:
    return (label > 0)[..., :, None, None]


def activation_union(normalized: torch.Tensor, alpha: float, label: torch.Tensor) -> torch.Tensor:
    """Pixels where any present class exceeds alpha, [..., h, w] bool"""
    return ((normalized > alpha) & _present(label)).any(dim=-3)


def mask_image(image: torch.Tensor, cam: CamMap, alpha: float, label: torch.Tensor) -> torch.Tensor:
    """Zero the image wherever the union of present-class CAMs exceeds alpha"""
    _check_threshold(alpha, "alpha")
    union = activation_union(cam.normalized, alpha, label)
    height, width = image.shape[-2:]
    h, w = union.shape[-2:]
    if height % h or width % w or height // h != width // w:
        raise ShapeError(f"CAM {h}x{w} does not tile image {height}x{width}")
    factor = height // h
    union = union.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)
    return torch.where(union.unsqueeze(-3), torch.zeros_like(image), image)


def _admitted(normalized: torch.Tensor, alpha: float, label: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(flat indices above alpha, argmax present class at those indices); ties go to the lowest class"""
    present = _present(label)
    admitted = ((normalized > alpha) & present).any(dim=0).flatten()
    restricted = torch.where(present, normalized, torch.full_like(normalized, -1.0))
    classes = restricted.argmax(dim=0).flatten()
    idx = torch.nonzero(admitted, as_tuple=False).flatten()
    return idx, classes[idx]


def mask_assign(cam: CamMap, masked_cam: CamMap, alpha: float, label: torch.Tensor) -> DomainAssignment:
    """Source from the original CAM, target from the masked CAM, overlaps kept as-is"""
    _check_threshold(alpha, "alpha")
    if cam.normalized.shape != masked_cam.normalized.shape:
        raise ShapeError(f"cam {tuple(cam.normalized.shape)} vs masked cam {tuple(masked_cam.normalized.shape)}")
    if cam.normalized.dim() != 3:
        raise ShapeError("mask_assign works on a single image's [C, h, w] maps")

    source_idx, source_class = _admitted(cam.normalized, alpha, label)
    target_idx, target_class = _admitted(masked_cam.normalized, alpha, label)
    return DomainAssignment(source_idx, target_idx, source_class, target_class)


def simple_assign(cam: CamMap, alpha_hi: float, alpha_lo: float, label: torch.Tensor) -> DomainAssignment:
    """Source above alpha_hi, target in (alpha_lo, alpha_hi]"""
    _check_threshold(alpha_hi, "alpha_hi")
    _check_threshold(alpha_lo, "alpha_lo")
    if not alpha_lo < alpha_hi:
        raise ConfigError("alpha_lo", f"must be below alpha_hi ({alpha_hi}), got {alpha_lo}")
    normalized = cam.normalized
    if normalized.dim() != 3:
        raise ShapeError("simple_assign works on a single image's [C, h, w] maps")

    present = _present(label)
    restricted = torch.where(present, normalized, torch.full_like(normalized, -1.0))
    peak = restricted.amax(dim=0).flatten()
    classes = restricted.argmax(dim=0).flatten()
    source_idx = torch.nonzero(peak > alpha_hi, as_tuple=False).flatten()
    target_idx = torch.nonzero((peak > alpha_lo) & (peak <= alpha_hi), as_tuple=False).flatten()
    return DomainAssignment(source_idx, target_idx, classes[source_idx], classes[target_idx])
