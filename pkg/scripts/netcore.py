#!/usr/bin/env python3
"""
Feature extractor, CAM head and the multi-label classification loss
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ShapeError

logger = logging.getLogger(__name__)

# (out_channels, stride, dilation) per block; the last block's width is feature_dim
BACKBONE_LAYOUT: Sequence[Tuple[int, int, int]] = ((32, 1, 1), (64, 2, 1), (64, 1, 2), (-1, 2, 2))


@dataclass
class CamMap:
    """Class activation maps, optionally with a leading batch dimension"""
    raw: torch.Tensor  # [..., C, h, w], ReLU(w_c . z)
    normalized: torch.Tensor  # [..., C, h, w] in [0, 1], absent classes zeroed
    logits: Optional[torch.Tensor] = None  # [..., C, h, w], w_c . z before rectification

    @property
    def num_classes(self) -> int:
        return self.raw.shape[-3]

    def detach(self) -> "CamMap":
        return CamMap(
            raw=self.raw.detach(),
            normalized=self.normalized.detach(),
            logits=None if self.logits is None else self.logits.detach(),
        )


class ConvBlock(nn.Module):
    """3x3 conv -> batch norm -> ReLU"""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride,
                              padding=dilation, dilation=dilation, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)
        self.stride = stride
        self.dilation = dilation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.bn(self.conv(x)))


class Backbone(nn.Module):
    """Small stride-4 CNN standing in for f_theta"""

    def __init__(self, feature_dim: int = 64, in_channels: int = 3):
        super().__init__()
        blocks = []
        channels = in_channels
        for out_channels, stride, dilation in BACKBONE_LAYOUT:
            out_channels = feature_dim if out_channels < 0 else out_channels
            blocks.append(ConvBlock(channels, out_channels, stride, dilation))
            channels = out_channels
        self.blocks = nn.Sequential(*blocks)
        self.feature_dim = feature_dim
        self.in_channels = in_channels

    @property
    def stride(self) -> int:
        total = 1
        for block in self.blocks:
            total *= block.stride
        return total

    def receptive_field(self) -> Tuple[int, int]:
        """(radius, stride): output (i, j) depends on input pixels within radius of (i*stride, j*stride)"""
        radius, jump = 0, 1
        for block in self.blocks:
            radius += block.dilation * jump
            jump *= block.stride
        return radius, jump

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)


class CamHead(nn.Module):
    """Bias-free classification head w of shape [C, D]"""

    def __init__(self, num_classes: int, feature_dim: int = 64):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, feature_dim))
        nn.init.normal_(self.weight, std=0.01)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.einsum("cd,...dhw->...chw", self.weight, z)


def extract_features(image: torch.Tensor, params: Backbone) -> torch.Tensor:
    """image [3, H, W] or [B, 3, H, W] -> z [D, h, w] or [B, D, h, w]"""
    if image.dim() not in (3, 4):
        raise ShapeError(f"expected [3,H,W] or [B,3,H,W], got {tuple(image.shape)}")
    if image.shape[-3] != params.in_channels:
        raise ShapeError(f"expected {params.in_channels} input channels, got {image.shape[-3]}")
    height, width = image.shape[-2:]
    stride = params.stride
    if height % stride or width % stride:
        raise ShapeError(f"image size {height}x{width} is not divisible by stride {stride}")

    single = image.dim() == 3
    z = params(image.unsqueeze(0) if single else image)
    return z[0] if single else z


def normalize_cam(raw: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Per-class spatial max normalization; classes absent from label and all-zero maps become 0"""
    peak = raw.amax(dim=(-2, -1), keepdim=True)
    safe_peak = torch.where(peak > 0, peak, torch.ones_like(peak))
    return raw / safe_peak * label[..., :, None, None].to(raw.dtype)


def compute_cam(z: torch.Tensor, head: CamHead, label: torch.Tensor) -> CamMap:
    if z.shape[-3] != head.weight.shape[1]:
        raise ShapeError(f"feature dim {z.shape[-3]} does not match head dim {head.weight.shape[1]}")
    logits = head(z)
    raw = F.relu(logits)
    return CamMap(raw=raw, normalized=normalize_cam(raw, label), logits=logits)


def classification_scores(cam: CamMap) -> torch.Tensor:
    """Global average pool of the pre-rectification maps, [..., C]"""
    source = cam.logits if cam.logits is not None else cam.raw
    return source.mean(dim=(-2, -1))


def classification_loss(cam: CamMap, label: torch.Tensor) -> torch.Tensor:
    scores = classification_scores(cam)
    return F.binary_cross_entropy_with_logits(scores, label.to(scores.dtype), reduction="mean")


def upsample_cam(normalized: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Bilinear upsampling of [..., C, h, w] maps to full image resolution, clamped to [0, 1]"""
    lead = normalized.shape[:-3]
    flat = normalized.reshape(-1, *normalized.shape[-3:])
    up = F.interpolate(flat, size=size, mode="bilinear", align_corners=False)
    return up.clamp(0.0, 1.0).reshape(*lead, normalized.shape[-3], *size)
