#!/usr/bin/env python3
"""
Multi-head domain classifier g_phi and the intra-image adversarial losses
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ShapeError

logger = logging.getLogger(__name__)

SOURCE = 0
TARGET = 1


class DomainClassifier(nn.Module):
    """Shared per-pixel base, one binary head per class, plus a single head for the global variant"""

    def __init__(self, feature_dim: int = 64, num_classes: int = 3, dropout: float = 0.5):
        super().__init__()
        self.base = nn.Sequential(
            nn.Linear(feature_dim, feature_dim),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
            nn.Linear(feature_dim, feature_dim),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
        )
        self.heads = nn.ModuleList([nn.Linear(feature_dim, 2) for _ in range(num_classes)])
        self.binary_head = nn.Linear(feature_dim, 2)
        self.feature_dim = feature_dim

    @property
    def num_classes(self) -> int:
        return len(self.heads)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        shared = self.base(features)
        return torch.stack([head(shared) for head in self.heads], dim=1)

    def global_logits(self, features: torch.Tensor) -> torch.Tensor:
        return self.binary_head(self.base(features))


@dataclass
class DomainAssignment:
    """Source and target pixel sets; indices are flat pixel positions"""
    source_idx: torch.Tensor  # long [Ns]
    target_idx: torch.Tensor  # long [Nt]
    source_class: torch.Tensor  # long [Ns]
    target_class: torch.Tensor  # long [Nt]

    @classmethod
    def empty(cls, device=None) -> "DomainAssignment":
        none = torch.zeros(0, dtype=torch.long, device=device)
        return cls(none, none.clone(), none.clone(), none.clone())

    @classmethod
    def concat(cls, assignments: Sequence["DomainAssignment"], pixels_per_image: int) -> "DomainAssignment":
        """Merge per-image assignments into batch-level flat indices"""
        if not assignments:
            return cls.empty()
        shifted = [a.offset(i * pixels_per_image) for i, a in enumerate(assignments)]
        return cls(
            source_idx=torch.cat([a.source_idx for a in shifted]),
            target_idx=torch.cat([a.target_idx for a in shifted]),
            source_class=torch.cat([a.source_class for a in shifted]),
            target_class=torch.cat([a.target_class for a in shifted]),
        )

    def offset(self, n: int) -> "DomainAssignment":
        return DomainAssignment(self.source_idx + n, self.target_idx + n, self.source_class, self.target_class)

    @property
    def num_source(self) -> int:
        return int(self.source_idx.numel())

    @property
    def num_target(self) -> int:
        return int(self.target_idx.numel())

    def is_empty(self) -> bool:
        return self.num_source + self.num_target == 0

    @property
    def pixel_idx(self) -> torch.Tensor:
        return torch.cat([self.source_idx, self.target_idx])

    @property
    def pixel_class(self) -> torch.Tensor:
        return torch.cat([self.source_class, self.target_class])

    @property
    def domain_label(self) -> torch.Tensor:
        """Domain index per listed pixel, SOURCE then TARGET"""
        return torch.cat([
            torch.full_like(self.source_idx, SOURCE),
            torch.full_like(self.target_idx, TARGET),
        ])

    @property
    def domain_onehot(self) -> torch.Tensor:
        return F.one_hot(self.domain_label, num_classes=2)


def domain_weights(num_source: int, num_target: int) -> Tuple[float, float]:
    """Inverse-frequency weights so each domain contributes equally"""
    total = num_source + num_target
    w_source = total / (2.0 * num_source) if num_source else 0.0
    w_target = total / (2.0 * num_target) if num_target else 0.0
    return w_source, w_target


def domain_logits(pixel_features: torch.Tensor, params: DomainClassifier) -> torch.Tensor:
    """pixel_features [N, D] -> logits [N, C, 2]"""
    if pixel_features.dim() != 2 or pixel_features.shape[1] != params.feature_dim:
        raise ShapeError(f"expected [N, {params.feature_dim}] pixel features, got {tuple(pixel_features.shape)}")
    return params(pixel_features)


def _weighted_domain_ce(logits: torch.Tensor, domains: torch.Tensor,
                        weights: Optional[Tuple[float, float]]) -> torch.Tensor:
    if weights is None:
        weights = domain_weights(int((domains == SOURCE).sum()), int((domains == TARGET).sum()))
    per_domain = torch.tensor(weights, dtype=logits.dtype, device=logits.device)
    ce = F.cross_entropy(logits, domains, reduction="none")
    return (per_domain[domains] * ce).sum() / domains.numel()


def uda_loss_multihead(logits: torch.Tensor, assignment: DomainAssignment,
                       weights: Optional[Tuple[float, float]] = None) -> torch.Tensor:
    """Only the head of each pixel's CAM class contributes; weights default to inverse frequency"""
    if assignment.is_empty():
        return logits.sum() * 0.0
    idx = assignment.pixel_idx.to(logits.device)
    if int(idx.min()) < 0 or int(idx.max()) >= logits.shape[0]:
        raise ShapeError(f"pixel index out of range for {logits.shape[0]} rows")
    classes = assignment.pixel_class.to(logits.device)
    if int(classes.max()) >= logits.shape[1]:
        raise ShapeError(f"pixel class out of range for {logits.shape[1]} heads")
    selected = logits[idx, classes]
    return _weighted_domain_ce(selected, assignment.domain_label.to(logits.device), weights)


def uda_loss_global(logits_binary: torch.Tensor, domain_labels: torch.Tensor,
                    weights: Optional[Tuple[float, float]] = None) -> torch.Tensor:
    """Single binary head, no class indicator"""
    if logits_binary.shape[0] == 0:
        return logits_binary.sum() * 0.0
    if logits_binary.dim() != 2 or logits_binary.shape[1] != 2:
        raise ShapeError(f"expected [N, 2] logits, got {tuple(logits_binary.shape)}")
    if domain_labels.shape[0] != logits_binary.shape[0]:
        raise ShapeError("domain_labels and logits disagree on N")
    return _weighted_domain_ce(logits_binary, domain_labels.to(logits_binary.device).long(), weights)
