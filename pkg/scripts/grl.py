#!/usr/bin/env python3
"""
Gradient reversal: identity on the forward pass, -lambda * gradient on the backward pass
"""

import math
from dataclasses import dataclass

import torch

from errors import ConfigError


@dataclass
class GrlConfig:
    lam: float = 1.0
    warmup: bool = False

    def validate(self):
        if self.lam < 0:
            raise ConfigError("grl_lambda", f"must be >= 0, got {self.lam}")
        return self

    def coefficient(self, progress: float = 1.0) -> float:
        """Effective lambda at training progress in [0, 1]"""
        if not self.warmup:
            return self.lam
        progress = min(max(progress, 0.0), 1.0)
        return self.lam * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)


class GradReverse(torch.autograd.Function):

    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grl_apply(t: torch.Tensor, cfg: GrlConfig, progress: float = 1.0) -> torch.Tensor:
    cfg.validate()
    return GradReverse.apply(t, cfg.coefficient(progress))
