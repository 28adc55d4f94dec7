#!/usr/bin/env python3
"""
Confident pseudo-supervision

CAMs are refined into per-pixel distributions over {background} + classes with
an image-affinity averaging (a simplified pixel-adaptive refinement), then the
confident pixels of a source or target set supervise the network's own
per-pixel prediction.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F

from errors import ConfigError, ShapeError
from netcore import CamMap

logger = logging.getLogger(__name__)

DEFAULT_DILATIONS = (1, 2, 4, 8)
DEFAULT_ITERATIONS = 10
DEFAULT_BG_POWER = 3.0
NEG_LOGIT = -1e4
STD_EPS = 1e-8


@dataclass
class PseudoLabelMap:
    """probs [..., C+1, h, w] (channel 0 = background), or already flat [N, C+1]"""
    probs: torch.Tensor
    masked: bool = False  # refined from the masked-image CAM

    def flat(self) -> torch.Tensor:
        if self.probs.dim() == 2:
            return self.probs
        channels = self.probs.shape[-3]
        return self.probs.movedim(-3, -1).reshape(-1, channels)

    @property
    def confidence(self) -> torch.Tensor:
        return self.probs.amax(dim=-3)

    @property
    def hard_labels(self) -> torch.Tensor:
        return self.probs.argmax(dim=-3)


def background_channel(normalized: torch.Tensor, power: float = DEFAULT_BG_POWER) -> torch.Tensor:
    """(1 - max_c normalized_c)^q, [..., 1, h, w]"""
    return (1.0 - normalized.amax(dim=-3, keepdim=True)).clamp_min(0.0).pow(power)


def with_background(normalized: torch.Tensor, power: float = DEFAULT_BG_POWER) -> torch.Tensor:
    stacked = torch.cat([background_channel(normalized, power), normalized], dim=-3)
    return stacked / stacked.sum(dim=-3, keepdim=True)


def _neighbours(x: torch.Tensor, dilations: Sequence[int]) -> torch.Tensor:
    """The pixel itself plus its 8-neighbourhood at every dilation, replicate padding:
    [B, ch, h, w] -> [B, ch, 1 + 8 * len(dilations), h, w]
    """
    h, w = x.shape[-2:]
    pad = max(dilations)
    padded = F.pad(x, (pad, pad, pad, pad), mode="replicate")
    shifted = [x]
    for d in dilations:
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                top, left = pad + dy * d, pad + dx * d
                shifted.append(padded[..., top:top + h, left:left + w])
    return torch.stack(shifted, dim=2)


def local_affinity(image: torch.Tensor, dilations: Sequence[int]) -> torch.Tensor:
    """Softmax over neighbours of the negative mean per-channel color distance, [B, K, h, w]"""
    std = image.std(dim=(-2, -1), keepdim=True, unbiased=False) + STD_EPS
    neighbours = _neighbours(image, dilations)
    dist = (neighbours - image.unsqueeze(2)).abs() / std.unsqueeze(2)
    return torch.softmax(-dist.mean(dim=1), dim=1)


def refine_cam(cam: Union[CamMap, torch.Tensor], image: torch.Tensor,
               iterations: int = DEFAULT_ITERATIONS, dilations: Sequence[int] = DEFAULT_DILATIONS,
               power: float = DEFAULT_BG_POWER, masked: bool = False,
               anchor: Optional[float] = None) -> PseudoLabelMap:
    """Append the background channel and average K times over image-affinity neighbourhoods

    With ``anchor`` set, pixels whose strongest normalized activation exceeds it
    are seeds: they are reset to their starting distribution after every
    averaging step, so only the pixels around them are relabelled.
    """
    if iterations < 0:
        raise ConfigError("refine_iterations", f"must be >= 0, got {iterations}")
    if anchor is not None and not 0.0 < anchor < 1.0:
        raise ConfigError("alpha", f"must lie in (0, 1), got {anchor}")
    normalized = cam.normalized if isinstance(cam, CamMap) else cam
    single = normalized.dim() == 3
    if single:
        normalized, image = normalized.unsqueeze(0), image.unsqueeze(0)
    if image.shape[0] != normalized.shape[0]:
        raise ShapeError("image and cam batch sizes differ")

    with torch.no_grad():
        normalized = normalized.detach()
        start = with_background(normalized, power)
        probs = start
        if iterations > 0:
            small = F.adaptive_avg_pool2d(image.detach().to(probs.dtype), normalized.shape[-2:])
            affinity = local_affinity(small, dilations).unsqueeze(1)
            seeds = None
            if anchor is not None:
                seeds = (normalized.amax(dim=-3, keepdim=True) > anchor).expand_as(start)
            for _ in range(iterations):
                probs = (_neighbours(probs, dilations) * affinity).sum(dim=2)
                probs = probs / probs.sum(dim=-3, keepdim=True)
                if seeds is not None:
                    probs = torch.where(seeds, start, probs)

    return PseudoLabelMap(probs=probs[0] if single else probs, masked=masked)


def dynamic_threshold(pseudo: PseudoLabelMap, beta_prime: float) -> torch.Tensor:
    """beta_i = beta' * (spatial max of channel argmax p_i), [..., h, w]"""
    if not 0.0 < beta_prime < 1.0:
        raise ConfigError("beta_prime", f"must lie in (0, 1), got {beta_prime}")
    probs = pseudo.probs
    channel_max = probs.amax(dim=(-2, -1), keepdim=True).expand_as(probs)
    labels = probs.argmax(dim=-3, keepdim=True)
    return beta_prime * torch.gather(channel_max, -3, labels).squeeze(-3)


def pixel_log_probs(cam: CamMap, label: torch.Tensor, power: float = DEFAULT_BG_POWER) -> torch.Tensor:
    """Per-pixel log-distribution over [background, classes] from the original-image pass

    Class logits are the rectified CAM values; the background logit is
    (1 - max_c normalized_c)^q scaled by the image's peak present-class activation.
    Absent classes get a large negative logit.
    """
    present = (label > 0)[..., :, None, None]
    peak = (cam.raw * present).amax(dim=(-3, -2, -1), keepdim=True)
    background = background_channel(cam.normalized, power) * peak
    class_logits = torch.where(present, cam.raw, torch.full_like(cam.raw, NEG_LOGIT))
    return F.log_softmax(torch.cat([background, class_logits], dim=-3), dim=-3)


def confident_mask(pseudo: PseudoLabelMap, pixel_idx: torch.Tensor, beta_map: torch.Tensor) -> torch.Tensor:
    """Flat bool [N]: pixel in the set and its pseudo confidence exceeds its threshold"""
    probs = pseudo.flat()
    n = probs.shape[0]
    beta = beta_map.reshape(-1)
    if beta.shape[0] != n:
        raise ShapeError(f"beta map has {beta.shape[0]} entries for {n} pixels")
    in_set = torch.zeros(n, dtype=torch.bool, device=probs.device)
    if pixel_idx.numel():
        if int(pixel_idx.min()) < 0 or int(pixel_idx.max()) >= n:
            raise ShapeError(f"pixel index out of range for {n} pixels")
        in_set[pixel_idx.to(probs.device)] = True
    return in_set & (probs.amax(dim=1) > beta.to(probs.device))


def cps_loss(prediction: torch.Tensor, pseudo: PseudoLabelMap, pixel_idx: torch.Tensor,
             beta_map: torch.Tensor) -> torch.Tensor:
    """Mean CE between log-prob prediction [N, C+1] and argmax pseudo over the confident set; 0 if empty"""
    if prediction.dim() != 2:
        prediction = prediction.movedim(-3, -1).reshape(-1, prediction.shape[-3])
    confident = confident_mask(pseudo, pixel_idx, beta_map)
    if prediction.shape[0] != confident.shape[0]:
        raise ShapeError(f"prediction has {prediction.shape[0]} pixels, pseudo labels {confident.shape[0]}")
    if not bool(confident.any()):
        return prediction.sum() * 0.0
    targets = pseudo.flat().argmax(dim=1)[confident]
    return F.nll_loss(prediction[confident], targets, reduction="mean")
