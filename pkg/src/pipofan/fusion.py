"""Adaptive fusion of per-scale score maps.

A single convolution, shared by every scale, reduces each C-channel score map
to one channel. Global average plus global max of that map gives a scalar
confidence per scale. A softmax over scales turns those into weights for a
weighted sum of the (upsampled) score maps, followed by a channel softmax.
"""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import ScalePyramid, SegmentationOutput
from .exceptions import ContractError, PipoFanError


class AdaptiveFusion(nn.Module):
    def __init__(self, n_classes: int, kernel_size: int = 3, seed: int = 0):
        super().__init__()
        self.shared_conv = nn.Conv2d(n_classes, 1, kernel_size, padding=kernel_size // 2)
        gen = torch.Generator().manual_seed(int(seed))
        nn.init.kaiming_normal_(self.shared_conv.weight, mode="fan_in", generator=gen)
        nn.init.zeros_(self.shared_conv.bias)

    def zero_(self):
        with torch.no_grad():
            self.shared_conv.weight.zero_()
            self.shared_conv.bias.zero_()
        return self

    def scale_score(self, score_map: torch.Tensor) -> torch.Tensor:
        return scale_score(score_map, self)

    def forward(self, score_pyramid, target_size=None) -> SegmentationOutput:
        return fuse(score_pyramid, self, target_size)


def scale_score(score_map: torch.Tensor, params: AdaptiveFusion) -> torch.Tensor:
    """Confidence of one scale: GAP + GMP of the shared-conv response, one value per image."""
    if score_map.dim() == 3:
        score_map = score_map.unsqueeze(0)
    response = params.shared_conv(score_map).flatten(1)
    return response.mean(dim=1) + response.amax(dim=1)


def fuse(score_pyramid: Sequence[torch.Tensor], params: AdaptiveFusion, target_size=None) -> SegmentationOutput:
    """Softmax-weighted sum of upsampled score maps.

    Levels may come in any order and at any size; each is resized to
    ``target_size`` (default: the first level's size). Returns a
    :class:`SegmentationOutput` with float64 ``fusion_weights`` of shape
    ``(N, S)`` and ``fused_logits``/``fused_probs`` of shape ``(N, C, H, W)``.
    """
    levels = list(score_pyramid)
    if not levels:
        raise ContractError("cannot fuse an empty pyramid")
    levels = [lvl.unsqueeze(0) if lvl.dim() == 3 else lvl for lvl in levels]
    if target_size is None:
        target_size = tuple(levels[0].shape[-2:])
    target_size = tuple(int(v) for v in target_size)

    scores = torch.stack([scale_score(lvl, params) for lvl in levels], dim=1)
    # double precision keeps every weight positive for score gaps up to ~700
    weights = torch.softmax(scores.double(), dim=1)
    fused = None
    for s, lvl in enumerate(levels):
        if tuple(lvl.shape[-2:]) != target_size:
            lvl = F.interpolate(lvl, size=target_size, mode="bilinear", align_corners=False)
        term = weights[:, s].to(lvl.dtype).view(-1, 1, 1, 1) * lvl
        fused = term if fused is None else fused + term
    # levels in any order are fusable; only a true pyramid is kept as one
    if isinstance(score_pyramid, ScalePyramid):
        pyramid = score_pyramid
    else:
        try:
            pyramid = ScalePyramid(tuple(levels))
        except PipoFanError:
            pyramid = tuple(levels)
    return SegmentationOutput(
        score_pyramid=pyramid,
        fusion_weights=weights,
        fused_probs=torch.softmax(fused, dim=1),
        fused_logits=fused,
    )
