"""Segmentation objectives: weighted multi-scale cross entropy and the
target adaptive loss for partially labeled data.

All losses are minimized (negative log-likelihoods) and averaged over voxels.
The logit-space losses are autograd Functions with closed-form backward
passes.

Target adaptive loss, for a dataset whose labeled organs are ``K``:

* voxel labeled ``c`` in ``K``:     ``-log p_c``
* voxel labeled 0 (background or an organ this dataset does not annotate):
  ``-log(1 - sum_{c in K} p_c)``, i.e. every class outside ``K`` is merged
  into one complement class.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .exceptions import ConfigurationError, ContractError

LOG_CLAMP = 1e-12

SINGLE_ORGAN_WEIGHTS = (0.2, 1.2)


def multi_organ_weights(n_classes: int) -> tuple:
    return (1.0,) * n_classes


@dataclass(frozen=True)
class LossConfig:
    """``class_weights=None`` means unit weights. ``tal_scales`` is ``"all"``
    (supervise every output scale) or ``"full"`` (full resolution only)."""

    class_weights: Optional[tuple] = None
    tal_scales: str = "all"

    def __post_init__(self):
        if self.class_weights is not None:
            w = tuple(float(v) for v in self.class_weights)
            if any(not v > 0 for v in w):
                raise ConfigurationError(f"class weights must be positive: {w}")
            object.__setattr__(self, "class_weights", w)
        if self.tal_scales not in ("all", "full"):
            raise ConfigurationError(f"tal_scales must be 'all' or 'full', got {self.tal_scales!r}")

    def weights(self, n_classes: int) -> Optional[tuple]:
        if self.class_weights is None:
            return None
        if len(self.class_weights) != n_classes:
            raise ConfigurationError(
                f"{len(self.class_weights)} class weights for {n_classes} classes"
            )
        return self.class_weights

    def is_unit(self) -> bool:
        return self.class_weights is None or all(w == 1.0 for w in self.class_weights)


def softmax_probs(logits, dim: int = 1):
    """Channel softmax with max subtraction; accepts tensors or arrays."""
    if isinstance(logits, np.ndarray):
        z = logits - logits.max(axis=dim, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=dim, keepdims=True)
    z = logits - logits.amax(dim=dim, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def _labeled_mask(labeled: Iterable[int], n_classes: int, device=None) -> torch.Tensor:
    classes = sorted(int(c) for c in labeled)
    if not classes:
        raise ContractError("labeled class set is empty")
    if classes[0] < 1 or classes[-1] >= n_classes:
        raise ContractError(f"labeled classes {classes} outside 1..{n_classes - 1}")
    mask = torch.zeros(n_classes, dtype=torch.bool, device=device)
    mask[classes] = True
    return mask


def _check_pair(logits: torch.Tensor, labels: torch.Tensor):
    if logits.dim() < 2:
        raise ContractError("expected logits with a channel axis")
    if tuple(labels.shape) != tuple(logits.shape[:1]) + tuple(logits.shape[2:]):
        raise ContractError(
            f"label shape {tuple(labels.shape)} does not match logits {tuple(logits.shape)}"
        )


def _check_allowed(labels: torch.Tensor, mask: torch.Tensor):
    if labels.numel() == 0:
        return
    if labels.min() < 0 or labels.max() >= mask.numel():
        raise ContractError("label values outside the class range")
    allowed = mask.clone()
    allowed[0] = True
    if not bool(allowed[labels].all()):
        bad = sorted(set(torch.unique(labels[~allowed[labels]]).tolist()))
        raise ContractError(f"labels {bad} are outside the dataset's labeled classes")


class _WeightedCrossEntropy(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, labels, weights):
        logp = torch.log_softmax(logits, dim=1)
        idx = labels.unsqueeze(1)
        w = weights[labels]
        loss = -(w * logp.gather(1, idx).squeeze(1)).mean()
        ctx.save_for_backward(logp, labels, w)
        return loss

    @staticmethod
    def backward(ctx, grad_out):
        logp, labels, w = ctx.saved_tensors
        grad = logp.exp()
        grad.scatter_add_(1, labels.unsqueeze(1), -torch.ones_like(grad[:, :1]))
        n = labels.numel()
        grad = grad * (w.unsqueeze(1) * (grad_out / n))
        return grad, None, None


class _TargetAdaptiveLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, labels, mask):
        logp = torch.log_softmax(logits, dim=1)
        p = logp.exp()
        known = mask[labels]  # voxel carries a labeled-organ annotation
        log_known = logp.gather(1, labels.unsqueeze(1)).squeeze(1)
        comp_mask = (~mask).view(1, -1, *([1] * (logits.dim() - 2)))
        log_comp = torch.logsumexp(logp.masked_fill(~comp_mask, float("-inf")), dim=1)
        clamped = log_comp < np.log(LOG_CLAMP)
        log_comp = torch.clamp(log_comp, min=np.log(LOG_CLAMP))
        per_voxel = -torch.where(known, log_known, log_comp)
        ctx.save_for_backward(p, labels, known, clamped, comp_mask, log_comp)
        return per_voxel.mean()

    @staticmethod
    def backward(ctx, grad_out):
        p, labels, known, clamped, comp_mask, log_comp = ctx.saved_tensors
        n = labels.numel()
        # labeled voxel: p - onehot(label)
        g_known = p.clone()
        g_known.scatter_add_(1, labels.unsqueeze(1), -torch.ones_like(p[:, :1]))
        # complement voxel: p_j - [j outside K] * p_j / q
        q = log_comp.exp().unsqueeze(1)
        g_comp = p - comp_mask.to(p.dtype) * p / q
        g_comp = torch.where(clamped.unsqueeze(1), torch.zeros_like(g_comp), g_comp)
        grad = torch.where(known.unsqueeze(1), g_known, g_comp)
        return grad * (grad_out / n), None, None


def weighted_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, weights=None) -> torch.Tensor:
    """Voxel-mean of ``-w[y] log p_y`` over an ``(N, C, ...)`` logit map."""
    labels = torch.as_tensor(labels, device=logits.device).long()
    _check_pair(logits, labels)
    n_classes = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError("label values outside the class range")
    if weights is None:
        weights = torch.ones(n_classes, dtype=logits.dtype, device=logits.device)
    else:
        weights = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device)
        if weights.numel() != n_classes:
            raise ContractError(f"{weights.numel()} weights for {n_classes} classes")
    return _WeightedCrossEntropy.apply(logits, labels, weights)


def tal_loss_logits(logits: torch.Tensor, labels: torch.Tensor, labeled: Iterable[int]) -> torch.Tensor:
    """Target adaptive loss computed from logits, with an analytic gradient."""
    labels = torch.as_tensor(labels, device=logits.device).long()
    _check_pair(logits, labels)
    mask = _labeled_mask(labeled, logits.shape[1], logits.device)
    _check_allowed(labels, mask)
    return _TargetAdaptiveLoss.apply(logits, labels, mask)


def tal_loss(probs: torch.Tensor, labels: torch.Tensor, labeled: Iterable[int]) -> torch.Tensor:
    """Target adaptive loss on a probability map of shape ``(N, C, ...)``."""
    labels = torch.as_tensor(labels, device=probs.device).long()
    _check_pair(probs, labels)
    mask = _labeled_mask(labeled, probs.shape[1], probs.device)
    _check_allowed(labels, mask)
    shape = (1, -1) + (1,) * (probs.dim() - 2)
    p_known = probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    # merged unknown class: summing its members keeps their gradients tied
    comp = (probs * (~mask).to(probs.dtype).view(shape)).sum(dim=1)
    known = mask[labels]
    per_voxel = -torch.where(
        known, torch.log(p_known.clamp_min(LOG_CLAMP)), torch.log(comp.clamp_min(LOG_CLAMP))
    )
    return per_voxel.mean()


def full_cross_entropy(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Plain cross entropy over all classes, ``-mean log p_y``, from probabilities."""
    labels = torch.as_tensor(labels, device=probs.device).long()
    _check_pair(probs, labels)
    return -torch.log(probs.gather(1, labels.unsqueeze(1)).squeeze(1)).mean()


def _check_pyramids(score_pyramid, label_pyramid):
    if len(score_pyramid) != len(label_pyramid):
        raise ContractError(
            f"score pyramid has {len(score_pyramid)} scales, labels have {len(label_pyramid)}"
        )
    if len(score_pyramid) == 0:
        raise ContractError("empty pyramid")


def dps_loss(score_pyramid: Sequence[torch.Tensor], label_pyramid: Sequence, config: LossConfig = None,
             weights=None) -> torch.Tensor:
    """Deep pyramid supervision: mean over scales of the weighted voxel-mean cross entropy."""
    _check_pyramids(score_pyramid, label_pyramid)
    if weights is None and config is not None:
        weights = config.weights(score_pyramid[0].shape[1])
    terms = [weighted_cross_entropy(f, y, weights) for f, y in zip(score_pyramid, label_pyramid)]
    return torch.stack(terms).mean()


def tal_dps_loss(score_pyramid: Sequence[torch.Tensor], label_pyramid: Sequence, labeled: Iterable[int],
                 config: LossConfig = None) -> torch.Tensor:
    """Target adaptive loss applied at every output scale and averaged."""
    _check_pyramids(score_pyramid, label_pyramid)
    labeled = tuple(labeled)
    pairs = list(zip(score_pyramid, label_pyramid))
    if config is not None and config.tal_scales == "full":
        pairs = pairs[:1]
    return torch.stack([tal_loss_logits(f, y, labeled) for f, y in pairs]).mean()
