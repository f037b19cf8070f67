"""Slice-wise volume segmentation, connected-component cleanup and majority voting."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .datamodel import LABEL_DTYPE, ClassMap, VolumeSample
from .exceptions import ConfigurationError, ContractError
from .fusion import AdaptiveFusion
from .network import PipoFanNet
from .preprocess import resize_labels, stack_indices

#: organs kept as a fixed number of components; other organs default to one
DEFAULT_BUDGETS = {"liver": 1, "spleen": 1, "kidney": 2}


@dataclass(frozen=True)
class PostprocessRules:
    """Maximum number of connected components kept per foreground class index."""

    budgets: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        budgets = {int(k): int(v) for k, v in dict(self.budgets).items()}
        bad = {k: v for k, v in budgets.items() if k < 1 or v < 1}
        if bad:
            raise ConfigurationError(f"budgets need foreground classes and counts >= 1: {bad}")
        object.__setattr__(self, "budgets", budgets)

    @classmethod
    def for_class_map(cls, class_map: ClassMap, overrides: Optional[Mapping[str, int]] = None,
                      default: int = 1) -> "PostprocessRules":
        named = dict(DEFAULT_BUDGETS)
        named.update(overrides or {})
        unknown = sorted(set(overrides or {}) - set(class_map.names))
        if unknown:
            raise ConfigurationError(f"rules name classes {unknown} absent from {list(class_map.names)}")
        return cls({i: named.get(name, default) for i, name in enumerate(class_map.names) if i > 0})


def _connectivity(ndim: int) -> np.ndarray:
    return ndimage.generate_binary_structure(ndim, ndim)


def postprocess_components(labels: np.ndarray, rules: PostprocessRules) -> np.ndarray:
    """Keep only the ``budget`` largest fully-connected components of each class.

    Removed voxels become background. Equal-size components are ranked by
    their first voxel in scan order.
    """
    labels = np.asarray(labels)
    out = labels.copy()
    structure = _connectivity(labels.ndim)
    for cls, budget in sorted(rules.budgets.items()):
        mask = labels == cls
        if not mask.any():
            continue
        comp, n = ndimage.label(mask, structure=structure)
        if n <= budget:
            continue
        sizes = np.bincount(comp.ravel())[1:]
        # ndimage.label numbers components in scan order, so a stable sort breaks ties by position
        order = np.argsort(-sizes, kind="stable")
        drop = np.isin(comp, order[budget:] + 1)
        out[drop] = 0
    return out


def count_components(labels: np.ndarray, cls: int) -> int:
    return int(ndimage.label(np.asarray(labels) == cls, structure=_connectivity(np.ndim(labels)))[1])


def ensemble_vote(predictions: Sequence[np.ndarray], n_classes: Optional[int] = None) -> np.ndarray:
    """Per-voxel majority vote over label volumes; ties go to the lowest class index."""
    if len(predictions) == 0:
        raise ContractError("need at least one prediction to vote")
    preds = [np.asarray(p) for p in predictions]
    shape = preds[0].shape
    for p in preds[1:]:
        if p.shape != shape:
            raise ContractError(f"prediction shapes differ: {shape} vs {p.shape}")
    if n_classes is None:
        n_classes = int(max(p.max() for p in preds)) + 1 if preds[0].size else 1
    counts = np.zeros((n_classes,) + shape, dtype=np.int32)
    for p in preds:
        for c in range(n_classes):
            counts[c] += p == c
    return counts.argmax(axis=0).astype(preds[0].dtype)


def ensemble_soft(probabilities: Sequence[np.ndarray], channel_axis: int = 1) -> np.ndarray:
    """Average class probabilities, then argmax. Not majority voting; offered for comparison."""
    if len(probabilities) == 0:
        raise ContractError("need at least one probability map")
    mean = np.mean(np.stack([np.asarray(p, dtype=np.float64) for p in probabilities]), axis=0)
    return mean.argmax(axis=channel_axis).astype(LABEL_DTYPE)


def _pad_amounts(size: int, divisor: int):
    target = -(-size // divisor) * divisor
    extra = target - size
    return extra // 2, extra - extra // 2


@torch.no_grad()
def predict_slices(network: PipoFanNet, fusion: AdaptiveFusion, image: np.ndarray,
                   stack_depth: Optional[int] = None, batch_size: int = 8,
                   pad_policy: str = "pad"):
    """Fused class probabilities for every axial slice of a preprocessed volume.

    Returns ``(probs, meta)`` with ``probs`` of shape ``(Z, C, H, W)``.
    """
    stack_depth = stack_depth or network.config.in_channels
    n_slices, h, w = image.shape
    divisor = network.config.min_divisor
    pads = (_pad_amounts(h, divisor), _pad_amounts(w, divisor))
    if any(sum(p) for p in pads):
        if pad_policy != "pad":
            raise ConfigurationError(f"slice size {(h, w)} is not divisible by {divisor}")
    meta = {"pad_policy": pad_policy, "pad": [list(p) for p in pads]}
    vol = np.pad(image, ((0, 0),) + pads, mode="edge") if any(sum(p) for p in pads) else image

    network.eval()
    fusion.eval()
    chunks = []
    for start in range(0, n_slices, batch_size):
        centers = range(start, min(start + batch_size, n_slices))
        x = np.stack([vol[stack_indices(z, stack_depth, n_slices)] for z in centers]).astype(np.float32)
        out = fusion(network(torch.from_numpy(x)))
        chunks.append(out.fused_probs.double().numpy())
    probs = np.concatenate(chunks)
    (t, b), (l, r) = pads
    probs = probs[..., t:probs.shape[-2] - b, l:probs.shape[-1] - r]
    return probs, meta


def segment_volume(network: PipoFanNet, fusion: AdaptiveFusion, volume: VolumeSample,
                   native_size=None, batch_size: int = 8, pad_policy: str = "pad",
                   return_meta: bool = False):
    """Label every slice of a preprocessed volume from the fused prediction.

    The result is resized (nearest neighbour) to ``native_size`` in-plane
    when given. Ties in the argmax go to the lowest class index.
    """
    image = np.asarray(volume.image if isinstance(volume, VolumeSample) else volume)
    probs, meta = predict_slices(network, fusion, image, batch_size=batch_size, pad_policy=pad_policy)
    labels = probs.argmax(axis=1).astype(LABEL_DTYPE)
    if native_size is not None:
        labels = resize_labels(labels, tuple(native_size))
        meta["native_size"] = list(native_size)
    return (labels, meta) if return_meta else labels
