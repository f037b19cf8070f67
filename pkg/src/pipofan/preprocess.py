"""CT preparation: HU windowing, slice resizing, z-scoring, 2.5D stack sampling
and label pyramids for deep supervision."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from .datamodel import LABEL_DTYPE, ScalePyramid, VolumeSample
from .exceptions import ConfigurationError, ContractError, SamplingError

ZSCORE_EPS = 1e-8


@dataclass(frozen=True)
class PreprocessConfig:
    hu_window: tuple = (-200.0, 200.0)
    resize_to: int = 256
    crop_size: int = 224
    stack_depth: int = 3
    scales: int = 5

    def __post_init__(self):
        object.__setattr__(self, "hu_window", tuple(float(v) for v in self.hu_window))
        low, high = self.hu_window
        if not low < high:
            raise ConfigurationError(f"hu_window low must be below high, got {self.hu_window}")
        if self.crop_size > self.resize_to:
            raise ConfigurationError(f"crop_size {self.crop_size} exceeds resize_to {self.resize_to}")
        if self.scales < 1:
            raise ConfigurationError("scales must be >= 1")
        if self.crop_size % 2 ** (self.scales - 1):
            raise ConfigurationError(
                f"crop_size {self.crop_size} is not divisible by 2^{self.scales - 1}"
            )
        if self.stack_depth < 1 or self.stack_depth % 2 == 0:
            raise ConfigurationError(f"stack_depth must be a positive odd number, got {self.stack_depth}")


def window_hu(volume, window=(-200.0, 200.0)) -> np.ndarray:
    low, high = window
    return np.clip(np.asarray(volume, dtype=np.float32), low, high)


def normalize_zscore(volume, eps: float = ZSCORE_EPS) -> np.ndarray:
    """Zero-mean, unit-variance over the whole volume; constant input maps to zeros."""
    volume = np.asarray(volume)
    if volume.size == 0:
        raise ContractError("cannot normalize an empty volume")
    v = volume.astype(np.float64)
    std = v.std()
    out = (v - v.mean()) / (std if std > eps else 1.0)
    return out.astype(np.float32)


def resize_slices(volume, labels=None, target: int = 256):
    """Resize every axial slice to ``target`` x ``target``.

    Images use bilinear interpolation, labels nearest neighbour so the label
    value set is preserved. Returns ``(volume, labels)``; labels may be None.
    """
    volume = np.asarray(volume)
    h, w = volume.shape[-2:]
    if h != w:
        raise ContractError(f"resize expects square slices, got {h}x{w}")
    if h == target:
        return volume.copy(), None if labels is None else np.asarray(labels).copy()
    img = torch.from_numpy(np.ascontiguousarray(volume, dtype=np.float32)).unsqueeze(1)
    img = F.interpolate(img, size=(target, target), mode="bilinear", align_corners=False)
    out = img.squeeze(1).numpy()
    if labels is None:
        return out, None
    return out, resize_labels(labels, (target, target))


def resize_labels(labels, size) -> np.ndarray:
    """Nearest-neighbour in-plane resize of a (z, y, x) label volume."""
    labels = np.asarray(labels)
    if tuple(labels.shape[-2:]) == tuple(size):
        return labels.copy()
    lab = torch.from_numpy(labels.astype(np.int64)).unsqueeze(1).double()
    lab = F.interpolate(lab, size=tuple(size), mode="nearest")
    return lab.squeeze(1).numpy().astype(labels.dtype)


def preprocess_sample(sample: VolumeSample, config: PreprocessConfig) -> VolumeSample:
    """Window, resize and z-score a volume in that order."""
    image = window_hu(sample.image, config.hu_window)
    image, labels = resize_slices(image, sample.labels, config.resize_to)
    image = normalize_zscore(image)
    factor = sample.image.shape[-1] / config.resize_to
    spacing = (sample.spacing[0], sample.spacing[1] * factor, sample.spacing[2] * factor)
    return sample.replace(image=image, labels=labels, spacing=spacing)


def stack_indices(center: int, depth: int, n_slices: int) -> np.ndarray:
    """Contiguous slice indices around ``center`` with edge replication."""
    half = depth // 2
    return np.clip(np.arange(center - half, center + half + 1), 0, n_slices - 1)


def labeled_centers(labels: np.ndarray, labeled_classes) -> np.ndarray:
    """Slice indices whose label map contains at least one labeled-class voxel."""
    hits = np.isin(labels, sorted(labeled_classes))
    return np.flatnonzero(hits.reshape(hits.shape[0], -1).any(axis=1))


def sample_stack(sample: VolumeSample, rng: np.random.Generator, config: PreprocessConfig = None,
                 return_meta: bool = False):
    """Draw a random 2.5D training example from a preprocessed volume.

    The centre slice is chosen uniformly among slices that contain a voxel
    of the source dataset's labeled classes. Returns ``(stack, label)`` with
    shapes ``(stack_depth, crop, crop)`` and ``(crop, crop)``.
    """
    config = config or PreprocessConfig()
    if sample.labels is None:
        raise ContractError(f"volume {sample.case_id!r} has no labels to sample from")
    if sample.source is not None:
        classes = sample.source.labeled_classes
    else:
        classes = [int(v) for v in np.unique(sample.labels) if v != 0]
    centers = labeled_centers(sample.labels, classes)
    if centers.size == 0:
        raise SamplingError(f"volume {sample.case_id!r} has no slice containing a target label")

    n_slices, h, w = sample.image.shape
    crop = config.crop_size
    if crop > h or crop > w:
        raise ContractError(f"crop {crop} larger than slice {h}x{w}")
    center = int(centers[rng.integers(centers.size)])
    y0 = int(rng.integers(h - crop + 1))
    x0 = int(rng.integers(w - crop + 1))
    idx = stack_indices(center, config.stack_depth, n_slices)
    stack = np.asarray(sample.image[idx, y0:y0 + crop, x0:x0 + crop], dtype=np.float32)
    label = np.asarray(sample.labels[center, y0:y0 + crop, x0:x0 + crop], dtype=LABEL_DTYPE)
    if return_meta:
        return stack, label, {"center": center, "slices": idx.tolist(), "origin": (y0, x0)}
    return stack, label


def build_label_pyramid(label, scales: int) -> ScalePyramid:
    """Halve a label map ``scales - 1`` times, keeping the top-left voxel of each 2x2 block.

    Works on any array or tensor whose last two axes are spatial.
    """
    h, w = label.shape[-2:]
    if h % 2 ** (scales - 1) or w % 2 ** (scales - 1):
        raise ConfigurationError(f"label size {(h, w)} is not divisible by 2^{scales - 1}")
    levels = [label]
    for _ in range(scales - 1):
        levels.append(levels[-1][..., ::2, ::2])
    return ScalePyramid(tuple(levels))


class HUWindow(TransformerMixin, BaseEstimator):
    """Clip intensities to a Hounsfield window."""

    def __init__(self, low=-200.0, high=200.0):
        self.low = low
        self.high = high

    def fit(self, X, y=None):
        if not self.low < self.high:
            raise ConfigurationError(f"low must be below high, got ({self.low}, {self.high})")
        return self

    def transform(self, X):
        return window_hu(X, (self.low, self.high))


class ZScoreNormalizer(TransformerMixin, BaseEstimator):
    """Per-volume standardization; statistics come from the array being transformed."""

    def __init__(self, eps=ZSCORE_EPS):
        self.eps = eps

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return normalize_zscore(X, self.eps)


class SliceResizer(TransformerMixin, BaseEstimator):
    def __init__(self, size=256):
        self.size = size

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return resize_slices(X, None, self.size)[0]
