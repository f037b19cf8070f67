"""Domain types: the global class space, dataset descriptors, volumes and pyramids."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np

from .exceptions import ConfigurationError, ContractError

LABEL_DTYPE = np.uint8
BACKGROUND = "background"


@dataclass(frozen=True)
class ClassMap:
    """Ordered class names shared by every dataset; index 0 is background."""

    names: tuple = (BACKGROUND, "liver", "kidney", "spleen")

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ConfigurationError("a class map needs background plus at least one organ")
        if len(names) > np.iinfo(LABEL_DTYPE).max + 1:
            raise ConfigurationError(f"at most {np.iinfo(LABEL_DTYPE).max + 1} classes are supported")
        if names[0] != BACKGROUND:
            raise ConfigurationError(f"class 0 must be {BACKGROUND!r}, got {names[0]!r}")
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate class names in {names}")

    @property
    def count(self) -> int:
        return len(self.names)

    @property
    def foreground(self) -> frozenset:
        return frozenset(range(1, self.count))

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigurationError(
                f"class {name!r} is not in the class map {list(self.names)}"
            ) from None

    def indices(self, names: Sequence[str]) -> frozenset:
        return frozenset(self.index(n) for n in names)


DEFAULT_CLASS_MAP = ClassMap()


@dataclass(frozen=True)
class DatasetDescriptor:
    """A dataset and the subset of organs annotated in it.

    ``labeled_classes`` holds global class indices (background excluded).
    ``local_names`` maps raw label values found in the dataset's files to
    global class names, after the manifest's remap table has been applied.
    """

    name: str
    labeled_classes: frozenset
    volume_refs: tuple = ()
    local_names: Mapping[int, str] = field(default_factory=dict)
    split_assignments: Optional[Mapping[str, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "labeled_classes", frozenset(int(c) for c in self.labeled_classes))
        object.__setattr__(self, "volume_refs", tuple(self.volume_refs))
        if not self.labeled_classes:
            raise ConfigurationError(f"dataset {self.name!r} labels no classes")
        if 0 in self.labeled_classes:
            raise ConfigurationError(f"dataset {self.name!r}: background cannot be a labeled class")

    def check_against(self, class_map: ClassMap) -> None:
        bad = sorted(c for c in self.labeled_classes if not 1 <= c < class_map.count)
        if bad:
            raise ConfigurationError(
                f"dataset {self.name!r}: labeled classes {bad} outside 1..{class_map.count - 1}"
            )

    @property
    def allowed_labels(self) -> frozenset:
        return self.labeled_classes | {0}


def _readonly(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True)
class VolumeSample:
    """One CT volume in (z, y, x) order with optional, possibly partial, labels.

    Construction does not validate; use :func:`validate_sample` to get a report.
    """

    image: np.ndarray
    spacing: tuple
    labels: Optional[np.ndarray] = None
    source: Optional[DatasetDescriptor] = None
    case_id: str = ""
    affine: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "image", _readonly(np.asarray(self.image)))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.labels is not None:
            object.__setattr__(self, "labels", _readonly(np.asarray(self.labels)))

    @property
    def shape(self) -> tuple:
        return self.image.shape

    def replace(self, **changes) -> "VolumeSample":
        params = dict(
            image=self.image, spacing=self.spacing, labels=self.labels,
            source=self.source, case_id=self.case_id, affine=self.affine,
        )
        params.update(changes)
        return VolumeSample(**params)


def validate_sample(sample: VolumeSample, descriptor: Optional[DatasetDescriptor] = None) -> list:
    """Return a list of human-readable violations; an empty list means valid."""
    descriptor = descriptor if descriptor is not None else sample.source
    report = []
    if sample.image.ndim != 3:
        report.append(f"image must be 3D (z, y, x), got {sample.image.ndim}D")
    if len(sample.spacing) != sample.image.ndim:
        report.append(f"spacing has {len(sample.spacing)} entries for a {sample.image.ndim}D image")
    if any(not (s > 0) for s in sample.spacing):
        report.append(f"nonpositive spacing {sample.spacing}")
    if sample.labels is not None:
        if sample.labels.shape != sample.image.shape:
            report.append(f"shape mismatch: labels {sample.labels.shape} vs image {sample.image.shape}")
        if not np.issubdtype(sample.labels.dtype, np.integer):
            report.append(f"labels must be integers, got {sample.labels.dtype}")
        elif descriptor is not None:
            present = set(np.unique(sample.labels).tolist())
            extra = sorted(present - descriptor.allowed_labels)
            if extra:
                report.append(
                    f"label outside C_k: values {extra} not in {sorted(descriptor.allowed_labels)}"
                )
    return report


def remap_labels(
    labels: np.ndarray,
    dataset_class_names: Union[Sequence[str], Mapping[int, str]],
    class_map: ClassMap,
) -> np.ndarray:
    """Translate dataset-local label values into the global class space.

    ``dataset_class_names`` gives the global class name for each local value,
    either as a list indexed by value or as a ``{value: name}`` mapping. Several
    local values may share a name (e.g. left and right kidney both -> kidney).
    """
    if isinstance(dataset_class_names, Mapping):
        pairs = {int(k): v for k, v in dataset_class_names.items()}
    else:
        pairs = dict(enumerate(dataset_class_names))
    if pairs.get(0, BACKGROUND) != BACKGROUND:
        raise ConfigurationError(f"local value 0 must be background, got {pairs[0]!r}")
    pairs[0] = BACKGROUND

    labels = np.asarray(labels)
    if labels.size and labels.min() < 0:
        raise ContractError("negative label values")
    top = max(max(pairs), int(labels.max()) if labels.size else 0)
    lut = np.full(top + 1, -1, dtype=np.int64)
    for value, name in pairs.items():
        lut[value] = class_map.index(name)
    out = lut[labels]
    if labels.size and out.min() < 0:
        missing = sorted(set(np.unique(labels[out < 0]).tolist()))
        raise ConfigurationError(f"label values {missing} have no class name in the remap table")
    return out.astype(LABEL_DTYPE)


def _spatial(level: Any) -> tuple:
    return tuple(level.shape[-2:])


@dataclass(frozen=True)
class ScalePyramid:
    """Ordered per-scale maps; each level halves the spatial size of the previous one.

    Levels may be numpy arrays or torch tensors; only the last two axes are
    treated as spatial.
    """

    levels: tuple

    def __post_init__(self):
        levels = tuple(self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise ContractError("a pyramid needs at least one level")
        h, w = _spatial(levels[0])
        n = len(levels)
        if h % 2 ** (n - 1) or w % 2 ** (n - 1):
            raise ConfigurationError(
                f"spatial size {(h, w)} is not divisible by 2^{n - 1} for {n} scales"
            )
        for s, level in enumerate(levels):
            expected = (h >> s, w >> s)
            if _spatial(level) != expected:
                raise ContractError(f"level {s + 1} has size {_spatial(level)}, expected {expected}")

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, idx):
        return self.levels[idx]

    def __iter__(self):
        return iter(self.levels)

    @property
    def shapes(self) -> list:
        return [tuple(level.shape) for level in self.levels]


@dataclass(frozen=True)
class SegmentationOutput:
    """Per-scale score maps, the fusion weights and the fused class probabilities."""

    score_pyramid: ScalePyramid
    fusion_weights: Any = None
    fused_probs: Any = None
    fused_logits: Any = None

    def check_invariants(self, atol: float = 1e-6) -> None:
        if self.fusion_weights is not None:
            w = _to_numpy(self.fusion_weights)
            if (w < 0).any() or not np.allclose(w.sum(axis=-1), 1.0, atol=atol, rtol=0):
                raise ContractError("fusion weights are not on the probability simplex")
        if self.fused_probs is not None:
            p = _to_numpy(self.fused_probs)
            channel_axis = p.ndim - 3
            if not np.allclose(p.sum(axis=channel_axis), 1.0, atol=atol, rtol=0):
                raise ContractError("fused probabilities do not sum to one per voxel")


def _to_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)
