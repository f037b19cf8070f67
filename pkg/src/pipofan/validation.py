"""Input checks used by the estimator API."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .datamodel import ClassMap, DatasetDescriptor, VolumeSample, validate_sample
from .exceptions import ConfigurationError, ContractError


def check_volume(x, spacing=(1.0, 1.0, 1.0)) -> VolumeSample:
    """Coerce an array or VolumeSample into a 3D VolumeSample."""
    if isinstance(x, VolumeSample):
        sample = x
    else:
        arr = np.asarray(x)
        if arr.ndim == 2:
            arr = arr[None]
        sample = VolumeSample(arr, spacing)
    if sample.image.ndim != 3:
        raise ContractError(f"expected a 3D (z, y, x) volume, got shape {sample.image.shape}")
    if sample.image.shape[1] != sample.image.shape[2]:
        raise ContractError(f"axial slices must be square, got {sample.image.shape[1:]}")
    if not np.issubdtype(sample.image.dtype, np.number):
        raise ContractError(f"image must be numeric, got {sample.image.dtype}")
    return sample


def check_volumes(X) -> list:
    if isinstance(X, (np.ndarray, VolumeSample)):
        X = [X]
    out = [check_volume(x) for x in X]
    if not out:
        raise ContractError("no volumes given")
    return out


def check_training_volumes(X, y: Optional[Sequence] = None, class_map: Optional[ClassMap] = None) -> list:
    """Validate labeled volumes and attach a source dataset when missing.

    Arrays with separate ``y`` labels are treated as one fully labeled dataset.
    Raises ContractError listing every violation found.
    """
    samples = check_volumes(X)
    if y is not None:
        if len(y) != len(samples):
            raise ContractError(f"{len(samples)} volumes but {len(y)} label volumes")
        samples = [s.replace(labels=np.asarray(lab)) for s, lab in zip(samples, y)]
    fallback = None
    problems = []
    out = []
    for i, s in enumerate(samples):
        if s.labels is None:
            problems.append(f"volume {i} ({s.case_id!r}): no labels")
            continue
        if s.source is None:
            if fallback is None:
                if class_map is None:
                    raise ContractError("unlabeled-source volumes need a class map")
                fallback = DatasetDescriptor("default", class_map.foreground)
            s = s.replace(source=fallback)
        if class_map is not None:
            try:
                s.source.check_against(class_map)
            except ConfigurationError as exc:
                problems.append(str(exc))
        for msg in validate_sample(s):
            problems.append(f"volume {i} ({s.case_id!r}): {msg}")
        out.append(s)
    if problems:
        raise ContractError("invalid training data:\n  " + "\n  ".join(problems))
    return out
