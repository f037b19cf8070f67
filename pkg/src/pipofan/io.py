"""NIfTI volumes and dataset manifests.

Arrays are handled in (z, y, x) order inside the package; NIfTI files store
(x, y, z), so reads and writes transpose.

A manifest is a YAML file describing one dataset::

    name: kits
    labeled_classes: [kidney]
    labels: {0: background, 1: kidney, 2: kidney_tumor}
    remap: {kidney_tumor: kidney}
    volumes:
      - {id: case_00000, image: images/case_00000.nii.gz, label: labels/case_00000.nii.gz}

``labels`` names the raw values found in the label files; ``remap`` rewrites
those names onto the experiment's class map (many-to-one allowed, and
``background`` is a valid target). Relative paths resolve against the
manifest's directory.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import nibabel as nib
import numpy as np
import yaml

from .datamodel import BACKGROUND, LABEL_DTYPE, ClassMap, DatasetDescriptor, VolumeSample, remap_labels
from .exceptions import ConfigurationError

MANIFEST_KEYS = {"name", "labeled_classes", "labels", "remap", "volumes"}
VOLUME_KEYS = {"id", "image", "label"}


def read_nifti(path):
    """Return ``(array_zyx, spacing_zyx, affine)``; raises OSError if unreadable."""
    path = Path(path)
    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj)
    except Exception as exc:  # nibabel raises several unrelated types
        raise OSError(f"cannot read NIfTI file {path}: {exc}") from exc
    if data.ndim != 3:
        raise OSError(f"{path}: expected a 3D volume, got {data.ndim}D")
    zooms = img.header.get_zooms()[:3]
    return data.T, tuple(float(z) for z in zooms[::-1]), img.affine


def write_nifti(path, array_zyx: np.ndarray, affine: Optional[np.ndarray] = None, spacing=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if affine is None:
        affine = np.diag(list(spacing[::-1]) + [1.0]) if spacing is not None else np.eye(4)
    img = nib.Nifti1Image(np.ascontiguousarray(np.asarray(array_zyx).T), affine)
    nib.save(img, str(path))
    return path


def _read_yaml(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping at the top level")
    return data


def load_manifest(path, class_map: ClassMap, check_files: bool = True) -> DatasetDescriptor:
    path = Path(path)
    data = _read_yaml(path)
    unknown = set(data) - MANIFEST_KEYS
    if unknown:
        raise ConfigurationError(f"{path}: unknown manifest keys {sorted(unknown)}")
    for key in ("name", "labeled_classes", "volumes"):
        if key not in data:
            raise ConfigurationError(f"{path}: missing required key {key!r}")

    labeled = data["labeled_classes"]
    if isinstance(labeled, str):
        labeled = [labeled]
    raw_names = {int(k): str(v) for k, v in (data.get("labels") or {0: BACKGROUND, 1: labeled[0]}).items()}
    remap = {str(k): str(v) for k, v in (data.get("remap") or {}).items()}
    local_names = {value: remap.get(name, name) for value, name in raw_names.items()}
    for value, name in local_names.items():
        if name not in class_map.names:
            raise ConfigurationError(
                f"{path}: label {value} ({raw_names[value]!r}) resolves to {name!r}, "
                f"which is not in the class map; add it to 'remap'"
            )

    refs = []
    root = path.parent
    for i, vol in enumerate(data["volumes"] or []):
        if not isinstance(vol, dict):
            raise ConfigurationError(f"{path}: volumes[{i}] must be a mapping")
        extra = set(vol) - VOLUME_KEYS
        if extra:
            raise ConfigurationError(f"{path}: volumes[{i}] has unknown keys {sorted(extra)}")
        if "image" not in vol:
            raise ConfigurationError(f"{path}: volumes[{i}] needs an 'image'")
        ref = {"id": str(vol.get("id", Path(vol["image"]).name.split(".")[0])),
               "image": str((root / vol["image"]).resolve())}
        if vol.get("label"):
            ref["label"] = str((root / vol["label"]).resolve())
        if check_files:
            for key in ("image", "label"):
                if key in ref and not Path(ref[key]).exists():
                    raise ConfigurationError(f"{path}: volumes[{i}].{key} does not exist: {ref[key]}")
        refs.append(ref)
    ids = [r["id"] for r in refs]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"{path}: duplicate volume ids")

    desc = DatasetDescriptor(
        name=str(data["name"]),
        labeled_classes=class_map.indices(labeled),
        volume_refs=tuple(refs),
        local_names=local_names,
    )
    desc.check_against(class_map)
    return desc


def load_sample(descriptor: DatasetDescriptor, ref: dict, class_map: ClassMap) -> VolumeSample:
    """Read one image/label pair and remap its labels into the global class space."""
    image, spacing, affine = read_nifti(ref["image"])
    labels = None
    if ref.get("label"):
        raw, _, _ = read_nifti(ref["label"])
        labels = remap_labels(raw.astype(np.int64), descriptor.local_names, class_map)
    return VolumeSample(image.astype(np.float32), spacing, labels, descriptor, ref["id"], affine)


def write_manifest(path, name: str, labeled_classes, volumes, labels=None, remap=None) -> Path:
    path = Path(path)
    data = {"name": name, "labeled_classes": list(labeled_classes), "volumes": list(volumes)}
    if labels is not None:
        data["labels"] = dict(labels)
    if remap:
        data["remap"] = dict(remap)
    path.write_text(yaml.safe_dump(data, sort_keys=False))
    return path


def load_label_volume(path) -> tuple:
    data, spacing, affine = read_nifti(path)
    return data.astype(LABEL_DTYPE), spacing, affine
