"""Builders for tiny on-disk datasets and configs used by CLI and I/O tests."""
from pathlib import Path

import numpy as np
import yaml

from pipofan.io import write_manifest, write_nifti
from pipofan.synthetic import make_disk_square_images

CLASSES = ["background", "liver", "kidney"]


def write_volume(path, n_slices=3, size=32, seed=0):
    """Write an image/label pair built from disk-and-square slices; returns the full label array."""
    images, labels = make_disk_square_images(n_slices, size, seed)
    write_nifti(Path(path) / "image.nii.gz", images, spacing=(2.0, 1.0, 1.0))
    write_nifti(Path(path) / "label.nii.gz", labels, spacing=(2.0, 1.0, 1.0))
    return images, labels


def make_dataset(root, name, organ, raw_value, n_volumes=2, seed=0):
    """One manifest whose label files keep only ``organ`` under value ``raw_value``."""
    root = Path(root)
    global_value = CLASSES.index(organ)
    vols = []
    for i in range(n_volumes):
        d = root / name / f"case{i}"
        d.mkdir(parents=True)
        images, labels = make_disk_square_images(3, 32, seed + i)
        raw = np.where(labels == global_value, raw_value, 0).astype(np.uint8)
        write_nifti(d / "image.nii.gz", images, spacing=(2.0, 1.0, 1.0))
        write_nifti(d / "label.nii.gz", raw, spacing=(2.0, 1.0, 1.0))
        vols.append({"id": f"{name}_{i}", "image": f"{name}/case{i}/image.nii.gz",
                     "label": f"{name}/case{i}/label.nii.gz"})
    return write_manifest(root / f"{name}.yaml", name, [organ], vols,
                          labels={0: "background", raw_value: f"raw_{organ}"},
                          remap={f"raw_{organ}": organ})


def experiment_dict(manifests, output_dir="run", steps=4):
    return {
        "seed": 0,
        "output_dir": str(output_dir),
        "classes": CLASSES,
        "datasets": [str(m) for m in manifests],
        "preprocess": {"resize_to": 32, "crop_size": 16, "scales": 3},
        "network": {"channels": [4, 8, 8, 8, 4]},
        "train": {"lr0": 0.001, "max_epochs": steps, "dps_epochs": max(1, steps // 2),
                  "batch_size": 2, "steps_per_epoch": 1},
    }


def write_experiment(root, steps=4):
    root = Path(root)
    manifests = [make_dataset(root, "livers", "liver", 1), make_dataset(root, "kidneys", "kidney", 7, seed=10)]
    path = root / "experiment.yaml"
    path.write_text(yaml.safe_dump(experiment_dict([m.name for m in manifests], "run", steps)))
    return path
