"""Synthetic partially labeled data for desk-scale checks.

Each image holds one disk ("liver") and one square ("kidney"). Two datasets
are built from disjoint halves of the images: one annotates only disks,
the other only squares.
"""
from __future__ import annotations

import numpy as np

from .datamodel import LABEL_DTYPE, ClassMap, DatasetDescriptor, VolumeSample
from .losses import LossConfig
from .network import NetworkConfig
from .preprocess import PreprocessConfig
from .trainer import TrainConfig, TrainingSet

SYNTHETIC_CLASSES = ClassMap(("background", "liver", "kidney"))
DESK_CHANNELS = (16, 32, 64, 128, 128, 128, 64, 32, 16)

DISK_HU = 120.0
SQUARE_HU = 60.0
BACKGROUND_HU = -100.0
NOISE_HU = 20.0


def make_disk_square_images(n: int = 16, size: int = 96, seed: int = 0):
    """Return ``(images, labels)`` of shapes ``(n, size, size)``; labels 1 = disk, 2 = square."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    images = np.empty((n, size, size), dtype=np.float32)
    labels = np.zeros((n, size, size), dtype=LABEL_DTYPE)
    for i in range(n):
        while True:
            r = rng.integers(size // 10, size // 6 + 1)
            cy, cx = rng.integers(r + 2, size - r - 2, size=2)
            side = rng.integers(size // 6, size // 4 + 1)
            sy, sx = rng.integers(2, size - side - 2, size=2)
            disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
            square = (yy >= sy) & (yy < sy + side) & (xx >= sx) & (xx < sx + side)
            # keep a gap between the two shapes
            grown = (yy - cy) ** 2 + (xx - cx) ** 2 <= (r + 3) ** 2
            if not (grown & square).any():
                break
        img = np.full((size, size), BACKGROUND_HU)
        img[disk] = DISK_HU
        img[square] = SQUARE_HU
        images[i] = img + rng.normal(0.0, NOISE_HU, size=(size, size))
        labels[i][disk] = 1
        labels[i][square] = 2
    return images, labels


def make_partial_datasets(n: int = 16, size: int = 96, seed: int = 0):
    """Two single-slice-volume datasets with disjoint images and disjoint label sets.

    Returns ``(datasets, images, full_labels)`` where ``datasets`` are
    unpreprocessed ``(descriptor, samples)`` pairs.
    """
    images, labels = make_disk_square_images(n, size, seed)
    half = n // 2
    specs = [("disks", 1, range(0, half)), ("squares", 2, range(half, n))]
    out = []
    for name, cls, idx in specs:
        desc = DatasetDescriptor(name, {cls}, local_names={0: "background", cls: SYNTHETIC_CLASSES.names[cls]})
        samples = []
        for i in idx:
            partial = np.where(labels[i] == cls, cls, 0).astype(LABEL_DTYPE)
            samples.append(VolumeSample(images[i][None], (1.0, 1.0, 1.0), partial[None], desc, f"{name}_{i:02d}"))
        out.append((desc, samples))
    return out, images, labels


def desk_configs(steps: int = 500, dps_fraction: float = 0.6, seed: int = 0):
    """Configs for the synthetic overfit run: reduced widths, 5 scales, 64x64 crops."""
    preprocess = PreprocessConfig(resize_to=96, crop_size=64, stack_depth=3, scales=5)
    network = NetworkConfig(scales=5, channels=DESK_CHANNELS, n_classes=SYNTHETIC_CLASSES.count,
                            in_channels=preprocess.stack_depth, block_type="residual")
    batch_size = 4
    steps_per_epoch = 4
    epochs = steps // steps_per_epoch
    train = TrainConfig(lr0=2e-3, max_epochs=epochs, dps_epochs=max(1, int(epochs * dps_fraction)),
                        decay=0.99, decay_every=40, batch_size=batch_size, seed=seed,
                        steps_per_epoch=steps_per_epoch)
    return preprocess, network, train, LossConfig()


def to_training_sets(datasets, preprocess: PreprocessConfig):
    from .preprocess import preprocess_sample

    return [TrainingSet(desc, [preprocess_sample(s, preprocess) for s in samples]) for desc, samples in datasets]
