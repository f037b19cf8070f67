"""Experiment configuration: one YAML file, unknown keys rejected.

Example::

    seed: 0
    output_dir: runs/multi_organ
    classes: [background, liver, kidney, spleen]
    datasets: [manifests/btcv.yaml, manifests/lits.yaml]
    preprocess: {resize_to: 256, crop_size: 224}
    network: {channels: [64, 128, 256, 512, 512, 512, 256, 128, 64]}
    loss: {tal_scales: all}
    train: {lr0: 0.0002, max_epochs: 4000, dps_epochs: 2000}

``network.scales`` defaults to ``preprocess.scales``; class count and input
channels are derived from ``classes`` and ``preprocess.stack_depth``.
"""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .datamodel import ClassMap
from .exceptions import ConfigurationError
from .losses import LossConfig
from .network import NetworkConfig
from .preprocess import PreprocessConfig
from .trainer import TrainConfig

TOP_KEYS = {"seed", "output_dir", "classes", "datasets", "preprocess", "network", "fusion", "loss", "train"}
FUSION_KEYS = {"kernel_size"}


def sub_seed(seed: int, stream: str) -> int:
    """Independent seed for a named random stream (``"init"``, ``"sampling"``, ``"folds"``)."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stream.encode())])
    return int(ss.generate_state(1)[0])


def _build(cls, data, section: str, **fixed):
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"{section}: unknown keys {sorted(unknown)}; allowed {sorted(names)}")
    clash = set(data) & set(fixed)
    if clash:
        raise ConfigurationError(f"{section}: {sorted(clash)} are derived and cannot be set")
    for k, v in data.items():
        if isinstance(v, list):
            data[k] = tuple(v)
    try:
        return cls(**data, **fixed)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{section}: {exc}") from exc
    except TypeError as exc:
        raise ConfigurationError(f"{section}: {exc}") from exc


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _plain(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


@dataclass(frozen=True)
class ExperimentConfig:
    class_map: ClassMap
    datasets: tuple
    preprocess: PreprocessConfig
    network: NetworkConfig
    loss: LossConfig
    train: TrainConfig
    output_dir: str = "runs/default"
    seed: int = 0
    fusion_kernel: int = 3
    base_dir: str = field(default=".", compare=False)

    @property
    def init_seed(self) -> int:
        return sub_seed(self.seed, "init")

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a mapping")
        unknown = set(data) - TOP_KEYS
        if unknown:
            raise ConfigurationError(f"unknown top-level keys {sorted(unknown)}; allowed {sorted(TOP_KEYS)}")
        seed = int(data.get("seed", 0))
        class_map = ClassMap(tuple(data.get("classes") or ClassMap().names))
        if not data.get("datasets"):
            raise ConfigurationError("datasets: at least one manifest is required")
        preprocess = _build(PreprocessConfig, data.get("preprocess"), "preprocess")
        net = dict(data.get("network") or {})
        net.setdefault("scales", preprocess.scales)
        network = _build(NetworkConfig, net, "network", n_classes=class_map.count,
                         in_channels=preprocess.stack_depth)
        if preprocess.crop_size % network.min_divisor:
            raise ConfigurationError(
                f"preprocess.crop_size {preprocess.crop_size} must be divisible by {network.min_divisor}"
            )
        loss = _build(LossConfig, data.get("loss"), "loss")
        try:
            loss.weights(class_map.count)
        except ConfigurationError as exc:
            raise ConfigurationError(f"loss: {exc}") from exc
        train = dict(data.get("train") or {})
        train.setdefault("seed", sub_seed(seed, "sampling"))
        train = _build(TrainConfig, train, "train")
        fusion = dict(data.get("fusion") or {})
        if set(fusion) - FUSION_KEYS:
            raise ConfigurationError(f"fusion: unknown keys {sorted(set(fusion) - FUSION_KEYS)}")
        kernel = int(fusion.get("kernel_size", 3))
        if kernel < 1 or kernel % 2 == 0:
            raise ConfigurationError("fusion.kernel_size must be a positive odd number")
        return cls(
            class_map=class_map,
            datasets=tuple(str(p) for p in data["datasets"]),
            preprocess=preprocess,
            network=network,
            loss=loss,
            train=train,
            output_dir=str(data.get("output_dir", "runs/default")),
            seed=seed,
            fusion_kernel=kernel,
            base_dir=str(base_dir),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML: {exc}") from exc
        cfg = cls.from_dict(data, base_dir=path.parent)
        for p in cfg.dataset_paths():
            if not p.exists():
                raise ConfigurationError(f"datasets: manifest not found: {p}")
        return cfg

    def dataset_paths(self) -> list:
        return [(Path(self.base_dir) / p).resolve() for p in self.datasets]

    def output_path(self) -> Path:
        return (Path(self.base_dir) / self.output_dir).resolve()

    def to_dict(self) -> dict:
        net = _plain(self.network)
        for derived in ("n_classes", "in_channels"):
            net.pop(derived)
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "classes": list(self.class_map.names),
            "datasets": list(self.datasets),
            "preprocess": _plain(self.preprocess),
            "network": net,
            "fusion": {"kernel_size": self.fusion_kernel},
            "loss": _plain(self.loss),
            "train": _plain(self.train),
        }

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path
