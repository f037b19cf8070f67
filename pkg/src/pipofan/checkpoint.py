"""Single-file checkpoints: versioned config plus named parameter arrays."""
from __future__ import annotations

import hashlib
import logging
import pickle
from dataclasses import asdict
from pathlib import Path

import torch

from .exceptions import ConfigurationError
from .fusion import AdaptiveFusion
from .network import NetworkConfig, PipoFanNet, check_parameter_count, count_parameters

logger = logging.getLogger(__name__)

FORMAT = "pipofan-checkpoint"
VERSION = 1


def save_checkpoint(path, network: PipoFanNet, fusion: AdaptiveFusion, train_state=None,
                    extra: dict = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "network_config": asdict(network.config),
        "fusion_kernel": fusion.shared_conv.kernel_size[0],
        "network": network.state_dict(),
        "fusion": fusion.state_dict(),
        "n_parameters": count_parameters(network) + count_parameters(fusion),
        "train_state": None if train_state is None else train_state.to_dict(),
        "extra": dict(extra or {}),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Return ``(network, fusion, payload)``.

    Raises OSError if the file cannot be read and ConfigurationError if it is
    not a compatible checkpoint.
    """
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise ConfigurationError(f"{path} is not a pipofan checkpoint")
    if payload.get("version") != VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    config = NetworkConfig(**payload["network_config"])
    network = PipoFanNet(config)
    fusion = AdaptiveFusion(config.n_classes, kernel_size=payload.get("fusion_kernel", 3))
    try:
        network.load_state_dict(payload["network"])
        fusion.load_state_dict(payload["fusion"])
    except RuntimeError as exc:
        raise ConfigurationError(f"{path}: parameters do not match the stored config: {exc}") from exc
    total = count_parameters(network)
    if payload.get("n_parameters") != total + count_parameters(fusion):
        raise ConfigurationError(f"{path}: stored parameter count does not match the model")
    check_parameter_count(total, config)
    return network, fusion, payload


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
