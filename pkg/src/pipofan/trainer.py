"""Two-phase training over several partially labeled datasets.

Phase one (``dps``) supervises every output scale; phase two (``af``)
switches the adaptive fusion layer on and supervises only the fused output.
Batches are drawn from one dataset at a time, visiting datasets round-robin,
so each batch has a single well-defined labeled-class set.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .datamodel import DatasetDescriptor, VolumeSample
from .exceptions import ConfigurationError, NonFiniteLossError
from .fusion import AdaptiveFusion
from .losses import LossConfig, dps_loss, tal_dps_loss, tal_loss_logits, weighted_cross_entropy
from .network import PipoFanNet
from .preprocess import PreprocessConfig, build_label_pyramid, sample_stack

logger = logging.getLogger(__name__)

DPS = "dps"
AF = "af"


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2e-4
    max_epochs: int = 4000
    dps_epochs: int = 2000
    decay: float = 0.99
    decay_every: int = 40
    batch_size: int = 4
    seed: int = 0
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8
    alternation: str = "step"
    steps_per_epoch: Optional[int] = None
    checkpoint_every: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if not 0 < self.dps_epochs <= self.max_epochs:
            raise ConfigurationError(
                f"need 0 < dps_epochs <= max_epochs, got {self.dps_epochs}, {self.max_epochs}"
            )
        if not self.lr0 > 0:
            raise ConfigurationError("lr0 must be positive")
        if not 0 < self.decay <= 1:
            raise ConfigurationError("decay must be in (0, 1]")
        if self.decay_every < 1 or self.batch_size < 1:
            raise ConfigurationError("decay_every and batch_size must be >= 1")
        if self.alternation not in ("step", "epoch"):
            raise ConfigurationError(f"alternation must be 'step' or 'epoch', got {self.alternation!r}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigurationError("steps_per_epoch must be >= 1")


#: multi-organ preset; use ``SINGLE_ORGAN_TRAIN`` for single-organ models
MULTI_ORGAN_TRAIN = TrainConfig()
SINGLE_ORGAN_TRAIN = TrainConfig(lr0=2e-3, max_epochs=2500)


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.lr0 * config.decay ** (epoch // config.decay_every)


def phase_for(epoch: int, config: TrainConfig) -> str:
    return DPS if epoch < config.dps_epochs else AF


@dataclass
class TrainingSet:
    """A dataset descriptor with its preprocessed, labeled volumes."""

    descriptor: DatasetDescriptor
    samples: Sequence[VolumeSample]

    def __post_init__(self):
        self.samples = list(self.samples)
        if not self.samples:
            raise ConfigurationError(f"dataset {self.descriptor.name!r} has no volumes")


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    rng_state: Optional[dict] = None
    cursors: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    network_state: Optional[dict] = None
    fusion_state: Optional[dict] = None
    optimizer_state: Optional[dict] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        return cls(**d)


def steps_per_epoch(datasets: Sequence[TrainingSet], config: TrainConfig) -> int:
    if config.steps_per_epoch is not None:
        return config.steps_per_epoch
    n_volumes = sum(len(ds.samples) for ds in datasets)
    return max(1, math.ceil(n_volumes / config.batch_size))


def source_index(step: int, epoch: int, n_datasets: int, config: TrainConfig) -> int:
    return (step if config.alternation == "step" else epoch) % n_datasets


def next_batch(datasets: Sequence[TrainingSet], state: TrainState, rng: np.random.Generator,
               config: TrainConfig, preprocess: PreprocessConfig):
    """Draw one batch from the dataset whose turn it is.

    Volumes within a dataset are visited in a reshuffled order so every volume
    contributes one random stack per pass. Returns ``(batch, descriptor)``.
    """
    if not datasets:
        raise ConfigurationError("no training datasets")
    ds = datasets[source_index(state.step, state.epoch, len(datasets), config)]
    name = ds.descriptor.name
    cursor = state.cursors.setdefault(name, {"order": [], "pos": 0})
    images, labels, case_ids = [], [], []
    for _ in range(config.batch_size):
        if cursor["pos"] >= len(cursor["order"]):
            cursor["order"] = rng.permutation(len(ds.samples)).tolist()
            cursor["pos"] = 0
        sample = ds.samples[cursor["order"][cursor["pos"]]]
        cursor["pos"] += 1
        stack, label = sample_stack(sample, rng, preprocess)
        images.append(stack)
        labels.append(label)
        case_ids.append(sample.case_id)
    batch = {
        "images": torch.from_numpy(np.stack(images)),
        "labels": torch.from_numpy(np.stack(labels).astype(np.int64)),
        "case_ids": case_ids,
        "source": name,
        "labeled_classes": sorted(ds.descriptor.labeled_classes),
    }
    return batch, ds.descriptor


class Trainer:
    """Stateful optimization loop; :meth:`state_dict` captures everything needed to resume."""

    def __init__(self, network: PipoFanNet, fusion: AdaptiveFusion, datasets: Sequence[TrainingSet],
                 config: TrainConfig = MULTI_ORGAN_TRAIN, loss_config: LossConfig = LossConfig(),
                 preprocess: PreprocessConfig = PreprocessConfig(), out_dir=None,
                 checkpoint_extra: Optional[dict] = None):
        if not datasets:
            raise ConfigurationError("no training datasets")
        self.network = network
        self.fusion = fusion
        self.datasets = list(datasets)
        self.config = config
        self.loss_config = loss_config
        self.preprocess = preprocess
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.checkpoint_extra = dict(checkpoint_extra or {})
        self.n_classes = network.config.n_classes
        for ds in self.datasets:
            if max(ds.descriptor.labeled_classes) >= self.n_classes:
                raise ConfigurationError(
                    f"dataset {ds.descriptor.name!r} labels classes beyond the network's {self.n_classes}"
                )
        self.steps_per_epoch = steps_per_epoch(self.datasets, config)
        self.rng = np.random.default_rng(config.seed)
        self.state = TrainState()
        self.optimizer = torch.optim.RMSprop(
            list(network.parameters()) + list(fusion.parameters()),
            lr=config.lr0, alpha=config.rms_alpha, eps=config.rms_eps,
        )
        if config.deterministic:
            torch.use_deterministic_algorithms(True)

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def parameters(self):
        return list(self.network.parameters()) + list(self.fusion.parameters())

    def _use_weighted_ce(self, labeled_classes) -> bool:
        full = set(labeled_classes) == set(range(1, self.n_classes))
        return full and not self.loss_config.is_unit()

    def compute_loss(self, batch: dict, phase: str):
        """Forward the batch and build the phase's objective.

        Returns ``(loss, terms)`` where ``terms`` has a ``"dps"`` entry (None
        in the fusion phase) and a ``"fused"`` entry (None in the DPS phase).
        """
        images, labels = batch["images"], batch["labels"]
        labeled = batch["labeled_classes"]
        weighted = self._use_weighted_ce(labeled)
        weights = self.loss_config.weights(self.n_classes) if weighted else None
        scores = self.network(images)
        if phase == DPS:
            label_pyr = build_label_pyramid(labels, len(scores))
            if weighted:
                loss = dps_loss(scores, label_pyr, weights=weights)
            else:
                loss = tal_dps_loss(scores, label_pyr, labeled, self.loss_config)
            return loss, {"dps": loss, "fused": None}
        out = self.fusion(scores, target_size=labels.shape[-2:])
        if weighted:
            loss = weighted_cross_entropy(out.fused_logits, labels, weights)
        else:
            loss = tal_loss_logits(out.fused_logits, labels, labeled)
        return loss, {"dps": None, "fused": loss}

    def step(self) -> dict:
        st = self.state
        st.epoch = st.step // self.steps_per_epoch
        phase = phase_for(st.epoch, self.config)
        lr = lr_at(st.epoch, self.config)
        batch, descriptor = next_batch(self.datasets, st, self.rng, self.config, self.preprocess)

        self.network.train()
        self.fusion.train()
        self.optimizer.zero_grad(set_to_none=True)
        loss, _ = self.compute_loss(batch, phase)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(
                f"non-finite loss {value} at step {st.step}",
                snapshot={"step": st.step, "epoch": st.epoch, "phase": phase,
                          "source": batch["source"], "case_ids": batch["case_ids"]},
            )
        loss.backward()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()

        record = {"step": st.step, "epoch": st.epoch, "phase": phase,
                  "source": descriptor.name, "loss": value, "lr": lr}
        st.history.append(record)
        st.step += 1
        st.epoch = st.step // self.steps_per_epoch
        self._log(record)
        if self.config.checkpoint_every and self.out_dir and st.step % self.config.checkpoint_every == 0:
            self.save(self.out_dir / f"checkpoint_{st.step:06d}.pt")
            self.save(self.out_dir / "last.pt")
        return record

    @property
    def total_steps(self) -> int:
        return self.config.max_epochs * self.steps_per_epoch

    def run(self, n_steps: Optional[int] = None) -> TrainState:
        """Run ``n_steps`` more steps (default: until ``max_epochs`` is reached)."""
        remaining = self.total_steps - self.state.step
        n = remaining if n_steps is None else min(n_steps, remaining)
        threads = torch.get_num_threads()
        if self.config.deterministic:
            torch.set_num_threads(1)
        try:
            for _ in range(max(n, 0)):
                self.step()
        finally:
            torch.set_num_threads(threads)
        if self.out_dir is not None and n > 0:
            self.save(self.out_dir / "last.pt")
        return self.state

    def _log(self, record: dict):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "train_log.jsonl", "a") as fh:
            fh.write(json.dumps(record) + "\n")

    def state_dict(self) -> TrainState:
        st = copy.deepcopy(self.state)
        st.rng_state = copy.deepcopy(self.rng.bit_generator.state)
        st.network_state = copy.deepcopy(self.network.state_dict())
        st.fusion_state = copy.deepcopy(self.fusion.state_dict())
        st.optimizer_state = copy.deepcopy(self.optimizer.state_dict())
        return st

    def load_state_dict(self, st: TrainState):
        st = copy.deepcopy(st)
        if st.network_state is not None:
            self.network.load_state_dict(st.network_state)
        if st.fusion_state is not None:
            self.fusion.load_state_dict(st.fusion_state)
        if st.optimizer_state is not None:
            self.optimizer.load_state_dict(st.optimizer_state)
        if st.rng_state is not None:
            self.rng.bit_generator.state = st.rng_state
        st.network_state = st.fusion_state = st.optimizer_state = None
        self.state = st

    def save(self, path, extra: Optional[dict] = None):
        from .checkpoint import save_checkpoint

        extra = dict(self.checkpoint_extra, **(extra or {}))
        save_checkpoint(path, self.network, self.fusion, train_state=self.state_dict(), extra=extra)


def train(config: TrainConfig, datasets: Sequence[TrainingSet], network: PipoFanNet,
          fusion: AdaptiveFusion, losses: LossConfig = LossConfig(),
          preprocess: PreprocessConfig = PreprocessConfig(), out_dir=None,
          n_steps: Optional[int] = None, resume: Optional[TrainState] = None) -> TrainState:
    trainer = Trainer(network, fusion, datasets, config, losses, preprocess, out_dir)
    if resume is not None:
        trainer.load_state_dict(resume)
    trainer.run(n_steps)
    return trainer.state_dict()
