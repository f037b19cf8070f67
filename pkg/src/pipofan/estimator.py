"""scikit-learn style wrapper around preprocessing, training and inference."""
from __future__ import annotations

import logging
from collections import OrderedDict

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .config import sub_seed
from .datamodel import ClassMap
from .evaluation import dice_per_case
from .fusion import AdaptiveFusion
from .inference import PostprocessRules, postprocess_components, predict_slices, segment_volume
from .losses import LossConfig
from .network import DEFAULT_CHANNELS, NetworkConfig, PipoFanNet
from .preprocess import PreprocessConfig, preprocess_sample
from .trainer import Trainer, TrainConfig, TrainingSet
from .validation import check_training_volumes, check_volumes

logger = logging.getLogger(__name__)


class PipoFanSegmenter(BaseEstimator):
    """Multi-organ CT segmenter trainable on several partially labeled datasets.

    ``fit`` takes a list of :class:`~pipofan.datamodel.VolumeSample` whose
    ``source`` descriptors say which organs each volume annotates; volumes
    from the same source form one dataset, and datasets take turns supplying
    batches. Raw arrays with ``y`` label volumes are treated as one fully
    labeled dataset. ``predict`` returns one label volume per input at the
    input's native size.
    """

    def __init__(self, class_names=("background", "liver", "kidney", "spleen"), scales=5,
                 channels=DEFAULT_CHANNELS, block_type="residual", hu_window=(-200.0, 200.0),
                 resize_to=256, crop_size=224, stack_depth=3, lr0=2e-4, max_epochs=4000,
                 dps_epochs=2000, decay=0.99, decay_every=40, batch_size=4, steps_per_epoch=None,
                 alternation="step", class_weights=None, tal_scales="all", fusion_kernel=3,
                 postprocess=True, component_budgets=None, random_state=0):
        self.class_names = class_names
        self.scales = scales
        self.channels = channels
        self.block_type = block_type
        self.hu_window = hu_window
        self.resize_to = resize_to
        self.crop_size = crop_size
        self.stack_depth = stack_depth
        self.lr0 = lr0
        self.max_epochs = max_epochs
        self.dps_epochs = dps_epochs
        self.decay = decay
        self.decay_every = decay_every
        self.batch_size = batch_size
        self.steps_per_epoch = steps_per_epoch
        self.alternation = alternation
        self.class_weights = class_weights
        self.tal_scales = tal_scales
        self.fusion_kernel = fusion_kernel
        self.postprocess = postprocess
        self.component_budgets = component_budgets
        self.random_state = random_state

    def _build_configs(self):
        class_map = ClassMap(tuple(self.class_names))
        preprocess = PreprocessConfig(tuple(self.hu_window), self.resize_to, self.crop_size,
                                      self.stack_depth, self.scales)
        network = NetworkConfig(self.scales, tuple(self.channels), self.block_type,
                                class_map.count, self.stack_depth)
        train = TrainConfig(lr0=self.lr0, max_epochs=self.max_epochs, dps_epochs=self.dps_epochs,
                            decay=self.decay, decay_every=self.decay_every, batch_size=self.batch_size,
                            seed=sub_seed(self.random_state, "sampling"),
                            alternation=self.alternation, steps_per_epoch=self.steps_per_epoch)
        loss = LossConfig(None if self.class_weights is None else tuple(self.class_weights), self.tal_scales)
        return class_map, preprocess, network, train, loss

    def fit(self, X, y=None, n_steps=None):
        class_map, preprocess, network, train, loss = self._build_configs()
        samples = check_training_volumes(X, y, class_map)
        groups = OrderedDict()
        for s in samples:
            groups.setdefault(s.source.name, (s.source, []))[1].append(preprocess_sample(s, preprocess))
        datasets = [TrainingSet(desc, vols) for desc, vols in groups.values()]

        init = sub_seed(self.random_state, "init")
        self.network_ = PipoFanNet(network, seed=init)
        self.fusion_ = AdaptiveFusion(class_map.count, self.fusion_kernel, seed=init + 1)
        trainer = Trainer(self.network_, self.fusion_, datasets, train, loss, preprocess)
        trainer.run(n_steps)
        self.class_map_ = class_map
        self.preprocess_config_ = preprocess
        self.history_ = list(trainer.state.history)
        self.n_steps_ = trainer.state.step
        return self

    def _rules(self):
        return PostprocessRules.for_class_map(self.class_map_, self.component_budgets)

    def predict_proba(self, X):
        """Fused class probabilities, ``(Z, C, H, W)`` per volume at the preprocessed size."""
        check_is_fitted(self, "network_")
        out = []
        for s in check_volumes(X):
            prepared = preprocess_sample(s, self.preprocess_config_)
            probs, _ = predict_slices(self.network_, self.fusion_, np.asarray(prepared.image))
            out.append(probs)
        return out

    def predict(self, X):
        check_is_fitted(self, "network_")
        out = []
        for s in check_volumes(X):
            prepared = preprocess_sample(s, self.preprocess_config_)
            labels = segment_volume(self.network_, self.fusion_, prepared, native_size=s.image.shape[-2:])
            if self.postprocess:
                labels = postprocess_components(labels, self._rules())
            out.append(labels)
        return out

    def score(self, X, y=None):
        """Mean per-case Dice over foreground classes."""
        samples = check_volumes(X)
        truths = y if y is not None else [s.labels for s in samples]
        preds = self.predict(samples)
        scores = [dice_per_case(p, t, c) for p, t in zip(preds, truths) for c in range(1, self.class_map_.count)]
        return float(np.mean(scores))

    def save(self, path):
        check_is_fitted(self, "network_")
        return save_checkpoint(path, self.network_, self.fusion_,
                               extra={"estimator_params": self.get_params(),
                                      "class_names": list(self.class_map_.names)})

    @classmethod
    def load(cls, path) -> "PipoFanSegmenter":
        network, fusion, payload = load_checkpoint(path)
        params = dict(payload["extra"].get("estimator_params", {}))
        est = cls(**params)
        class_map, preprocess, *_ = est._build_configs()
        est.network_, est.fusion_ = network, fusion
        est.class_map_, est.preprocess_config_ = class_map, preprocess
        est.history_ = []
        return est
