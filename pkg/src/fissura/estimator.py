"""scikit-learn style wrappers around the training and inference pipeline."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_pairs, check_volume, check_volume_list
from .nn.optim import LrSchedule
from .segment import PostprocessConfig, ScaleSet, binarize, evaluate, multiscale_predict, postprocess
from .synth import LabeledVolume, PatchSpec, TrainingSet, dataset_patches
from .training import FINETUNE_EPOCHS, Checkpoint, TrainConfig, finetune, train
from .unet import UnetConfig, build_unet
from .volume import Mask


def _training_set(X, y) -> TrainingSet:
    vols, masks = check_pairs(X, y)
    return TrainingSet([LabeledVolume(v, m) for v, m in zip(vols, masks)])


class PatchExtractor(BaseEstimator, TransformerMixin):
    """Cut (gray, truth) pairs into overlapping cubic patches.

    ``transform`` returns the gray patches stacked as ``(n, p, p, p)``;
    ``transform_pairs`` also returns the truth patches and origins.
    """

    def __init__(self, patch_size=64, overlap=14, min_crack_fraction=5e-5, filter_patches=None):
        self.patch_size = patch_size
        self.overlap = overlap
        self.min_crack_fraction = min_crack_fraction
        self.filter_patches = filter_patches

    def _spec(self) -> PatchSpec:
        return PatchSpec(self.patch_size, self.overlap, self.min_crack_fraction, self.filter_patches)

    def fit(self, X, y=None):
        self.spec_ = self._spec()
        return self

    def transform_pairs(self, X, y):
        spec = getattr(self, "spec_", None) or self._spec()
        patches = dataset_patches(_training_set(X, y), spec)
        gray = np.stack([p.gray for p in patches])
        truth = np.stack([p.truth for p in patches])
        origins = [(p.source_id, p.origin) for p in patches]
        return gray, truth, origins

    def transform(self, X, y=None):
        if y is None:
            # unlabeled input: tile without filtering
            X = check_volume_list(X)
            y = [Mask(np.zeros(v.dims, dtype=bool)) for v in X]
            spec = self._spec()
            self.spec_ = PatchSpec(spec.patch_size, spec.overlap_vox, spec.min_crack_fraction, False)
        return self.transform_pairs(X, y)[0]


class CrackSegmenter(BaseEstimator):
    """3D U-Net crack segmenter with multi-scale inference.

    Parameters mirror the configuration records: network width/depth, patch
    extraction, optimizer schedule, inference scales and post-processing.
    """

    def __init__(self, base_filters=16, levels=3, patch_size=32, overlap=14,
                 min_crack_fraction=5e-5, filter_patches=None, batch_size=2, epochs=20,
                 initial_lr=1e-3, halving_period=5, scales="base", threshold=0.5,
                 connectivity=26, boundary_crop=0, tile_size=64, seed=0):
        self.base_filters = base_filters
        self.levels = levels
        self.patch_size = patch_size
        self.overlap = overlap
        self.min_crack_fraction = min_crack_fraction
        self.filter_patches = filter_patches
        self.batch_size = batch_size
        self.epochs = epochs
        self.initial_lr = initial_lr
        self.halving_period = halving_period
        self.scales = scales
        self.threshold = threshold
        self.connectivity = connectivity
        self.boundary_crop = boundary_crop
        self.tile_size = tile_size
        self.seed = seed

    # configuration records built from the flat parameters
    def _unet_config(self) -> UnetConfig:
        return UnetConfig(base_filters=self.base_filters, levels=self.levels)

    def _train_config(self, epochs: Optional[int] = None) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs if epochs is None else epochs,
            schedule=LrSchedule(self.initial_lr, self.halving_period),
            patch_spec=PatchSpec(self.patch_size, self.overlap, self.min_crack_fraction,
                                 self.filter_patches),
            seed=self.seed)

    def _post_config(self) -> PostprocessConfig:
        return PostprocessConfig(self.threshold, self.connectivity, self.boundary_crop)

    def _check_fitted(self):
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError("CrackSegmenter is not fitted yet; call fit or from_checkpoint")

    def fit(self, X, y):
        """Train from scratch on volumes ``X`` with crack masks ``y``."""
        data = _training_set(X, y)
        self.network_ = build_unet(self._unet_config(), seed=self.seed)
        self.checkpoint_ = train(self.network_, data, self._train_config())
        self.history_ = list(self.checkpoint_.history)
        return self

    def finetune(self, X, y, epochs: int = FINETUNE_EPOCHS):
        """Continue training with a fresh optimizer; keeps the epoch counter."""
        self._check_fitted()
        self.checkpoint_ = finetune(self.checkpoint_, _training_set(X, y), self._train_config(epochs),
                                    expected_config=self._unet_config())
        self.network_ = self.checkpoint_.to_network()
        self.history_ = list(self.checkpoint_.history)
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, **params) -> "CrackSegmenter":
        est = cls(base_filters=ckpt.config.base_filters, levels=ckpt.config.levels, **params)
        est.checkpoint_ = ckpt
        est.network_ = ckpt.to_network()
        est.history_ = list(ckpt.history)
        return est

    def predict_proba(self, X) -> np.ndarray:
        """Fused multi-scale crack probability for one volume."""
        self._check_fitted()
        return multiscale_predict(self.network_, check_volume(X), ScaleSet.parse(self.scales),
                                  PatchSpec(self.tile_size))

    def predict(self, X) -> Mask:
        """Thresholded, boundary-cropped largest crack component."""
        cfg = self._post_config()
        return postprocess(binarize(self.predict_proba(X), cfg), cfg)

    def score(self, X, y) -> float:
        """Mean Dice over the given (volume, mask) pairs."""
        vols, masks = check_pairs(X, y)
        return float(np.mean([evaluate(self.predict(v), m).dice for v, m in zip(vols, masks)]))
