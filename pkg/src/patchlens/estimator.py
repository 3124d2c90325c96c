"""scikit-learn-style estimator wrapping the detection pipeline.

fit() consumes defect-free images, trains the head against synthesized
anomalies, and selects the best checkpoint on a held-out validation split
whose anomalous half is manufactured by texture-blend corruption. Scores
follow the domain convention in :meth:`anomaly_scores` (higher = more
anomalous); :meth:`score_samples` negates them to match the scikit-learn
outlier-detector convention.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator

from .backbone import BackboneConfig, backbone_random_init, load_weights
from .data import AugmentConfig, Sample, make_texture_provider
from .embedding import EmbeddingConfig
from .errors import ContractError
from .evaluate import image_score
from .model import DetectorModel
from .rng import mix64
from .synthesis import GasConfig, las_corrupt, perlin
from .tensor_ops import Tensor4, bilinear_resize
from .training import SynthesisParams, TrainConfig, train
from .validation import check_fitted, check_images

from scipy.special import expit


class PatchAnomalyDetector(BaseEstimator):
    """Patch-level visual anomaly detector with a fit/predict surface.

    Parameters mirror the pipeline configuration; get_params/set_params come
    from BaseEstimator so the detector composes with sklearn tooling.
    predict() returns {0,1} with 1 = defective (the useful convention for an
    inspection pipeline), thresholded at the `threshold_quantile` of the
    training-image scores.
    """

    def __init__(self, input_size: int = 256, channels: tuple = (64, 128, 256),
                 hidden: int = 175, patch_size: int = 3,
                 common_grid: str = "level3_res", adaptor: bool = True,
                 epochs: int = 20, batch_size: int = 8,
                 lr_disc: float = 2e-4, lr_adaptor: float = 1e-4,
                 focal_alpha: float = 0.25, focal_gamma: float = 2.0,
                 gas_sigma: float = 0.015, gas_steps: int = 1, gas_lr: float = 0.01,
                 las_beta: float = 0.5, perlin_octaves: int = 6,
                 perlin_threshold: float = 0.68,
                 augment: bool = True, val_fraction: float = 0.25,
                 threshold_quantile: float = 0.99,
                 smooth_sigma: float = 4.0, top_k: int = 1,
                 backbone_weights: str | None = None, backbone_scale: float = 1.0,
                 seed: int = 0):
        self.input_size = input_size
        self.channels = channels
        self.hidden = hidden
        self.patch_size = patch_size
        self.common_grid = common_grid
        self.adaptor = adaptor
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_disc = lr_disc
        self.lr_adaptor = lr_adaptor
        self.focal_alpha = focal_alpha
        self.focal_gamma = focal_gamma
        self.gas_sigma = gas_sigma
        self.gas_steps = gas_steps
        self.gas_lr = gas_lr
        self.las_beta = las_beta
        self.perlin_octaves = perlin_octaves
        self.perlin_threshold = perlin_threshold
        self.augment = augment
        self.val_fraction = val_fraction
        self.threshold_quantile = threshold_quantile
        self.smooth_sigma = smooth_sigma
        self.top_k = top_k
        self.backbone_weights = backbone_weights
        self.backbone_scale = backbone_scale
        self.seed = seed

    # ------------------------------------------------------------------

    def _build_backbone(self):
        config = BackboneConfig(channels=tuple(self.channels))
        if self.backbone_weights is not None:
            return load_weights(self.backbone_weights, config)
        return backbone_random_init(self.seed, scale=self.backbone_scale, config=config)

    def _synthetic_val(self, held_out: list[Sample]) -> list[Sample]:
        """Pair each held-out normal with a texture-corrupted anomalous twin."""
        textures = make_texture_provider(mix64(self.seed, "val-textures"))
        val: list[Sample] = list(held_out)
        for i, s in enumerate(held_out):
            mask = perlin(s.image.h, s.image.w, self.perlin_octaves,
                          mix64(self.seed, "val-mask", i), self.perlin_threshold)
            corrupted, mask_map = las_corrupt(
                s.image, textures(i, s.image.h, s.image.w), mask,
                beta=min(self.las_beta, 0.5))
            val.append(Sample(image=corrupted, label="anomalous", mask=mask_map,
                              source=f"synthetic-val:{i}", category=s.category))
        return val

    def fit(self, X, y=None):
        """Train on defect-free images (labels are ignored except to drop
        anomalous samples when a 0/1 vector is supplied)."""
        images = check_images(X)
        if y is not None:
            from .validation import check_labels_01
            keep = check_labels_01(y, len(images)) == 0
            images = [im for im, k in zip(images, keep) if k]
        if len(images) < 4:
            raise ContractError(f"need at least 4 training images, got {len(images)}")
        samples = [Sample(image=im, label="normal", source=f"fit:{i}")
                   for i, im in enumerate(images)]

        n_val = max(2, int(math.ceil(self.val_fraction * len(samples))))
        val_normals = samples[-n_val:]
        train_samples = samples[:-n_val]
        val_samples = self._synthetic_val(val_normals)

        backbone = self._build_backbone()
        embed_cfg = EmbeddingConfig(patch_size=self.patch_size,
                                    common_grid=self.common_grid,
                                    adaptor=self.adaptor)
        cfg = TrainConfig(lr_adaptor=self.lr_adaptor, lr_disc=self.lr_disc,
                          batch_size=self.batch_size, max_epochs=self.epochs,
                          focal_alpha=self.focal_alpha, focal_gamma=self.focal_gamma,
                          seed=self.seed)
        synth = SynthesisParams(
            gas=GasConfig(sigma=self.gas_sigma, ascent_steps=self.gas_steps,
                          ascent_lr=self.gas_lr),
            las_beta=self.las_beta, perlin_octaves=self.perlin_octaves,
            perlin_threshold=self.perlin_threshold)
        augment_cfg = AugmentConfig(seed=mix64(self.seed, "augment")) if self.augment \
            else AugmentConfig(rotation=False, translation=False, color_jitter=False,
                               hflip=False, vflip=False, seed=0)

        result = train(train_samples, cfg, val_samples, backbone=backbone,
                       embed_cfg=embed_cfg, hidden=self.hidden,
                       input_size=self.input_size, synth=synth,
                       augment_cfg=augment_cfg)
        self.model_ = DetectorModel(backbone=backbone, embed_cfg=embed_cfg,
                                    adaptor=result.adaptor, disc=result.disc,
                                    input_size=self.input_size)
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.best_val_auroc_ = result.best_auroc
        train_scores = self.anomaly_scores(X)
        self.threshold_ = float(np.quantile(train_scores, self.threshold_quantile))
        return self

    # ------------------------------------------------------------------

    def transform(self, X) -> np.ndarray:
        """Per-image probability heatmaps, stacked as (n, 1, G, G)."""
        check_fitted(self)
        maps = []
        for im in check_images(X):
            resized = bilinear_resize(im, self.input_size, self.input_size)
            maps.append(expit(self.model_.heatmaps(resized).values[0]))
        return np.stack(maps)

    def anomaly_scores(self, X) -> np.ndarray:
        """Image-level anomaly scores; higher means more anomalous."""
        check_fitted(self)
        scores = []
        for heat in self.transform(X):
            scores.append(image_score(Tensor4(heat[None]),
                                      smooth_sigma=self.smooth_sigma * self.model_.grid_size
                                      / self.input_size,
                                      top_k=self.top_k))
        return np.asarray(scores)

    def score_samples(self, X) -> np.ndarray:
        """Negated anomaly scores (sklearn convention: higher = more normal)."""
        return -self.anomaly_scores(X)

    def decision_function(self, X) -> np.ndarray:
        """Positive for inliers, negative for outliers."""
        check_fitted(self, "threshold_")
        return self.threshold_ - self.anomaly_scores(X)

    def predict(self, X) -> np.ndarray:
        """{0,1} labels with 1 = defective."""
        return (self.decision_function(X) < 0).astype(np.int64)
