"""The shared desk-scale training fixture.

One seeded end-to-end run (synthetic data, random tiny extractor) reused by
the acceptance tests; cached per process because training takes ~1 minute.
All constants here are frozen regression values, chosen once and kept.
"""

from __future__ import annotations

from functools import lru_cache

from patchlens.backbone import BackboneConfig, backbone_random_init
from patchlens.data import AugmentConfig, synth_dataset
from patchlens.embedding import EmbeddingConfig
from patchlens.model import DetectorModel
from patchlens.rng import mix64
from patchlens.synthesis import GasConfig
from patchlens.training import SynthesisParams, TrainConfig, train

DATA_SEED = 101
TRAIN_SEED = 42
BACKBONE_SEED = 7
CHANNELS = (8, 32, 16)
HIDDEN = 16
INPUT_SIZE = 128
N_TRAIN, N_TEST, N_VAL = 64, 48, 16
MAX_EPOCHS = 30
SWEEP_EPOCHS = 8
POOL_SEED = 202

EMBED_CFG = EmbeddingConfig(common_grid="level2_res", patch_size=1, adaptor=True)
SYNTH = SynthesisParams(gas=GasConfig(sigma=0.2), ridge_prob=0.5)


def desk_data():
    return synth_dataset(DATA_SEED, N_TRAIN, N_TEST, 0.5, INPUT_SIZE, n_val=N_VAL)


def defect_pool(size: int = 32):
    _, _, pool = synth_dataset(POOL_SEED, 1, size, 1.0, INPUT_SIZE, n_val=1)
    return pool


def train_desk_model(train_samples, val_samples, seed: int = TRAIN_SEED,
                     max_epochs: int = MAX_EPOCHS):
    backbone = backbone_random_init(BACKBONE_SEED,
                                    config=BackboneConfig(channels=CHANNELS))
    cfg = TrainConfig(max_epochs=max_epochs, seed=seed)
    result = train(train_samples, cfg, val_samples, backbone=backbone,
                   embed_cfg=EMBED_CFG, hidden=HIDDEN, input_size=INPUT_SIZE,
                   synth=SYNTH, augment_cfg=AugmentConfig(seed=mix64(seed, "augment")))
    model = DetectorModel(backbone=backbone, embed_cfg=EMBED_CFG,
                          adaptor=result.adaptor, disc=result.disc,
                          input_size=INPUT_SIZE)
    return model, result


@lru_cache(maxsize=1)
def desk_run():
    """(model, result, train, val, test) for the canonical seeded run."""
    train_s, val_s, test_s = desk_data()
    model, result = train_desk_model(train_s, val_s)
    return model, result, train_s, val_s, test_s
