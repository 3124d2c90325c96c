"""Assembled detector (frozen extractor + adaptor + head) and checkpoint IO.

Checkpoints are TGW containers holding the trainable tensors, the epoch and
best-validation-AUROC record, the folded extractor (so evaluation needs no
external weight file), and the configuration scalars required to rebuild the
model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import (BackboneConfig, BackboneWeights, backbone_from_folded,
                       extract_features, folded_tensors)
from .data import IMAGENET_MEAN, IMAGENET_STD
from .embedding import EmbeddingConfig, apply_adaptor, embed_pre
from .errors import FormatError
from .tensor_ops import Tensor4
from .tgw import read_tgw, write_tgw
from .training import DiscriminatorWeights, disc_forward


@dataclass(frozen=True)
class DetectorModel:
    backbone: BackboneWeights
    embed_cfg: EmbeddingConfig
    adaptor: np.ndarray | None
    disc: DiscriminatorWeights
    input_size: int = 256

    @property
    def grid_size(self) -> int:
        stride = 16 if self.embed_cfg.common_grid == "level3_res" else 8
        return self.input_size // stride

    @property
    def embed_dim(self) -> int:
        return self.backbone.config.channels[1] + self.backbone.config.channels[2]

    def normalize(self, image01: Tensor4) -> Tensor4:
        mean = np.asarray(IMAGENET_MEAN)[None, :, None, None]
        std = np.asarray(IMAGENET_STD)[None, :, None, None]
        return Tensor4._wrap((image01.values - mean) / std)

    def heatmaps(self, image01: Tensor4) -> Tensor4:
        """Patch-level logit heatmap (n,1,G,G) from a [0,1] image batch."""
        feats = extract_features(self.backbone, self.normalize(image01))
        e = embed_pre(feats, self.embed_cfg)
        if self.adaptor is not None:
            e = apply_adaptor(e, self.adaptor)
        return disc_forward(self.disc, e)


_GRID_CODES = {"level3_res": 0, "level2_res": 1}
_GRID_NAMES = {v: k for k, v in _GRID_CODES.items()}


def save_checkpoint(path, model: DetectorModel, epoch: int, best_auroc: float) -> None:
    tensors: dict[str, np.ndarray] = {
        "meta.epoch": np.array([epoch], dtype=np.uint32),
        "meta.best_auroc": np.array([best_auroc], dtype=np.float32),
        "meta.input_size": np.array([model.input_size], dtype=np.uint32),
        "meta.channels": np.array(model.backbone.config.channels, dtype=np.uint32),
        "meta.patch_size": np.array([model.embed_cfg.patch_size], dtype=np.uint32),
        "meta.common_grid": np.array([_GRID_CODES[model.embed_cfg.common_grid]],
                                     dtype=np.uint32),
        "meta.hidden": np.array([model.disc.hidden], dtype=np.uint32),
        "meta.slope": np.array([model.disc.slope], dtype=np.float32),
    }
    if model.adaptor is not None:
        tensors["adaptor.weight"] = model.adaptor
    for name, arr in model.disc.as_param_dict().items():
        tensors[f"disc.{name}"] = arr
    tensors.update(folded_tensors(model.backbone))
    write_tgw(path, tensors)


def load_checkpoint(path) -> tuple[DetectorModel, int, float]:
    tensors = read_tgw(path)
    required = ("meta.epoch", "meta.best_auroc", "meta.input_size", "meta.channels",
                "meta.patch_size", "meta.common_grid", "meta.hidden", "meta.slope")
    missing = [k for k in required if k not in tensors]
    if missing:
        raise FormatError(f"checkpoint {path} is missing {missing}")
    channels = tuple(int(v) for v in tensors["meta.channels"])
    config = BackboneConfig(channels=channels)
    backbone = backbone_from_folded(tensors, config)
    embed_cfg = EmbeddingConfig(
        patch_size=int(tensors["meta.patch_size"][0]),
        common_grid=_GRID_NAMES[int(tensors["meta.common_grid"][0])],
        adaptor="adaptor.weight" in tensors,
    )
    adaptor = tensors["adaptor.weight"].astype(np.float64) if embed_cfg.adaptor else None
    try:
        disc = DiscriminatorWeights.from_param_dict(
            {k.split(".", 1)[1]: tensors[k].astype(np.float64)
             for k in ("disc.conv_a.weight", "disc.conv_a.bias",
                       "disc.conv_b.weight", "disc.conv_b.bias")},
            slope=float(tensors["meta.slope"][0]))
    except KeyError as exc:
        raise FormatError(f"checkpoint {path} is missing discriminator tensor {exc}")
    model = DetectorModel(backbone=backbone, embed_cfg=embed_cfg, adaptor=adaptor,
                          disc=disc, input_size=int(tensors["meta.input_size"][0]))
    return model, int(tensors["meta.epoch"][0]), float(tensors["meta.best_auroc"][0])
